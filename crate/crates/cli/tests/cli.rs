use std::path::Path;
use std::process::Command;

use tinyobs::dataset::Dataset;
use tinyobs::eval::{ar_thresholds, default_budgets, RocCurve};
use tinyobs::pipeline::{evaluate, PipelineModel, MODEL_MAGIC};
use tinyobs_cli::{exit, read_rows, EvalSummary};

fn tinyobs(args: &[&str]) -> (i32, String) {
    tinyobs_env(args, None)
}

fn tinyobs_env(args: &[&str], config: Option<&Path>) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tinyobs"));
    cmd.args(args).env_remove(tinyobs_cli::CONFIG_ENV);
    if let Some(c) = config {
        cmd.env(tinyobs_cli::CONFIG_ENV, c);
    }
    let out = cmd.output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(tinyobs(&["frobnicate"]).0, exit::USAGE);
    assert_eq!(tinyobs(&["train", "--data", "x"]).0, exit::USAGE);
    assert_eq!(tinyobs(&["synth", "--out", "x", "--count", "many"]).0, exit::USAGE);
    assert_eq!(tinyobs(&["--help"]).0, exit::OK);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = tinyobs(&["predict", "--model", s(&dir.path().join("none.bin")), "--image", "a.png", "--out", s(dir.path())]);
    assert_eq!(code, exit::DATA, "{err}");
    assert_eq!(tinyobs(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("m.bin"))]).0, exit::DATA);
    assert_eq!(tinyobs(&["synth", "--out", s(dir.path()), "--set", "layers=0"]).0, exit::DATA);

    // a model file from a future format version
    let mut bytes = MODEL_MAGIC.to_vec();
    bytes.extend_from_slice(&99u32.to_le_bytes());
    let future = dir.path().join("future.bin");
    std::fs::write(&future, bytes).unwrap();
    let (code, err) = tinyobs(&["predict", "--model", s(&future), "--image", "a.png", "--out", s(dir.path())]);
    assert_eq!(code, exit::DATA);
    assert!(err.contains("99"), "{err}");
}

#[test]
fn config_path_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "layers = 2\nno_such_key = 1\n").unwrap();
    let (code, err) = tinyobs_env(&["synth", "--out", s(&dir.path().join("d")), "--count", "1"], Some(&bad));
    assert_eq!(code, exit::DATA);
    assert!(err.contains("no_such_key"), "{err}");
}

#[test]
fn synth_train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = d.join("run.conf");
    std::fs::write(&conf, "# small and quick\nforest_trees = 15\nlayers = 2\n").unwrap();
    let run = |args: &[&str]| {
        let (code, err) = tinyobs_env(args, Some(&conf));
        assert_eq!(code, exit::OK, "{args:?}: {err}");
    };
    run(&["synth", "--out", s(&d.join("train")), "--count", "10", "--seed", "3"]);
    run(&["synth", "--out", s(&d.join("test")), "--count", "3", "--seed", "700"]);
    run(&["train", "--data", s(&d.join("train")), "--out", s(&d.join("k2.bin")), "--jobs", "1"]);
    run(&["train", "--data", s(&d.join("train")), "--out", s(&d.join("k1.bin")), "--layers", "1"]);
    let k2 = PipelineModel::load(&d.join("k2.bin")).unwrap();
    assert_eq!(k2.partition.k(), 2);
    assert_eq!(k2.config().unwrap().forest.trees, 15);
    assert_eq!(PipelineModel::load(&d.join("k1.bin")).unwrap().partition.k(), 1);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("k2.bin.report.json")).unwrap()).unwrap();
    assert_eq!(report["feature_frequency"].as_array().unwrap().len(), 20);

    let img = d.join("test/images/scene_0001.png");
    run(&["predict", "--model", s(&d.join("k2.bin")), "--image", s(&img), "--out", s(&d.join("pred")), "--debug-dumps"]);
    for f in ["scene_0001.prob.png", "scene_0001.prob.color.png", "scene_0001.proposals.csv", "scene_0001.scored.csv"] {
        assert!(d.join("pred").join(f).exists(), "{f}");
    }
    for f in ["edges_2.png", "enhanced_1.png", "superpixels_1.png", "occlusion_2.png", "occlusion.json"] {
        assert!(d.join("pred/scene_0001.debug").join(f).exists(), "{f}");
    }
    let props = read_rows(&d.join("pred/scene_0001.proposals.csv")).unwrap();
    assert!(props.iter().all(|r| (1..=2).contains(&r.layer) && r.score.is_none()));
    let scored = read_rows(&d.join("pred/scene_0001.scored.csv")).unwrap();
    assert!(scored.windows(2).all(|w| w[0].score >= w[1].score));

    // both resume points reproduce the map
    let png = std::fs::read(d.join("pred/scene_0001.prob.png")).unwrap();
    let occ = d.join("pred/scene_0001.debug/occlusion.json");
    run(&["predict", "--model", s(&d.join("k2.bin")), "--image", s(&img), "--out", s(&d.join("r1")), "--resume-occlusion", s(&occ)]);
    assert_eq!(std::fs::read(d.join("r1/scene_0001.prob.png")).unwrap(), png);
    assert_eq!(std::fs::read(d.join("r1/scene_0001.scored.csv")).unwrap(), std::fs::read(d.join("pred/scene_0001.scored.csv")).unwrap());
    let sc = d.join("pred/scene_0001.scored.csv");
    run(&["predict", "--model", s(&d.join("k2.bin")), "--image", s(&img), "--out", s(&d.join("r2")), "--resume-scored", s(&sc)]);
    assert_eq!(std::fs::read(d.join("r2/scene_0001.prob.png")).unwrap(), png);

    // per-model reports, consistent with direct metric calls
    run(&["eval", "--model", s(&d.join("k1.bin")), s(&d.join("k2.bin")), "--data", s(&d.join("test")), "--out", s(&d.join("eval"))]);
    for k in ["k1", "k2"] {
        for f in ["summary.json", "roc.csv", "recall.csv"] {
            assert!(d.join("eval").join(k).join(f).exists(), "{k}/{f}");
        }
    }
    let summary: EvalSummary = serde_json::from_str(&std::fs::read_to_string(d.join("eval/k2/summary.json")).unwrap()).unwrap();
    let totals = evaluate(&k2, &Dataset::open(&d.join("test")).unwrap(), &default_budgets(), &ar_thresholds()).unwrap();
    assert_eq!(summary.summary.auc, RocCurve::from_counts(&totals.roc).auc);
    assert_eq!(summary.summary.recall_at_1000[0].recall, totals.recall.report().at(1000, 0.5).unwrap());
    assert_eq!(summary.summary.images, 3);
    assert_eq!(summary.layers, 2);
    assert_eq!(std::fs::read_to_string(d.join("eval/k2/roc.csv")).unwrap(), RocCurve::from_counts(&totals.roc).to_csv());
}
