use std::sync::OnceLock;

use tinyobs::config::Config;
use tinyobs::eval::{ar_thresholds, pixel_counts, pixel_roc, RocCurve};
use tinyobs::pipeline::{
    evaluate, evaluate_prediction, predict, predict_from_occlusion, train, EvaluationTotals, LabeledImage, PipelineModel, TrainingReport,
};
use tinyobs::probmap::ProbabilityMap;
use tinyobs::raster::{label, BBox};
use tinyobs::synth::{generate, Placement, SceneSpec};
use tinyobs::Error;

fn labeled(spec: &SceneSpec, id: &str) -> LabeledImage {
    let s = generate(spec).unwrap();
    LabeledImage { id: id.into(), image: s.image, mask: s.mask, boxes: s.boxes }
}

fn scenes(start: u64, n: u64) -> Vec<LabeledImage> {
    (start..start + n).map(|i| labeled(&SceneSpec::default().with_seed(i), &i.to_string())).collect()
}

fn small_config(layers: usize) -> Config {
    let mut c = Config { layers, ..Config::default() };
    c.forest.trees = 30;
    c
}

/// K=2 model with default settings, shared by the tests below.
fn fixture() -> &'static (PipelineModel, TrainingReport) {
    static M: OnceLock<(PipelineModel, TrainingReport)> = OnceLock::new();
    M.get_or_init(|| train(scenes(500, 48).as_slice(), &Config { layers: 2, ..Config::default() }).unwrap())
}

#[test]
fn trains_end_to_end_with_one_layer() {
    let data = scenes(100, 20);
    let (model, report) = train(data.as_slice(), &small_config(1)).unwrap();
    assert_eq!(report.images, 20);
    assert_eq!(report.layers, 1);
    assert_eq!(model.partition.regions, vec![model.partition.road_region]);
    assert_eq!(report.feature_frequency.len(), 20);
    let total: f64 = report.feature_frequency.iter().map(|(_, f)| f).sum();
    assert!((total - 1.0).abs() < 1e-9, "frequencies sum to {total}");
    assert!(report.edge_positives > 0 && report.forest_positives > 0);
}

#[test]
fn model_round_trips_through_a_file() {
    let (model, _) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = PipelineModel::load(&path).unwrap();
    assert_eq!(&back, model);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert!(matches!(PipelineModel::load(&dir.path().join("missing.bin")), Err(Error::Io { .. })));
}

#[test]
fn training_and_prediction_are_deterministic() {
    let data = scenes(300, 8);
    let cfg = small_config(2);
    let a = train(data.as_slice(), &cfg).unwrap().0.to_bytes().unwrap();
    let b = train(data.as_slice(), &cfg).unwrap().0.to_bytes().unwrap();
    assert_eq!(a, b);
    let m = PipelineModel::from_bytes(&a).unwrap();
    let img = &scenes(900, 1)[0].image;
    assert_eq!(predict(&m, img).unwrap().probability, predict(&m, img).unwrap().probability);
}

#[test]
fn identical_near_obstacles_leave_empty_layers() {
    let mut spec = SceneSpec::default();
    spec.obstacles.placements = vec![Placement { d_bottom: 30.0, across: 0.5, aspect: 1.2, contrast: 0.35 }];
    let data: Vec<_> = (0..6).map(|i| labeled(&spec.clone().with_seed(40 + i), &i.to_string())).collect();
    let (model, report) = train(data.as_slice(), &small_config(4)).unwrap();
    assert_eq!(report.layers, 4);
    assert!(!report.empty_layers.is_empty());
    assert!(report.effective_layers < 4);
    assert_eq!(report.effective_layers, model.partition.effective_layers());
    predict(&model, &data[0].image).unwrap();
}

#[test]
fn blank_road_gives_a_near_zero_map() {
    let (model, _) = fixture();
    for seed in 0..5 {
        let mut spec = SceneSpec::default().with_seed(7000 + seed);
        spec.obstacles.count = (0, 0);
        spec.obstacles.min_far_tiny = 0;
        let s = generate(&spec).unwrap();
        let p = predict(model, &s.image).unwrap().probability;
        let low = p.values.iter().filter(|&&v| v < 0.5).count();
        assert!(low as f64 >= 0.95 * p.values.len() as f64, "seed {seed}: only {low} of {} pixels below 0.5", p.values.len());
    }
}

#[test]
fn single_obstacle_holds_the_probability_peak() {
    let (model, _) = fixture();
    let mut hits = 0;
    for seed in 0..6 {
        let mut spec = SceneSpec::default().with_seed(8000 + seed);
        spec.obstacles.placements = vec![Placement { d_bottom: 45.0 + 5.0 * seed as f64, across: 0.3 + 0.08 * seed as f64, aspect: 1.3, contrast: 0.35 }];
        let s = generate(&spec).unwrap();
        let p = predict(model, &s.image).unwrap().probability;
        let (arg, _) = p.values.iter().enumerate().fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (x, y) = ((arg % p.width) as i32, (arg / p.width) as i32);
        if s.boxes[0].contains_point(x, y) {
            hits += 1;
        }
    }
    assert!(hits >= 5, "peak inside the box in {hits} of 6 scenes");
}

#[test]
fn resuming_from_occlusion_maps_reproduces_the_prediction() {
    let (model, _) = fixture();
    let img = &scenes(901, 1)[0].image;
    let full = predict(model, img).unwrap();
    let resumed = predict_from_occlusion(model, img, full.occlusion.clone(), full.partition.clone(), Vec::new()).unwrap();
    assert_eq!(resumed.ranked, full.ranked);
    assert_eq!(resumed.probability, full.probability);
}

#[test]
fn evaluation_matches_direct_metric_calls() {
    let (model, _) = fixture();
    let data = scenes(950, 4);
    let budgets = [10, 100, 1000];
    let taus = ar_thresholds();
    let totals = evaluate(model, data.as_slice(), &budgets, &taus).unwrap();

    let mut manual = EvaluationTotals::new(&budgets, &taus);
    let mut roc = tinyobs::eval::RocCounts::default();
    for s in &data {
        let pred = predict(model, &s.image).unwrap();
        manual.add(&evaluate_prediction(&pred, s, &budgets, &taus, 1000).unwrap()).unwrap();
        roc.add(&pixel_counts(&pred.probability, &s.mask, &pred.partition.road_region).unwrap());
        let single = pixel_roc(&pred.probability, &s.mask, &pred.partition.road_region).unwrap();
        assert_eq!(single, RocCurve::from_counts(&pixel_counts(&pred.probability, &s.mask, &pred.partition.road_region).unwrap()));
    }
    assert_eq!(totals, manual);
    assert_eq!(totals.roc, roc);
    assert_eq!(totals.images, 4);
}

#[test]
fn ground_truth_map_scores_perfect_auc() {
    let data = scenes(960, 3);
    let mut counts = tinyobs::eval::RocCounts::default();
    for s in &data {
        let (w, h) = (s.mask.width(), s.mask.height());
        let mut p = ProbabilityMap::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                if s.mask.get(x, y) == label::OBSTACLE {
                    p.values[y * w + x] = 1.0;
                }
            }
        }
        counts.add(&pixel_counts(&p, &s.mask, &BBox::new(0, 0, w as i32, h as i32)).unwrap());
    }
    let roc = RocCurve::from_counts(&counts);
    assert_eq!(roc.auc, Some(1.0));
    assert_eq!(roc.tpr_at(0.0), Some(1.0));
}
