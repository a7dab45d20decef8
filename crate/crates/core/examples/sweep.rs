//! Trains and evaluates K = 1..4 on synthetic scenes and prints headline
//! metrics. Usage: `sweep [train_scenes] [eval_scenes] [seed_offset] [key=value ...]`.

use std::time::Instant;

use tinyobs::config::Config;
use tinyobs::eval::{ar_thresholds, RocCurve};
use tinyobs::pipeline::{evaluate, median, train, LabeledImage};
use tinyobs::synth::{generate, SceneSpec};

fn scenes(start: u64, n: usize) -> Vec<LabeledImage> {
    (0..n as u64)
        .map(|i| {
            let s = generate(&SceneSpec::default().with_seed(start + i)).unwrap();
            LabeledImage { id: format!("{}", start + i), image: s.image, mask: s.mask, boxes: s.boxes }
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let n_eval: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let offset: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut base = Config::default();
    for kv in args.iter().skip(4) {
        let (k, v) = kv.split_once('=').unwrap();
        base.set(k, v).unwrap();
    }
    let train_set = scenes(offset + 10_000, n_train);
    let eval_set = scenes(offset + 20_000, n_eval);
    let budgets = [1000];
    let taus = ar_thresholds();
    for k in 1..=4 {
        let cfg = Config { layers: k, ..base.clone() };
        let t0 = Instant::now();
        let (model, report) = train(train_set.as_slice(), &cfg).unwrap();
        let t1 = Instant::now();
        let tot = evaluate(&model, eval_set.as_slice(), &budgets, &taus).unwrap();
        let t2 = Instant::now();
        let roc = RocCurve::from_counts(&tot.roc);
        let r = tot.recall.report();
        let rf = tot.recall_first_layer.report();
        let ru = tot.recall_union.report();
        println!(
            "K={k} train {:.1}s eval {:.1}s | recall@.5 {:.3} @.7 {:.3} | B1 {:.3} Bf {:.3} | AUC {:.3} | med obst {:.3} road {:.3} | regions {:?} edges {}/{} forest {}/{}",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            r.at(1000, 0.5).unwrap(),
            r.at(1000, 0.7).unwrap(),
            rf.at(1000, 0.5).unwrap(),
            ru.at(1000, 0.5).unwrap(),
            roc.auc.unwrap_or(f64::NAN),
            median(&tot.obstacle_scores).unwrap_or(f64::NAN),
            median(&tot.road_scores).unwrap_or(f64::NAN),
            report.regions,
            report.edge_positives,
            report.edge_samples,
            report.forest_positives,
            report.forest_samples,
        );
        let pts = roc.points().unwrap();
        let last = pts.iter().rev().find(|p| p.0 < 1.0).copied().unwrap_or((0.0, 0.0));
        println!(
            "    tpr@fpr .01 {:.3} .05 {:.3} .1 {:.3} .2 {:.3} | lowest-threshold point fpr {:.3} tpr {:.3}",
            roc.tpr_at(0.01).unwrap(), roc.tpr_at(0.05).unwrap(), roc.tpr_at(0.1).unwrap(), roc.tpr_at(0.2).unwrap(), last.0, last.1
        );
    }
}

