//! Pixel-level ROC and instance-level proposal recall.
//!
//! Both protocols accumulate integer counts per image so that dataset-level
//! numbers are ratios of summed counts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probmap::ProbabilityMap;
use crate::raster::{label, BBox, Mask};

pub const ROC_THRESHOLDS: usize = 100;

/// Bin centers `0.005, 0.015, ..., 0.995`.
pub fn roc_thresholds() -> Vec<f64> {
    (0..ROC_THRESHOLDS).map(|i| (i as f64 + 0.5) / ROC_THRESHOLDS as f64).collect()
}

/// Confusion counts per threshold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RocCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub gt_obstacle: u64,
    pub gt_road: u64,
}

impl Default for RocCounts {
    fn default() -> Self {
        Self {
            tp: vec![0; ROC_THRESHOLDS],
            fp: vec![0; ROC_THRESHOLDS],
            gt_obstacle: 0,
            gt_road: 0,
        }
    }
}

impl RocCounts {
    pub fn add(&mut self, other: &RocCounts) {
        for i in 0..ROC_THRESHOLDS {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
        }
        self.gt_obstacle += other.gt_obstacle;
        self.gt_road += other.gt_road;
    }
}

/// Counts for one image. Only obstacle and road pixels inside `road_region`
/// are evaluated; non-road and ignore pixels are skipped.
pub fn pixel_counts(p: &ProbabilityMap, gt: &Mask, road_region: &BBox) -> Result<RocCounts> {
    if p.width != gt.width() || p.height != gt.height() {
        return Err(Error::contract(format!(
            "probability map {}x{} vs mask {}x{}",
            p.width,
            p.height,
            gt.width(),
            gt.height()
        )));
    }
    let t = roc_thresholds();
    let mut c = RocCounts::default();
    // histogram over threshold bins: a value v is predicted positive for
    // thresholds t_i < v, i.e. for the first `above(v)` thresholds
    let mut pos = vec![0u64; ROC_THRESHOLDS + 1];
    let mut neg = vec![0u64; ROC_THRESHOLDS + 1];
    for y in 0..p.height {
        for x in 0..p.width {
            if !road_region.contains_point(x as i32, y as i32) {
                continue;
            }
            let above = t.partition_point(|&ti| ti < p.get(x, y));
            match gt.get(x, y) {
                label::OBSTACLE => {
                    c.gt_obstacle += 1;
                    pos[above] += 1;
                }
                label::ROAD => {
                    c.gt_road += 1;
                    neg[above] += 1;
                }
                _ => {}
            }
        }
    }
    // tp[i] = number of positives with above > i
    let (mut acc_p, mut acc_n) = (0, 0);
    for i in (0..ROC_THRESHOLDS).rev() {
        acc_p += pos[i + 1];
        acc_n += neg[i + 1];
        c.tp[i] = acc_p;
        c.fp[i] = acc_n;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    /// `None` when there are no obstacle (or road) pixels.
    pub tpr: Vec<Option<f64>>,
    pub fpr: Vec<Option<f64>>,
    pub auc: Option<f64>,
}

impl RocCurve {
    pub fn from_counts(c: &RocCounts) -> Self {
        let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
        let tpr: Vec<_> = c.tp.iter().map(|&v| ratio(v, c.gt_obstacle)).collect();
        let fpr: Vec<_> = c.fp.iter().map(|&v| ratio(v, c.gt_road)).collect();
        let mut curve = Self { thresholds: roc_thresholds(), tpr, fpr, auc: None };
        curve.auc = curve.points().map(|pts| {
            pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
        });
        curve
    }

    /// `(fpr, tpr)` points sorted by FPR then TPR, with `(0,0)` and `(1,1)`
    /// appended.
    pub fn points(&self) -> Option<Vec<(f64, f64)>> {
        let mut pts = vec![(0.0, 0.0), (1.0, 1.0)];
        for (f, t) in self.fpr.iter().zip(&self.tpr) {
            pts.push(((*f)?, (*t)?));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Some(pts)
    }

    /// TPR linearly interpolated at the given FPR.
    pub fn tpr_at(&self, fpr: f64) -> Option<f64> {
        let pts = self.points()?;
        let mut best: f64 = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.0 <= fpr {
                best = best.max(b.1);
            } else if a.0 <= fpr {
                let t = if b.0 > a.0 { (fpr - a.0) / (b.0 - a.0) } else { 0.0 };
                best = best.max(a.1 + t * (b.1 - a.1));
            }
        }
        Some(best)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for i in 0..self.thresholds.len() {
            let _ = writeln!(s, "{:.3},{},{}", self.thresholds[i], fmt(self.fpr[i]), fmt(self.tpr[i]));
        }
        s
    }
}

pub fn pixel_roc(p: &ProbabilityMap, gt: &Mask, road_region: &BBox) -> Result<RocCurve> {
    Ok(RocCurve::from_counts(&pixel_counts(p, gt, road_region)?))
}

/// IoU thresholds `0.5, 0.55, ..., 1.0`.
pub fn ar_thresholds() -> Vec<f64> {
    (0..=10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Number of ground-truth boxes recalled per (budget, IoU threshold).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCounts {
    pub budgets: Vec<usize>,
    pub taus: Vec<f64>,
    pub recalled: Vec<Vec<u64>>,
    pub total: u64,
}

impl RecallCounts {
    pub fn new(budgets: &[usize], taus: &[f64]) -> Self {
        Self {
            budgets: budgets.to_vec(),
            taus: taus.to_vec(),
            recalled: vec![vec![0; taus.len()]; budgets.len()],
            total: 0,
        }
    }

    pub fn add(&mut self, other: &RecallCounts) -> Result<()> {
        if self.budgets != other.budgets || self.taus != other.taus {
            return Err(Error::contract("recall grids differ"));
        }
        for (a, b) in self.recalled.iter_mut().zip(&other.recalled) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.total += other.total;
        Ok(())
    }

    pub fn report(&self) -> RecallReport {
        let recall: Vec<Vec<f64>> = self
            .recalled
            .iter()
            .map(|row| row.iter().map(|&r| if self.total == 0 { 0.0 } else { r as f64 / self.total as f64 }).collect())
            .collect();
        RecallReport {
            budgets: self.budgets.clone(),
            taus: self.taus.clone(),
            recall,
        }
    }
}

/// Max IoU between `g` and any of the first `n` proposals, for every budget.
fn best_iou_by_budget(ranked: &[BBox], g: &BBox, budgets: &[usize]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    order.sort_by_key(|&i| budgets[i]);
    let mut out = vec![0.0; budgets.len()];
    let (mut best, mut k) = (0.0f64, 0usize);
    for i in order {
        while k < budgets[i].min(ranked.len()) {
            best = best.max(ranked[k].iou(g));
            k += 1;
        }
        out[i] = best;
    }
    out
}

/// Counts for one image; `ranked` is in descending score order.
pub fn instance_recall(ranked: &[BBox], gt: &[BBox], budgets: &[usize], taus: &[f64]) -> RecallCounts {
    let mut c = RecallCounts::new(budgets, taus);
    c.total = gt.len() as u64;
    for g in gt {
        for (bi, best) in best_iou_by_budget(ranked, g, budgets).into_iter().enumerate() {
            for (ti, &tau) in taus.iter().enumerate() {
                if best >= tau - 1e-12 {
                    c.recalled[bi][ti] += 1;
                }
            }
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub budgets: Vec<usize>,
    pub taus: Vec<f64>,
    /// `recall[budget][tau]`.
    pub recall: Vec<Vec<f64>>,
}

impl RecallReport {
    pub fn at(&self, budget: usize, tau: f64) -> Option<f64> {
        let b = self.budgets.iter().position(|&n| n == budget)?;
        let t = self.taus.iter().position(|&v| (v - tau).abs() < 1e-9)?;
        Some(self.recall[b][t])
    }

    /// Mean recall over the IoU grid at one budget.
    pub fn average_recall(&self, budget: usize) -> Option<f64> {
        let b = self.budgets.iter().position(|&n| n == budget)?;
        Some(self.recall[b].iter().sum::<f64>() / self.taus.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("budget,iou,recall\n");
        for (b, row) in self.budgets.iter().zip(&self.recall) {
            for (t, r) in self.taus.iter().zip(row) {
                let _ = writeln!(s, "{b},{t:.2},{r:.6}");
            }
        }
        s
    }
}

/// Headline numbers written as JSON by the evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc: Option<f64>,
    pub tpr_at_fpr: Vec<TprAt>,
    /// Top-1000 recall per IoU threshold.
    pub recall_at_1000: Vec<RecallAt>,
    pub average_recall: Vec<ArAt>,
    pub images: usize,
    pub gt_boxes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprAt {
    pub fpr: f64,
    pub tpr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub iou: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArAt {
    pub budget: usize,
    pub average_recall: f64,
}

pub const SUMMARY_FPRS: [f64; 4] = [0.005, 0.01, 0.015, 0.02];
pub const SUMMARY_TAUS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];
pub const SUMMARY_BUDGETS: [usize; 3] = [10, 100, 1000];

/// Default recall grid: summary budgets plus a log-spaced sweep.
pub fn default_budgets() -> Vec<usize> {
    vec![1, 3, 5, 10, 30, 50, 100, 300, 500, 1000]
}

pub fn summarize(roc: &RocCurve, recall: &RecallReport, images: usize, gt_boxes: u64) -> Summary {
    Summary {
        auc: roc.auc,
        tpr_at_fpr: SUMMARY_FPRS.iter().map(|&fpr| TprAt { fpr, tpr: roc.tpr_at(fpr) }).collect(),
        recall_at_1000: SUMMARY_TAUS
            .iter()
            .filter_map(|&iou| recall.at(1000, iou).map(|recall| RecallAt { iou, recall }))
            .collect(),
        average_recall: SUMMARY_BUDGETS
            .iter()
            .filter_map(|&budget| recall.average_recall(budget).map(|average_recall| ArAt { budget, average_recall }))
            .collect(),
        images,
        gt_boxes,
    }
}
