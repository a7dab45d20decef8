//! Random regression forest predicting a proposal's overlap with ground truth.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub m_try: usize,
    /// Upper bound on split thresholds considered per feature.
    pub max_thresholds: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 12,
            min_leaf: 5,
            m_try: 4,
            max_thresholds: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { mean: f64, count: usize },
}

/// Nodes stored in preorder; index 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Follows `x[feature] <= threshold` to the left until a leaf.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { mean, .. } => return *mean,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub schema_version: u32,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::contract(format!("forest expects {} features, got {}", self.n_features, x.len())));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    pub fn check_schema(&self, version: u32, n_features: usize) -> Result<()> {
        if self.schema_version != version || self.n_features != n_features {
            return Err(Error::contract(format!(
                "forest trained on schema v{} with {} features, expected v{} with {}",
                self.schema_version, self.n_features, version, n_features
            )));
        }
        Ok(())
    }

    /// Checks the structural invariants of every tree.
    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::contract("forest has no trees"));
        }
        for t in &self.trees {
            if t.nodes.is_empty() {
                return Err(Error::contract("empty tree"));
            }
            for n in &t.nodes {
                match n {
                    Node::Split { feature, threshold, left, right } => {
                        if *feature >= self.n_features || !threshold.is_finite() || *left >= t.nodes.len() || *right >= t.nodes.len() {
                            return Err(Error::contract("malformed split node"));
                        }
                    }
                    Node::Leaf { mean, .. } => {
                        if !(0.0..=1.0).contains(mean) {
                            return Err(Error::contract("leaf mean outside [0, 1]"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Candidate thresholds per feature: midpoints between sorted unique values,
/// thinned to at most `max` at evenly spaced quantiles.
fn thresholds(values: &mut Vec<f64>, max: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mids: Vec<f64> = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    if mids.len() <= max {
        return mids;
    }
    let mut out: Vec<f64> = (0..max).map(|i| mids[(i * 2 + 1) * mids.len() / (2 * max)]).collect();
    out.dedup();
    out
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    cuts: &'a [Vec<f64>],
    params: &'a ForestParams,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf { mean, count: idx.len() });
        self.nodes.len() - 1
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let sq: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let sse = sq - sum * sum / n as f64;
        let min_leaf = self.params.min_leaf.max(1);
        if depth >= self.params.max_depth || n < 2 * min_leaf || sse <= 1e-12 {
            return self.leaf(idx);
        }

        let d = self.cuts.len();
        let tried = sample(rng, d, self.params.m_try.clamp(1, d));
        let mut best: Option<(f64, usize, f64)> = None;
        for f in tried.iter() {
            let cuts = &self.cuts[f];
            if cuts.is_empty() {
                continue;
            }
            // bucket b holds values in (cuts[b-1], cuts[b]]
            let mut cnt = vec![0usize; cuts.len() + 1];
            let mut s = vec![0.0; cuts.len() + 1];
            for &i in idx.iter() {
                let b = cuts.partition_point(|&c| c < self.x[i][f]);
                cnt[b] += 1;
                s[b] += self.y[i];
            }
            let (mut nl, mut sl) = (0usize, 0.0);
            for b in 0..cuts.len() {
                nl += cnt[b];
                sl += s[b];
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let sr = sum - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - sum * sum / n as f64;
                if gain > 1e-12 && best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, f, cuts[b]));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return self.leaf(idx) };

        let mut k = 0;
        for j in 0..n {
            if self.x[idx[j]][feature] <= threshold {
                idx.swap(j, k);
                k += 1;
            }
        }
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { mean: 0.0, count: 0 });
        let (l, r) = idx.split_at_mut(k);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }
}

pub fn train(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64, schema_version: u32) -> Result<ForestModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::contract(format!("{} feature rows but {} targets", x.len(), y.len())));
    }
    if x.len() < params.min_leaf {
        return Err(Error::contract(format!("need at least {} samples, got {}", params.min_leaf, x.len())));
    }
    if params.trees == 0 {
        return Err(Error::contract("forest needs at least one tree"));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("targets must lie in [0, 1]"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::contract("feature rows must be non-empty, equal-length and finite"));
    }
    let cuts: Vec<Vec<f64>> = (0..d)
        .map(|f| thresholds(&mut x.iter().map(|r| r[f]).collect(), params.max_thresholds.max(1)))
        .collect();
    let m = x.len();
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..m)).collect();
            let mut b = Builder { x, y, cuts: &cuts, params, nodes: Vec::new() };
            b.grow(&mut idx, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel { schema_version, n_features: d, trees })
}

/// Share of split nodes using each feature; all zeros when there are none.
pub fn feature_frequency(model: &ForestModel) -> Vec<f64> {
    let mut counts = vec![0usize; model.n_features];
    for t in &model.trees {
        for n in &t.nodes {
            if let Node::Split { feature, .. } = n {
                counts[*feature] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .into_iter()
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(seed: u64, m: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn constant_target() {
        let (x, _) = random_data(1, 60, 20);
        let m = train(&x, &vec![0.5; 60], &ForestParams { trees: 5, ..Default::default() }, 3, 1).unwrap();
        for t in &m.trees {
            assert!(t.nodes.iter().all(|n| matches!(n, Node::Leaf { mean, .. } if *mean == 0.5)));
        }
        assert_eq!(m.predict(&x[0]).unwrap(), 0.5);
    }

    #[test]
    fn depth_zero_is_the_bootstrap_mean() {
        let (x, y) = random_data(2, 40, 20);
        let params = ForestParams { trees: 1, max_depth: 0, ..Default::default() };
        let m = train(&x, &y, &params, 5, 1).unwrap();
        assert_eq!(m.trees[0].nodes.len(), 1);
        let Node::Leaf { mean, count } = m.trees[0].nodes[0] else { panic!() };
        assert_eq!(count, 40);
        for r in &x {
            assert_eq!(m.predict(r).unwrap(), mean);
        }
        assert!(feature_frequency(&m).iter().all(|&f| f == 0.0));
    }

    #[test]
    fn two_tree_average() {
        let leaf = |v| Tree { nodes: vec![Node::Leaf { mean: v, count: 5 }] };
        let m = ForestModel { schema_version: 1, n_features: 2, trees: vec![leaf(0.2), leaf(0.6)] };
        assert!((m.predict(&[0.0, 0.0]).unwrap() - 0.4).abs() < 1e-15);
        assert!(m.predict(&[0.0]).is_err());
    }

    #[test]
    fn single_split_frequency() {
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 8, threshold: 0.0, left: 1, right: 2 },
                Node::Leaf { mean: 0.1, count: 5 },
                Node::Leaf { mean: 0.9, count: 5 },
            ],
        };
        let m = ForestModel { schema_version: 1, n_features: 20, trees: vec![t] };
        let f = feature_frequency(&m);
        assert_eq!(f[8], 1.0);
        assert_eq!(f.iter().sum::<f64>(), 1.0);
        assert_eq!(m.predict(&[0.5; 20]).unwrap(), 0.9);
    }

    #[test]
    fn learns_a_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| (r[0] >= 0.0) as u8 as f64).collect();
        let params = ForestParams { trees: 25, m_try: 1, ..Default::default() };
        let m = train(&x, &y, &params, 11, 1).unwrap();
        let grid: Vec<f64> = (0..200).map(|i| -1.0 + i as f64 / 100.0).filter(|v: &f64| v.abs() > 0.1).collect();
        let err: f64 = grid
            .iter()
            .map(|&v| (m.predict(&[v]).unwrap() - (v >= 0.0) as u8 as f64).abs())
            .sum::<f64>()
            / grid.len() as f64;
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn signal_feature_dominates_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<Vec<f64>> = (0..600).map(|_| (0..20).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| (r[8] * r[8]).clamp(0.0, 1.0)).collect();
        let m = train(&x, &y, &ForestParams { trees: 30, ..Default::default() }, 2, 1).unwrap();
        let f = feature_frequency(&m);
        let top = (0..20).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        assert_eq!(top, 8, "{f:?}");
    }

    #[test]
    fn deterministic_and_valid() {
        let (x, y) = random_data(8, 150, 20);
        let p = ForestParams { trees: 8, ..Default::default() };
        let a = train(&x, &y, &p, 42, 1).unwrap();
        let b = train(&x, &y, &p, 42, 1).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        for t in &a.trees {
            for n in &t.nodes {
                if let Node::Leaf { count, .. } = n {
                    assert!(*count >= p.min_leaf);
                }
            }
        }
        let json = a.to_json().unwrap();
        let back: ForestModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.predict(&x[3]).unwrap(), a.predict(&x[3]).unwrap());
    }

    #[test]
    fn rejects_bad_training_data() {
        assert!(train(&[], &[], &ForestParams::default(), 0, 1).is_err());
        let (x, mut y) = random_data(1, 20, 3);
        y[0] = 1.5;
        assert!(train(&x, &y, &ForestParams::default(), 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn prediction_is_tree_average_within_label_range(seed in 0u64..300, probe in proptest::collection::vec(-2.0f64..2.0, 5)) {
            let (x, y) = random_data(seed, 60, 5);
            let m = train(&x, &y, &ForestParams { trees: 6, max_depth: 5, m_try: 2, ..Default::default() }, seed, 1).unwrap();
            let p = m.predict(&probe).unwrap();
            // independent traversal
            let mut total = 0.0;
            for t in &m.trees {
                let mut node = &t.nodes[0];
                while let Node::Split { feature, threshold, left, right } = node {
                    node = &t.nodes[if probe[*feature] <= *threshold { *left } else { *right }];
                }
                let Node::Leaf { mean, .. } = node else { unreachable!() };
                total += mean;
            }
            prop_assert!((p - total / m.trees.len() as f64).abs() <= 1e-12);
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}
