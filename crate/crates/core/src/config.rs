//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown keys are
//! rejected; missing keys keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::layering::KMeansParams;
use crate::proposals::ProposalParams;
use crate::raster::BBox;
use crate::superpixel::SuperpixelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub layers: usize,
    pub layer_margin: i32,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub edge_detector: String,
    pub superpixel: SuperpixelParams,
    pub ridge_gamma: f64,
    /// Negative training edges kept per positive edge; 0 keeps all.
    pub ridge_negative_ratio: f64,
    pub label_rho: f64,
    pub label_distance: f64,
    pub proposal_sources: Vec<String>,
    pub proposals: ProposalParams,
    pub road_min_inside: f64,
    pub forest: ForestParams,
    /// Cap on forest training samples drawn from one image.
    pub forest_samples_per_image: usize,
    /// Samples at or above this overlap are always kept under the cap.
    pub forest_positive_iou: f64,
    pub prob_normalizer: String,
    pub eval_top_n: usize,
    /// Fixed road rectangle; derived from training masks when absent.
    pub road_region: Option<BBox>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 1,
            layer_margin: 10,
            kmeans_restarts: 8,
            kmeans_max_iter: 100,
            edge_detector: "sobel2".into(),
            superpixel: SuperpixelParams::default(),
            ridge_gamma: 1.0,
            ridge_negative_ratio: 2.0,
            label_rho: 0.5,
            label_distance: 2.0,
            proposal_sources: vec!["sliding".into(), "components".into()],
            proposals: ProposalParams::default(),
            road_min_inside: 0.8,
            forest: ForestParams::default(),
            forest_samples_per_image: 400,
            forest_positive_iou: 0.3,
            prob_normalizer: "coverage-mean".into(),
            eval_top_n: 1000,
            road_region: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Data(format!("config key `{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn kmeans(&self) -> KMeansParams {
        KMeansParams {
            max_iter: self.kmeans_max_iter,
            restarts: self.kmeans_restarts,
            ..KMeansParams::default()
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let sp = &mut self.superpixel;
        let pp = &mut self.proposals;
        let fp = &mut self.forest;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "layer_margin" => self.layer_margin = parse(key, v)?,
            "kmeans_restarts" => self.kmeans_restarts = parse(key, v)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse(key, v)?,
            "edge_detector" => self.edge_detector = v.to_string(),
            "superpixel_cell_area" => sp.cell_area = parse(key, v)?,
            "superpixel_min" => sp.min_count = parse(key, v)?,
            "superpixel_max" => sp.max_count = parse(key, v)?,
            "superpixel_edge_weight" => sp.edge_weight = parse(key, v)?,
            "superpixel_compactness" => sp.compactness = parse(key, v)?,
            "superpixel_refine_iterations" => sp.refine_iterations = parse(key, v)?,
            "ridge_gamma" => self.ridge_gamma = parse(key, v)?,
            "ridge_negative_ratio" => self.ridge_negative_ratio = parse(key, v)?,
            "label_rho" => self.label_rho = parse(key, v)?,
            "label_distance" => self.label_distance = parse(key, v)?,
            "proposal_sources" => self.proposal_sources = v.split(',').map(|s| s.trim().to_string()).collect(),
            "proposal_budget" => pp.budget = parse(key, v)?,
            "proposal_nms_iou" => pp.nms_iou = parse(key, v)?,
            "proposal_kappa" => pp.kappa = parse(key, v)?,
            "proposal_eta" => pp.eta = parse(key, v)?,
            "proposal_group_min" => pp.group_min = parse(key, v)?,
            "proposal_component_threshold" => pp.component_threshold = parse(key, v)?,
            "proposal_scales" => pp.scales = parse_list(key, v)?,
            "proposal_aspects" => pp.aspects = parse_list(key, v)?,
            "proposal_stride" => pp.stride = parse(key, v)?,
            "proposal_dilations" => pp.dilations = parse_list(key, v)?,
            "road_min_inside" => self.road_min_inside = parse(key, v)?,
            "forest_trees" => fp.trees = parse(key, v)?,
            "forest_max_depth" => fp.max_depth = parse(key, v)?,
            "forest_min_leaf" => fp.min_leaf = parse(key, v)?,
            "forest_m_try" => fp.m_try = parse(key, v)?,
            "forest_max_thresholds" => fp.max_thresholds = parse(key, v)?,
            "forest_samples_per_image" => self.forest_samples_per_image = parse(key, v)?,
            "forest_positive_iou" => self.forest_positive_iou = parse(key, v)?,
            "prob_normalizer" => self.prob_normalizer = v.to_string(),
            "eval_top_n" => self.eval_top_n = parse(key, v)?,
            "road_region" => {
                self.road_region = if v == "auto" {
                    None
                } else {
                    let p: Vec<i32> = parse_list(key, v)?;
                    if p.len() != 4 {
                        return Err(Error::Data("road_region needs x,y,w,h".into()));
                    }
                    Some(BBox::new(p[0], p[1], p[2], p[3]))
                }
            }
            _ => return Err(Error::Data(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("config line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Data(format!("invalid config: {m}")));
        if !(1..=16).contains(&self.layers) {
            return bad("layers must be in 1..=16");
        }
        if !(self.ridge_gamma > 0.0) {
            return bad("ridge_gamma must be positive");
        }
        if !(self.ridge_negative_ratio >= 0.0) || !self.ridge_negative_ratio.is_finite() {
            return bad("ridge_negative_ratio must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.label_rho) || !(0.0..=1.0).contains(&self.road_min_inside) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.proposals.budget == 0 || self.eval_top_n == 0 {
            return bad("budgets must be positive");
        }
        if self.forest.trees == 0 || self.forest.min_leaf == 0 || self.forest.m_try == 0 {
            return bad("forest_trees, forest_min_leaf and forest_m_try must be positive");
        }
        if self.superpixel.cell_area == 0 || self.superpixel.min_count == 0 || self.superpixel.min_count > self.superpixel.max_count {
            return bad("superpixel counts out of range");
        }
        if self.proposal_sources.is_empty() {
            return bad("proposal_sources is empty");
        }
        Ok(())
    }

    /// Renders every key; parsing the result yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sp = &self.superpixel;
        let pp = &self.proposals;
        let fp = &self.forest;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("layers", self.layers.to_string());
        kv("layer_margin", self.layer_margin.to_string());
        kv("kmeans_restarts", self.kmeans_restarts.to_string());
        kv("kmeans_max_iter", self.kmeans_max_iter.to_string());
        kv("edge_detector", self.edge_detector.clone());
        kv("superpixel_cell_area", sp.cell_area.to_string());
        kv("superpixel_min", sp.min_count.to_string());
        kv("superpixel_max", sp.max_count.to_string());
        kv("superpixel_edge_weight", sp.edge_weight.to_string());
        kv("superpixel_compactness", sp.compactness.to_string());
        kv("superpixel_refine_iterations", sp.refine_iterations.to_string());
        kv("ridge_gamma", self.ridge_gamma.to_string());
        kv("ridge_negative_ratio", self.ridge_negative_ratio.to_string());
        kv("label_rho", self.label_rho.to_string());
        kv("label_distance", self.label_distance.to_string());
        kv("proposal_sources", self.proposal_sources.join(","));
        kv("proposal_budget", pp.budget.to_string());
        kv("proposal_nms_iou", pp.nms_iou.to_string());
        kv("proposal_kappa", pp.kappa.to_string());
        kv("proposal_eta", pp.eta.to_string());
        kv("proposal_group_min", pp.group_min.to_string());
        kv("proposal_component_threshold", pp.component_threshold.to_string());
        kv("proposal_scales", join(&pp.scales));
        kv("proposal_aspects", join(&pp.aspects));
        kv("proposal_stride", pp.stride.to_string());
        kv("proposal_dilations", join(&pp.dilations));
        kv("road_min_inside", self.road_min_inside.to_string());
        kv("forest_trees", fp.trees.to_string());
        kv("forest_max_depth", fp.max_depth.to_string());
        kv("forest_min_leaf", fp.min_leaf.to_string());
        kv("forest_m_try", fp.m_try.to_string());
        kv("forest_max_thresholds", fp.max_thresholds.to_string());
        kv("forest_samples_per_image", self.forest_samples_per_image.to_string());
        kv("forest_positive_iou", self.forest_positive_iou.to_string());
        kv("prob_normalizer", self.prob_normalizer.clone());
        kv("eval_top_n", self.eval_top_n.to_string());
        kv(
            "road_region",
            self.road_region.map_or("auto".into(), |b| format!("{},{},{},{}", b.x, b.y, b.w, b.h)),
        );
        s
    }
}

/// Per-stage seeds derived from the single config seed.
pub mod seeds {
    pub fn kmeans(seed: u64) -> u64 {
        seed.wrapping_add(1)
    }
    pub fn forest(seed: u64) -> u64 {
        seed.wrapping_add(2)
    }
    pub fn sampling(seed: u64, image: usize) -> u64 {
        seed.wrapping_add(3).wrapping_add((image as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
    pub fn ridge(seed: u64) -> u64 {
        seed.wrapping_add(4)
    }
    pub fn superpixel(seed: u64, layer: usize) -> u64 {
        seed.wrapping_add(1000).wrapping_add(layer as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = Config::parse_str("# comment\nlayers = 3\n\nroad_region = 0,100,320,140\nproposal_scales=8,16\n").unwrap();
        assert_eq!(c.layers, 3);
        assert_eq!(c.road_region, Some(BBox::new(0, 100, 320, 140)));
        assert_eq!(c.proposals.scales, vec![8, 16]);
        assert_eq!(c.forest.trees, 100);
        assert_eq!(Config::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Config::parse_str("colour = red").is_err());
        assert!(Config::parse_str("layers = many").is_err());
        assert!(Config::parse_str("layers = 0").is_err());
        assert!(Config::parse_str("ridge_gamma = 0").is_err());
        assert!(Config::parse_str("just text").is_err());
    }
}
