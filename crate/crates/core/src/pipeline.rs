//! End-to-end training, prediction and evaluation.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{seeds, Config};
use crate::edge::{fuse_far_to_near, EdgeDetector, EdgeMap};
use crate::error::{Error, Result, StageExt};
use crate::eval::{instance_recall, pixel_counts, RecallCounts, RocCounts};
use crate::features::{features_for, ColorIntegrals, FEATURE_SCHEMA_VERSION, PROPOSAL_FEATURES};
use crate::forest::{self, ForestModel};
use crate::layering::{cluster_obstacles, derive_layers, pseudo_distance, LayerPartition};
use crate::occlusion::{self, edge_features_all, EdgeContext, EdgeFeature, OcclusionEdgeMap, RidgeModel, EDGE_FEATURES};
use crate::probmap::{accumulate, ProbNormalizer, ProbabilityMap};
use crate::proposals::{self, filter_road, CandidateSource, Proposal};
use crate::raster::{label, BBox, Mask, Raster};
use crate::registry;
use crate::superpixel::{atomic_edges, segment, AtomicEdge, SuperpixelLabels};

pub const MODEL_MAGIC: &[u8; 8] = b"TINYOBS\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Everything needed to run inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub format_version: u32,
    pub feature_schema_version: u32,
    pub edge_feature_count: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub partition: LayerPartition,
    /// Training obstacles per layer, nearest first.
    pub layer_sizes: Vec<usize>,
    pub ridge: RidgeModel,
    pub forest: ForestModel,
    /// Config the model was trained with, as `key = value` text.
    pub config: String,
}

impl PipelineModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, self).map_err(|e| Error::Internal(e.to_string()))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Data("not a model file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema { expected: MODEL_FORMAT_VERSION, found: version });
        }
        let m: Self = bincode::deserialize(&bytes[12..]).map_err(|e| Error::Data(format!("corrupt model: {e}")))?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Verifies that the model matches this build's feature schemas.
    pub fn check(&self) -> Result<()> {
        if self.feature_schema_version != FEATURE_SCHEMA_VERSION {
            return Err(Error::Schema { expected: FEATURE_SCHEMA_VERSION, found: self.feature_schema_version });
        }
        if self.edge_feature_count != EDGE_FEATURES || self.ridge.dim() != EDGE_FEATURES {
            return Err(Error::contract("occlusion classifier does not match the edge feature schema"));
        }
        self.forest.check_schema(FEATURE_SCHEMA_VERSION, PROPOSAL_FEATURES)?;
        self.forest.validate()?;
        self.ridge.validate()
    }

    pub fn config(&self) -> Result<Config> {
        Config::parse_str(&self.config)
    }

    /// Layer partition scaled to an image of a different size.
    pub fn partition_for(&self, width: usize, height: usize) -> LayerPartition {
        if (width, height) == (self.image_width, self.image_height) {
            return self.partition.clone();
        }
        log::warn!(
            "image is {width}x{height} but the model was trained on {}x{}; rescaling layers",
            self.image_width,
            self.image_height
        );
        let sx = width as f64 / self.image_width as f64;
        let sy = height as f64 / self.image_height as f64;
        let scale = |b: &BBox| {
            let x0 = (b.x as f64 * sx).floor() as i32;
            let y0 = (b.y as f64 * sy).floor() as i32;
            let x1 = (b.right() as f64 * sx).ceil() as i32;
            let y1 = (b.bottom() as f64 * sy).ceil() as i32;
            BBox::from_corners(x0, y0, x1.min(width as i32), y1.min(height as i32))
        };
        LayerPartition {
            road_region: scale(&self.partition.road_region),
            regions: self.partition.regions.iter().map(scale).collect(),
            empty_layers: self.partition.empty_layers.clone(),
        }
    }
}

/// Strategy objects selected by name in the config.
pub struct Strategies {
    pub detector: Box<dyn EdgeDetector>,
    pub sources: Vec<Box<dyn CandidateSource>>,
    pub normalizer: Box<dyn ProbNormalizer>,
}

impl Strategies {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            detector: registry::edge_detectors().get(&cfg.edge_detector)?,
            sources: cfg
                .proposal_sources
                .iter()
                .map(|n| registry::candidate_sources().get(n))
                .collect::<Result<_>>()?,
            normalizer: registry::prob_normalizers().get(&cfg.prob_normalizer)?,
        })
    }

    fn source_refs(&self) -> Vec<&dyn CandidateSource> {
        self.sources.iter().map(|s| s.as_ref()).collect()
    }
}

/// Per-layer intermediate results.
#[derive(Clone, Debug)]
pub struct LayerAnalysis {
    pub edges: EdgeMap,
    pub enhanced: EdgeMap,
    pub superpixels: SuperpixelLabels,
    pub atomic: Vec<AtomicEdge>,
    pub edge_features: Vec<EdgeFeature>,
}

/// Edge detection, fusion, superpixels and edge featurization for every layer.
pub fn analyze_layers(img: &Raster, partition: &LayerPartition, cfg: &Config, strat: &Strategies) -> Result<Vec<LayerAnalysis>> {
    let edges: Vec<EdgeMap> = partition
        .regions
        .par_iter()
        .map(|r| strat.detector.detect(img, *r))
        .collect::<Result<_>>()
        .stage("edge")?;
    let fused = fuse_far_to_near(&edges, partition).stage("edge")?;
    edges
        .into_par_iter()
        .zip(fused.enhanced.into_par_iter())
        .enumerate()
        .map(|(k, (e, enhanced))| {
            let target = cfg.superpixel.target_count(&enhanced.region);
            let sp = segment(img, &enhanced, target, seeds::superpixel(cfg.seed, k), &cfg.superpixel).stage("superpixel")?;
            let atomic = atomic_edges(&sp, k);
            let ctx = EdgeContext::new(img, &enhanced, &sp, partition).stage("occlusion")?;
            let feats = edge_features_all(&atomic, &ctx);
            Ok(LayerAnalysis { edges: e, enhanced, superpixels: sp, atomic, edge_features: feats })
        })
        .collect()
}

pub fn occlusion_maps(layers: &[LayerAnalysis], ridge: &RidgeModel) -> Result<Vec<OcclusionEdgeMap>> {
    layers
        .iter()
        .map(|l| occlusion::classify(&l.atomic, &l.edge_features, ridge, l.enhanced.region))
        .collect::<Result<_>>()
        .stage("occlusion")
}

/// `B_k` for every layer.
pub fn layer_proposals(occ: &[OcclusionEdgeMap], cfg: &Config, strat: &Strategies) -> Result<Vec<Vec<Proposal>>> {
    let sources = strat.source_refs();
    occ.par_iter()
        .enumerate()
        .map(|(k, m)| proposals::extract(m, k, &sources, &cfg.proposals))
        .collect::<Result<_>>()
        .stage("proposals")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub proposal: Proposal,
    pub score: f64,
}

/// Descending forest score, then objectness, then box.
pub fn rank(scored: &mut [ScoredProposal]) {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.proposal.objectness.total_cmp(&a.proposal.objectness))
            .then(a.proposal.bbox.cmp(&b.proposal.bbox))
            .then(a.proposal.layer.cmp(&b.proposal.layer))
    });
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub partition: LayerPartition,
    pub layers: Vec<LayerAnalysis>,
    pub occlusion: Vec<OcclusionEdgeMap>,
    /// `B_1..B_K`.
    pub layer_proposals: Vec<Vec<Proposal>>,
    /// Road proposals with forest scores, ranked.
    pub ranked: Vec<ScoredProposal>,
    pub probability: ProbabilityMap,
}

impl Prediction {
    /// `B^f`: the concatenation of all layer lists.
    pub fn merged(&self) -> Vec<Proposal> {
        proposals::merge(self.layer_proposals.clone())
    }
}

pub fn score_proposals(model: &PipelineModel, img: &Raster, occ: &[OcclusionEdgeMap], props: &[Proposal]) -> Result<Vec<ScoredProposal>> {
    let color = ColorIntegrals::new(&img.to_hsv()).stage("features")?;
    let feats = features_for(props, &color, occ).stage("features")?;
    let rows: Vec<Vec<f64>> = feats.iter().map(|f| f.to_vec()).collect();
    let scores = model.forest.predict_many(&rows).stage("forest")?;
    let mut scored: Vec<ScoredProposal> = props
        .iter()
        .zip(scores)
        .map(|(p, s)| ScoredProposal { proposal: *p, score: s })
        .collect();
    rank(&mut scored);
    Ok(scored)
}

pub fn probability_from_scored(scored: &[ScoredProposal], width: usize, height: usize, road: &BBox, normalizer: &dyn ProbNormalizer) -> Result<ProbabilityMap> {
    let boxes: Vec<(BBox, f64)> = scored.iter().map(|s| (s.proposal.bbox, s.score)).collect();
    accumulate(&boxes, width, height, road, normalizer).stage("probmap")
}

/// Runs the pipeline from occlusion maps onward.
pub fn predict_from_occlusion(model: &PipelineModel, img: &Raster, occ: Vec<OcclusionEdgeMap>, partition: LayerPartition, layers: Vec<LayerAnalysis>) -> Result<Prediction> {
    let cfg = model.config()?;
    let strat = Strategies::from_config(&cfg)?;
    let layer_props = layer_proposals(&occ, &cfg, &strat)?;
    let road = filter_road(&proposals::merge(layer_props.clone()), &partition.road_region, None, cfg.road_min_inside);
    let ranked = score_proposals(model, img, &occ, &road)?;
    let probability = probability_from_scored(&ranked, img.width(), img.height(), &partition.road_region, strat.normalizer.as_ref())?;
    Ok(Prediction { partition, layers, occlusion: occ, layer_proposals: layer_props, ranked, probability })
}

pub fn predict(model: &PipelineModel, img: &Raster) -> Result<Prediction> {
    let cfg = model.config()?;
    let strat = Strategies::from_config(&cfg)?;
    let partition = model.partition_for(img.width(), img.height());
    let layers = analyze_layers(img, &partition, &cfg, &strat)?;
    let occ = occlusion_maps(&layers, &model.ridge)?;
    predict_from_occlusion(model, img, occ, partition, layers)
}

/// One annotated training or evaluation image.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub image: Raster,
    pub mask: Mask,
    pub boxes: Vec<BBox>,
}

/// Random access to labeled images, loaded on demand.
pub trait LabeledSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<LabeledImage>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabeledSource for [LabeledImage] {
    fn len(&self) -> usize {
        <[LabeledImage]>::len(self)
    }
    fn get(&self, i: usize) -> Result<LabeledImage> {
        Ok(self[i].clone())
    }
}

impl LabeledSource for crate::dataset::Dataset {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn get(&self, i: usize) -> Result<LabeledImage> {
        let image = self.image(i)?;
        let mask = self.mask(i)?;
        if (mask.width(), mask.height()) != (image.width(), image.height()) {
            return Err(Error::Data(format!("mask of `{}` does not match its image size", self.samples[i].id)));
        }
        Ok(LabeledImage { id: self.samples[i].id.clone(), image, mask, boxes: self.gt_boxes(i) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub images: usize,
    pub obstacles: usize,
    pub layers: usize,
    pub effective_layers: usize,
    pub empty_layers: Vec<usize>,
    pub layer_sizes: Vec<usize>,
    pub regions: Vec<BBox>,
    pub edge_samples: usize,
    pub edge_positives: usize,
    pub ridge_weights: Vec<(String, f64)>,
    pub forest_samples: usize,
    pub forest_positives: usize,
    pub feature_frequency: Vec<(String, f64)>,
}

/// Union of road and obstacle pixels over all masks.
fn road_region_from_masks(masks: &[Mask]) -> Result<BBox> {
    masks
        .iter()
        .filter_map(|m| m.bounding_box(&[label::ROAD, label::OBSTACLE]))
        .reduce(|a, b| a.union(&b))
        .ok_or_else(|| Error::Data("training masks contain no road pixels".into()))
}

/// Max IoU of `b` against any ground-truth box.
pub fn overlap(b: &BBox, gt: &[BBox]) -> f64 {
    gt.iter().map(|g| b.iou(g)).fold(0.0, f64::max)
}

/// Keeps every positive row and a seeded random `ratio` negatives per positive.
fn subsample_negatives(x: Vec<Vec<f64>>, u: Vec<f64>, ratio: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (pos, mut neg): (Vec<usize>, Vec<usize>) = (0..u.len()).partition(|&i| u[i] > 0.5);
    let room = ((pos.len() as f64 * ratio).ceil() as usize).max(x.first().map_or(0, Vec::len) + 1);
    if neg.len() <= room {
        return (x, u);
    }
    neg.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    neg.truncate(room);
    let mut keep = vec![false; u.len()];
    pos.iter().chain(&neg).for_each(|&i| keep[i] = true);
    x.into_iter().zip(u).zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).unzip()
}

pub fn train(data: &(impl LabeledSource + ?Sized), cfg: &Config) -> Result<(PipelineModel, TrainingReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let strat = Strategies::from_config(cfg)?;

    // layering from annotations and masks
    let heads: Vec<(usize, usize, Vec<BBox>, Mask)> = (0..data.len())
        .into_par_iter()
        .map(|i| data.get(i).map(|s| (s.image.width(), s.image.height(), s.boxes, s.mask)))
        .collect::<Result<_>>()?;
    let (width, height) = (heads[0].0, heads[0].1);
    if heads.iter().any(|h| (h.0, h.1) != (width, height)) {
        return Err(Error::Data("training images must share one size".into()));
    }
    let road = match cfg.road_region {
        Some(r) => r.clip(width, height).ok_or_else(|| Error::Data("road_region outside the images".into()))?,
        None => road_region_from_masks(&heads.iter().map(|h| h.3.clone()).collect::<Vec<_>>())?,
    };
    let all_boxes: Vec<BBox> = heads.iter().flat_map(|h| h.2.iter().copied()).collect();
    drop(heads);
    if all_boxes.is_empty() {
        return Err(Error::Data("no obstacle annotations in the training set".into()));
    }
    let dists: Vec<_> = all_boxes.iter().map(|b| pseudo_distance(b, height)).collect();
    let clustering = cluster_obstacles(&dists, cfg.layers, seeds::kmeans(cfg.seed), &cfg.kmeans()).stage("layering")?;
    let subsets = clustering.subsets(&all_boxes);
    let partition = derive_layers(&subsets, road, cfg.layer_margin).stage("layering")?;
    let layer_sizes: Vec<usize> = subsets.iter().map(Vec::len).collect();
    log::info!("layers: {:?} (obstacles per layer {:?})", partition.regions, layer_sizes);

    // occlusion classifier
    let analyses: Vec<(Vec<LayerAnalysis>, Vec<f64>)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let s = data.get(i)?;
            let layers = analyze_layers(&s.image, &partition, cfg, &strat)?;
            let targets = layers
                .iter()
                .flat_map(|l| occlusion::training_targets(&l.atomic, &s.mask, cfg.label_rho, cfg.label_distance))
                .collect();
            Ok((layers, targets))
        })
        .collect::<Result<_>>()?;
    let mut x: Vec<Vec<f64>> = analyses
        .iter()
        .flat_map(|(ls, _)| ls.iter().flat_map(|l| l.edge_features.iter().map(|f| f.0.to_vec())))
        .collect();
    let mut u: Vec<f64> = analyses.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    if cfg.ridge_negative_ratio > 0.0 {
        (x, u) = subsample_negatives(x, u, cfg.ridge_negative_ratio, seeds::ridge(cfg.seed));
    }
    let ridge = occlusion::fit_classifier(&x, &u, cfg.ridge_gamma).stage("occlusion")?;
    let edge_positives = u.iter().filter(|&&v| v > 0.5).count();
    log::info!("occlusion classifier: {} edges, {} positive", u.len(), edge_positives);
    drop(x);

    // proposal regressor
    let samples: Vec<(Vec<Vec<f64>>, Vec<f64>)> = analyses
        .into_par_iter()
        .enumerate()
        .map(|(i, (layers, _))| {
            let s = data.get(i)?;
            let occ = occlusion_maps(&layers, &ridge)?;
            drop(layers);
            let props = proposals::merge(layer_proposals(&occ, cfg, &strat)?);
            let road_props = filter_road(&props, &partition.road_region, Some(&s.mask), cfg.road_min_inside);
            let color = ColorIntegrals::new(&s.image.to_hsv()).stage("features")?;
            let feats = features_for(&road_props, &color, &occ).stage("features")?;
            let ys: Vec<f64> = road_props.iter().map(|p| overlap(&p.bbox, &s.boxes)).collect();
            let mut idx: Vec<usize> = (0..ys.len()).collect();
            let (mut keep, mut rest): (Vec<usize>, Vec<usize>) = idx.drain(..).partition(|&j| ys[j] >= cfg.forest_positive_iou);
            let room = cfg.forest_samples_per_image.saturating_sub(keep.len());
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::sampling(cfg.seed, i)));
            keep.extend(rest.into_iter().take(room));
            keep.sort_unstable();
            Ok((keep.iter().map(|&j| feats[j].to_vec()).collect(), keep.iter().map(|&j| ys[j]).collect()))
        })
        .collect::<Result<_>>()?;
    let fx: Vec<Vec<f64>> = samples.iter().flat_map(|(x, _)| x.iter().cloned()).collect();
    let fy: Vec<f64> = samples.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    let forest_positives = fy.iter().filter(|&&v| v >= 0.5).count();
    log::info!("forest: {} samples, {} with overlap >= 0.5", fy.len(), forest_positives);
    let forest = forest::train(&fx, &fy, &cfg.forest, seeds::forest(cfg.seed), FEATURE_SCHEMA_VERSION).stage("forest")?;

    let freq = forest::feature_frequency(&forest);
    let report = TrainingReport {
        images: data.len(),
        obstacles: all_boxes.len(),
        layers: partition.k(),
        effective_layers: partition.effective_layers(),
        empty_layers: partition.empty_layers.clone(),
        layer_sizes: layer_sizes.clone(),
        regions: partition.regions.clone(),
        edge_samples: u.len(),
        edge_positives,
        ridge_weights: occlusion::EDGE_FEATURE_NAMES.iter().map(|n| n.to_string()).zip(ridge.c.iter().copied()).collect(),
        forest_samples: fy.len(),
        forest_positives,
        feature_frequency: crate::features::FEATURE_NAMES.iter().map(|n| n.to_string()).zip(freq).collect(),
    };
    let model = PipelineModel {
        format_version: MODEL_FORMAT_VERSION,
        feature_schema_version: FEATURE_SCHEMA_VERSION,
        edge_feature_count: EDGE_FEATURES,
        image_width: width,
        image_height: height,
        partition,
        layer_sizes,
        ridge,
        forest,
        config: cfg.to_text(),
    };
    Ok((model, report))
}

/// Per-image evaluation counts and score samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub roc: RocCounts,
    /// Recall of the top-ranked road proposals.
    pub recall: RecallCounts,
    /// Recall of `B_1` alone, top-n of the first layer.
    pub recall_first_layer: RecallCounts,
    /// Recall of `B^f`, top-n of every layer.
    pub recall_union: RecallCounts,
    /// Scores of road proposals overlapping an obstacle with IoU >= 0.5.
    pub obstacle_scores: Vec<f64>,
    /// Scores of road proposals touching no obstacle box.
    pub road_scores: Vec<f64>,
}

/// Top `n` of every layer list, concatenated.
pub fn per_layer_top(layers: &[Vec<Proposal>], n: usize) -> Vec<BBox> {
    layers.iter().flat_map(|l| l.iter().take(n).map(|p| p.bbox)).collect()
}

pub fn evaluate_prediction(pred: &Prediction, gt: &LabeledImage, budgets: &[usize], taus: &[f64], top_n: usize) -> Result<ImageEvaluation> {
    let roc = pixel_counts(&pred.probability, &gt.mask, &pred.partition.road_region)?;
    let ranked: Vec<BBox> = pred.ranked.iter().take(top_n).map(|s| s.proposal.bbox).collect();
    let recall = instance_recall(&ranked, &gt.boxes, budgets, taus);

    // per-layer budgets: a budget n keeps the top n of each layer list
    let mut first = RecallCounts::new(budgets, taus);
    let mut union = RecallCounts::new(budgets, taus);
    for (bi, &n) in budgets.iter().enumerate() {
        let b1: Vec<BBox> = pred.layer_proposals.first().map_or(Vec::new(), |l| l.iter().take(n).map(|p| p.bbox).collect());
        let bf = per_layer_top(&pred.layer_proposals, n);
        let c1 = instance_recall(&b1, &gt.boxes, &[usize::MAX], taus);
        let cf = instance_recall(&bf, &gt.boxes, &[usize::MAX], taus);
        first.recalled[bi] = c1.recalled[0].clone();
        union.recalled[bi] = cf.recalled[0].clone();
    }
    first.total = gt.boxes.len() as u64;
    union.total = gt.boxes.len() as u64;

    let mut obstacle_scores = Vec::new();
    let mut road_scores = Vec::new();
    for s in &pred.ranked {
        let o = overlap(&s.proposal.bbox, &gt.boxes);
        if o >= 0.5 {
            obstacle_scores.push(s.score);
        } else if o == 0.0 {
            road_scores.push(s.score);
        }
    }
    Ok(ImageEvaluation { roc, recall, recall_first_layer: first, recall_union: union, obstacle_scores, road_scores })
}

/// Dataset-level sums of per-image evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTotals {
    pub images: usize,
    pub roc: RocCounts,
    pub recall: RecallCounts,
    pub recall_first_layer: RecallCounts,
    pub recall_union: RecallCounts,
    pub obstacle_scores: Vec<f64>,
    pub road_scores: Vec<f64>,
}

impl EvaluationTotals {
    pub fn new(budgets: &[usize], taus: &[f64]) -> Self {
        Self {
            images: 0,
            roc: RocCounts::default(),
            recall: RecallCounts::new(budgets, taus),
            recall_first_layer: RecallCounts::new(budgets, taus),
            recall_union: RecallCounts::new(budgets, taus),
            obstacle_scores: Vec::new(),
            road_scores: Vec::new(),
        }
    }

    pub fn add(&mut self, e: &ImageEvaluation) -> Result<()> {
        self.images += 1;
        self.roc.add(&e.roc);
        self.recall.add(&e.recall)?;
        self.recall_first_layer.add(&e.recall_first_layer)?;
        self.recall_union.add(&e.recall_union)?;
        self.obstacle_scores.extend_from_slice(&e.obstacle_scores);
        self.road_scores.extend_from_slice(&e.road_scores);
        Ok(())
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Predicts and evaluates every image, in parallel, summing in input order.
pub fn evaluate(model: &PipelineModel, data: &(impl LabeledSource + ?Sized), budgets: &[usize], taus: &[f64]) -> Result<EvaluationTotals> {
    let cfg = model.config()?;
    let per: Vec<ImageEvaluation> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let s = data.get(i)?;
            let pred = predict(model, &s.image)?;
            evaluate_prediction(&pred, &s, budgets, taus, cfg.eval_top_n)
        })
        .collect::<Result<_>>()?;
    let mut t = EvaluationTotals::new(budgets, taus);
    for e in &per {
        t.add(e)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampling_keeps_positives_and_caps_negatives() {
        let u: Vec<f64> = (0..200).map(|i| if i % 10 == 0 { 1.0 } else { 0.0 }).collect();
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64; 3]).collect();
        let (xs, us) = subsample_negatives(x.clone(), u.clone(), 2.0, 9);
        assert_eq!(us.iter().filter(|&&v| v > 0.5).count(), 20);
        assert_eq!(us.len(), 60);
        // rows stay paired and in input order
        assert!(xs.windows(2).all(|w| w[0][0] < w[1][0]));
        assert!(xs.iter().zip(&us).all(|(r, &t)| u[r[0] as usize] == t));
        assert_eq!(subsample_negatives(x.clone(), u.clone(), 2.0, 9), (xs, us));
        // nothing to drop
        assert_eq!(subsample_negatives(x.clone(), u.clone(), 100.0, 9).1.len(), 200);
    }

    #[test]
    fn per_layer_top_takes_n_from_each_layer() {
        let p = |x| Proposal { bbox: BBox::new(x, 0, 4, 4), objectness: 1.0, layer: 0 };
        let layers = vec![vec![p(0), p(1), p(2)], vec![p(10)], vec![]];
        assert_eq!(per_layer_top(&layers, 2), vec![BBox::new(0, 0, 4, 4), BBox::new(1, 0, 4, 4), BBox::new(10, 0, 4, 4)]);
    }

    #[test]
    fn model_header_is_checked() {
        assert!(matches!(PipelineModel::from_bytes(b"nope"), Err(Error::Data(_))));
        let mut bytes = MODEL_MAGIC.to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        assert!(matches!(PipelineModel::from_bytes(&bytes), Err(Error::Schema { expected: 1, found: 7 })));
        bytes[8..12].copy_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(PipelineModel::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
