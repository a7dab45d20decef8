//! Atomic-edge featurization and the ridge-regression occlusion classifier.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edge::{sobel, EdgeMap, RegionMap};
use crate::error::{Error, Result};
use crate::layering::LayerPartition;
use crate::raster::{label, Mask, Raster};
use crate::superpixel::{AtomicEdge, SuperpixelLabels};

pub const EDGE_FEATURES: usize = 14;

pub const EDGE_FEATURE_NAMES: [&str; EDGE_FEATURES] = [
    "edge_mean",
    "edge_max",
    "length",
    "straightness",
    "color_diff_r",
    "color_diff_g",
    "color_diff_b",
    "variance_small_side",
    "variance_large_side",
    "centroid_y",
    "dist_to_region_bottom",
    "layer",
    "gradient_alignment",
    "area_ratio",
];

/// Half-width of the window used for cross-edge color differences.
const SIDE_OFFSET: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeFeature(pub [f64; EDGE_FEATURES]);

/// Per-layer data shared by all atomic edges of that layer.
pub struct EdgeContext<'a> {
    pub image: &'a Raster,
    pub enhanced: &'a EdgeMap,
    pub labels: &'a SuperpixelLabels,
    pub layers: &'a LayerPartition,
    sizes: Vec<usize>,
    variances: Vec<f64>,
    grad: (Vec<f64>, Vec<f64>),
}

impl<'a> EdgeContext<'a> {
    pub fn new(image: &'a Raster, enhanced: &'a EdgeMap, labels: &'a SuperpixelLabels, layers: &'a LayerPartition) -> Result<Self> {
        if enhanced.region != labels.region {
            return Err(Error::contract("edge map and superpixels cover different regions"));
        }
        let r = labels.region;
        if r.x < 0 || r.y < 0 || r.right() > image.width() as i32 || r.bottom() > image.height() as i32 {
            return Err(Error::contract("superpixel region outside image"));
        }
        let (w, h) = (r.w as usize, r.h as usize);
        let ch = image.channels();
        let mut sum = vec![0.0; labels.count * ch];
        let mut sq = vec![0.0; labels.count * ch];
        let mut gray = vec![0.0; w * h];
        for ly in 0..h {
            for lx in 0..w {
                let l = labels.local(lx, ly) as usize;
                let px = image.pixel(lx + r.x as usize, ly + r.y as usize);
                for (c, &v) in px.iter().enumerate() {
                    sum[l * ch + c] += v;
                    sq[l * ch + c] += v * v;
                }
                gray[ly * w + lx] = px.iter().sum::<f64>() / ch as f64;
            }
        }
        let sizes = labels.sizes();
        let variances = (0..labels.count)
            .map(|l| {
                let n = sizes[l].max(1) as f64;
                (0..ch)
                    .map(|c| {
                        let m = sum[l * ch + c] / n;
                        (sq[l * ch + c] / n - m * m).max(0.0)
                    })
                    .sum()
            })
            .collect();
        Ok(Self {
            image,
            enhanced,
            labels,
            layers,
            sizes,
            variances,
            grad: sobel(&gray, w, h),
        })
    }
}

/// Dominant direction of a point set, as an angle in radians.
fn principal_angle(pts: &[(i32, i32)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    0.5 * (2.0 * sxy).atan2(sxx - syy)
}

pub fn edge_features(e: &AtomicEdge, ctx: &EdgeContext) -> EdgeFeature {
    let mut f = [0.0; EDGE_FEATURES];
    let n = e.pixels.len().max(1) as f64;
    let r = ctx.labels.region;
    let (w, h) = (r.w as usize, r.h as usize);

    let strengths = e.pixels.iter().map(|&(x, y)| ctx.enhanced.get_or_zero(x, y));
    f[0] = strengths.clone().sum::<f64>() / n;
    f[1] = strengths.fold(0.0, f64::max);

    let layer_region = ctx.layers.regions.get(e.layer).copied().unwrap_or(r);
    let diag = ((layer_region.w as f64).powi(2) + (layer_region.h as f64).powi(2)).sqrt();
    f[2] = e.pixels.len() as f64 / diag.max(1.0);
    f[3] = match (e.pixels.first(), e.pixels.last()) {
        (Some(a), Some(b)) if e.pixels.len() > 1 => {
            let d = (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt();
            (d / (e.pixels.len() - 1) as f64).min(1.0)
        }
        _ => 1.0,
    };

    // mean color difference between the two sides near each chain pixel
    let ch = ctx.image.channels();
    let mut diff = [0.0; 3];
    let mut used = 0usize;
    for &(x, y) in &e.pixels {
        let mut acc = [[0.0; 4]; 2];
        for yy in (y - SIDE_OFFSET).max(r.y)..(y + SIDE_OFFSET + 1).min(r.bottom()) {
            for xx in (x - SIDE_OFFSET).max(r.x)..(x + SIDE_OFFSET + 1).min(r.right()) {
                let l = ctx.labels.at(xx, yy);
                let side = if l == e.pair.0 {
                    0
                } else if l == e.pair.1 {
                    1
                } else {
                    continue;
                };
                let px = ctx.image.pixel(xx as usize, yy as usize);
                for c in 0..3 {
                    acc[side][c] += px[c.min(ch - 1)];
                }
                acc[side][3] += 1.0;
            }
        }
        if acc[0][3] > 0.0 && acc[1][3] > 0.0 {
            for c in 0..3 {
                diff[c] += (acc[0][c] / acc[0][3] - acc[1][c] / acc[1][3]).abs();
            }
            used += 1;
        }
    }
    if used > 0 {
        for c in 0..3 {
            f[4 + c] = diff[c] / used as f64;
        }
    }

    let (a, b) = (e.pair.0 as usize, e.pair.1 as usize);
    let (small, large) = if ctx.sizes[a] <= ctx.sizes[b] { (a, b) } else { (b, a) };
    f[7] = ctx.variances[small];
    f[8] = ctx.variances[large];

    let cy = e.pixels.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n;
    f[9] = cy / ctx.image.height() as f64;
    f[10] = ((layer_region.bottom() as f64 - cy) / layer_region.h.max(1) as f64).max(0.0);
    f[11] = (e.layer + 1) as f64 / ctx.layers.k().max(1) as f64;

    // gradient direction against local chain direction
    let (gx, gy) = &ctx.grad;
    let (mut num, mut den) = (0.0, 0.0);
    if e.pixels.len() >= 2 {
        for i in 0..e.pixels.len() {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(e.pixels.len());
            let theta = principal_angle(&e.pixels[lo..hi]);
            let (x, y) = e.pixels[i];
            let li = (y - r.y) as usize * w + (x - r.x) as usize;
            debug_assert!(li < w * h);
            let m = gx[li].hypot(gy[li]);
            if m > 1e-12 {
                num += m * (gy[li].atan2(gx[li]) - theta).sin().abs();
                den += m;
            }
        }
    }
    f[12] = if den > 0.0 { num / den } else { 0.0 };
    f[13] = ctx.sizes[small] as f64 / ctx.sizes[large].max(1) as f64;
    EdgeFeature(f)
}

pub fn edge_features_all(edges: &[AtomicEdge], ctx: &EdgeContext) -> Vec<EdgeFeature> {
    edges.par_iter().map(|e| edge_features(e, ctx)).collect()
}

/// Labels each chain 1 when at least `rho` of its pixels lie within `d`
/// pixels (Euclidean) of an obstacle contour pixel.
pub fn label_edges(edges: &[AtomicEdge], gt: &Mask, rho: f64, d: f64) -> Vec<u8> {
    let (w, h) = (gt.width() as i32, gt.height() as i32);
    let mut near = vec![false; (w * h) as usize];
    let rad = d.floor() as i32;
    for (cx, cy) in gt.obstacle_contour() {
        let (cx, cy) = (cx as i32, cy as i32);
        for dy in -rad..=rad {
            for dx in -rad..=rad {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && x < w && y < h && ((dx * dx + dy * dy) as f64) <= d * d {
                    near[(y * w + x) as usize] = true;
                }
            }
        }
    }
    edges
        .iter()
        .map(|e| {
            if e.pixels.is_empty() {
                return 0;
            }
            let hits = e
                .pixels
                .iter()
                .filter(|&&(x, y)| x >= 0 && y >= 0 && x < w && y < h && near[(y * w + x) as usize])
                .count();
            (hits as f64 >= rho * e.pixels.len() as f64) as u8
        })
        .collect()
}

/// Linear occlusion-edge scorer with input standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub c: Vec<f64>,
    pub b: f64,
    pub gamma: f64,
}

impl RidgeModel {
    pub fn constant(dim: usize, b: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            c: vec![0.0; dim],
            b,
            gamma: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Unclamped linear response.
    pub fn response(&self, x: &[f64]) -> f64 {
        self.b
            + x.iter()
                .zip(&self.c)
                .zip(self.mean.iter().zip(&self.scale))
                .map(|((v, c), (m, s))| c * (v - m) / s)
                .sum::<f64>()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.response(x).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.c.len();
        if self.mean.len() != d || self.scale.len() != d {
            return Err(Error::contract(format!(
                "ridge model has {d} weights but {}/{} standardization entries",
                self.mean.len(),
                self.scale.len()
            )));
        }
        let finite = self.c.iter().chain(&self.mean).chain(&self.scale).all(|v| v.is_finite()) && self.b.is_finite();
        if !finite || !(self.gamma > 0.0) || self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::contract("ridge model has non-finite weights or non-positive gamma/scale"));
        }
        Ok(())
    }
}

/// Sum of squared residuals plus `gamma * |c|^2`.
pub fn ridge_objective(x: &[Vec<f64>], u: &[f64], c: &[f64], b: f64, gamma: f64) -> f64 {
    let fit: f64 = x
        .iter()
        .zip(u)
        .map(|(row, &t)| {
            let p = row.iter().zip(c).map(|(a, w)| a * w).sum::<f64>() + b;
            (t - p).powi(2)
        })
        .sum();
    fit + gamma * c.iter().map(|v| v * v).sum::<f64>()
}

/// Closed-form ridge fit on raw features (identity standardization).
pub fn train_ridge(x: &[Vec<f64>], u: &[f64], gamma: f64) -> Result<RidgeModel> {
    let n = x.len();
    if n == 0 || n != u.len() {
        return Err(Error::contract(format!("{} feature rows but {} labels", n, u.len())));
    }
    let v = x[0].len();
    if x.iter().any(|r| r.len() != v) {
        return Err(Error::contract("feature rows have differing lengths"));
    }
    if n < v {
        return Err(Error::contract(format!("need at least {v} training edges, got {n}")));
    }
    if !(gamma > 0.0) {
        return Err(Error::contract("gamma must be positive"));
    }
    let mean: Vec<f64> = (0..v).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let u_mean = u.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, v, |i, j| x[i][j] - mean[j]);
    let uc = DVector::from_iterator(n, u.iter().map(|t| t - u_mean));
    let a = xc.transpose() * &xc + DMatrix::identity(v, v) * gamma;
    let rhs = xc.transpose() * uc;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Internal("ridge normal equations are not positive definite".into()))?;
    let c = chol.solve(&rhs);
    let c: Vec<f64> = c.iter().copied().collect();
    let b = u_mean - c.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(RidgeModel {
        mean: vec![0.0; v],
        scale: vec![1.0; v],
        c,
        b,
        gamma,
    })
}

/// Standardizes features with train-set statistics, then fits.
pub fn fit_classifier(x: &[Vec<f64>], u: &[f64], gamma: f64) -> Result<RidgeModel> {
    let n = x.len();
    if n == 0 {
        return Err(Error::contract("no training edges"));
    }
    let v = x[0].len();
    let mean: Vec<f64> = (0..v).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..v)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / scale[j]).collect())
        .collect();
    let mut m = train_ridge(&z, u, gamma)?;
    m.mean = mean;
    m.scale = scale;
    Ok(m)
}

pub type OcclusionEdgeMap = RegionMap;

/// Per-edge scores, clamped to `[0, 1]`.
pub fn edge_scores(features: &[EdgeFeature], model: &RidgeModel) -> Vec<f64> {
    features.iter().map(|f| model.score(&f.0)).collect()
}

/// Paints every chain with its score. A pixel shared by two chains keeps the
/// larger score.
pub fn classify(edges: &[AtomicEdge], features: &[EdgeFeature], model: &RidgeModel, region: crate::raster::BBox) -> Result<OcclusionEdgeMap> {
    if edges.len() != features.len() {
        return Err(Error::contract(format!("{} edges but {} feature vectors", edges.len(), features.len())));
    }
    let mut map = RegionMap::zeros(region);
    for (e, s) in edges.iter().zip(edge_scores(features, model)) {
        for &(x, y) in &e.pixels {
            if region.contains_point(x, y) {
                let i = map.index(x, y);
                map.values[i] = map.values[i].max(s);
            }
        }
    }
    Ok(map)
}

/// Ground-truth-based labels for a training image, in `{0, 1}` as f64.
pub fn training_targets(edges: &[AtomicEdge], gt: &Mask, rho: f64, d: f64) -> Vec<f64> {
    label_edges(edges, gt, rho, d).into_iter().map(f64::from).collect()
}

/// True when the mask contains any obstacle pixel.
pub fn has_obstacles(gt: &Mask) -> bool {
    gt.labels().iter().any(|&l| l == label::OBSTACLE)
}
