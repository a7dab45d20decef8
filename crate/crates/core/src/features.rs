//! The 20-dimensional proposal descriptor.
//!
//! Layout: 7 edge/structure cues on the occlusion map, 6 position/size cues,
//! the objectness score, 3 HSV color-contrast cues against a surrounding ring
//! and 3 HSV variances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occlusion::OcclusionEdgeMap;
use crate::proposals::Proposal;
use crate::raster::{BBox, IntegralMap, Raster};

pub const PROPOSAL_FEATURES: usize = 20;
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

pub const FEATURE_NAMES: [&str; PROPOSAL_FEATURES] = [
    "edge_density",
    "edge_mean",
    "edge_max",
    "edge_mode",
    "edge_mode_ratio",
    "edge_fraction",
    "perimeter_interior_ratio",
    "area",
    "center_x",
    "center_y",
    "height",
    "width",
    "aspect",
    "objectness",
    "contrast_h",
    "contrast_s",
    "contrast_v",
    "variance_h",
    "variance_s",
    "variance_v",
];

const HIST_BINS: usize = 32;
const COLOR_BINS: usize = 16;
const BAND: i32 = 2;
const EDGE_ON: f64 = 0.1;
const INTERIOR_FLOOR: f64 = 1e-6;
const RING_SCALE: f64 = 1.5;

pub type FeatureVector = [f64; PROPOSAL_FEATURES];

/// Per-image histogram and moment integrals of the HSV image.
pub struct ColorIntegrals {
    width: usize,
    height: usize,
    /// `(width + 1) * (height + 1)` cells of `3 * COLOR_BINS` counts.
    hist: Vec<u32>,
    sums: Vec<IntegralMap>,
    squares: Vec<IntegralMap>,
}

fn color_bin(v: f64) -> usize {
    ((v * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1)
}

impl ColorIntegrals {
    pub fn new(hsv: &Raster) -> Result<Self> {
        if hsv.channels() != 3 {
            return Err(Error::contract("color integrals need a 3-channel HSV raster"));
        }
        let (w, h) = (hsv.width(), hsv.height());
        let stride = 3 * COLOR_BINS;
        let mut hist = vec![0u32; (w + 1) * (h + 1) * stride];
        for y in 0..h {
            let mut row = vec![0u32; stride];
            for x in 0..w {
                for c in 0..3 {
                    row[c * COLOR_BINS + color_bin(hsv.get(x, y, c))] += 1;
                }
                let above = (y * (w + 1) + x + 1) * stride;
                let here = ((y + 1) * (w + 1) + x + 1) * stride;
                for k in 0..stride {
                    hist[here + k] = hist[above + k] + row[k];
                }
            }
        }
        let sums = (0..3).map(|c| IntegralMap::from_fn(w, h, |x, y| hsv.get(x, y, c))).collect();
        let squares = (0..3).map(|c| IntegralMap::from_fn(w, h, |x, y| hsv.get(x, y, c).powi(2))).collect();
        Ok(Self { width: w, height: h, hist, sums, squares })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn histogram(&self, b: &BBox) -> Vec<f64> {
        let stride = 3 * COLOR_BINS;
        let Some(b) = b.clip(self.width, self.height) else { return vec![0.0; stride] };
        let at = |x: i32, y: i32| (y as usize * (self.width + 1) + x as usize) * stride;
        let (a, bb, c, d) = (at(b.x, b.y), at(b.right(), b.y), at(b.x, b.bottom()), at(b.right(), b.bottom()));
        (0..stride)
            .map(|k| (self.hist[d + k] as i64 - self.hist[bb + k] as i64 - self.hist[c + k] as i64 + self.hist[a + k] as i64) as f64)
            .collect()
    }
}

fn cosine_distance(p: &[f64], q: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return 0.0;
    }
    (1.0 - dot / (np * nq)).clamp(0.0, 1.0)
}

/// Inner box left after removing the border band, if any.
fn interior(b: &BBox) -> Option<BBox> {
    (b.w > 2 * BAND && b.h > 2 * BAND).then(|| BBox::new(b.x + BAND, b.y + BAND, b.w - 2 * BAND, b.h - 2 * BAND))
}

pub fn proposal_features(p: &Proposal, color: &ColorIntegrals, occ: &OcclusionEdgeMap) -> Result<FeatureVector> {
    let b = p.bbox;
    let (iw, ih) = (color.width as f64, color.height as f64);
    if !b.is_valid() || b.clip(color.width, color.height) != Some(b) {
        return Err(Error::contract(format!("proposal {b:?} not inside the image")));
    }
    let mut f = [0.0; PROPOSAL_FEATURES];

    // edge/structure cues; pixels outside the occlusion map count as zero
    let inner = interior(&b);
    let mut hist = [0usize; HIST_BINS];
    let (mut sum, mut max, mut on, mut band_mass, mut inner_mass) = (0.0, 0.0f64, 0usize, 0.0, 0.0);
    let n = b.area() as usize;
    let mut counted = 0usize;
    if let Some(q) = b.intersect(&occ.region) {
        for y in q.y..q.bottom() {
            for x in q.x..q.right() {
                let v = occ.at(x, y);
                counted += 1;
                hist[((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1;
                sum += v;
                max = max.max(v);
                on += (v > EDGE_ON) as usize;
                if inner.is_some_and(|i| i.contains_point(x, y)) {
                    inner_mass += v;
                } else {
                    band_mass += v;
                }
            }
        }
    }
    hist[0] += n - counted;
    let band_area = n as f64 - inner.map_or(0.0, |i| i.area() as f64);
    f[0] = band_mass / band_area;
    f[1] = sum / n as f64;
    f[2] = max;
    let mode = (0..HIST_BINS).fold(0, |best, i| if hist[i] > hist[best] { i } else { best });
    f[3] = mode as f64 / HIST_BINS as f64;
    f[4] = hist[mode] as f64 / n as f64;
    f[5] = on as f64 / n as f64;
    f[6] = band_mass / inner_mass.max(INTERIOR_FLOOR);

    let (cx, cy) = b.center();
    f[7] = b.area() as f64 / (iw * ih);
    f[8] = cx / iw;
    f[9] = cy / ih;
    f[10] = b.h as f64 / ih;
    f[11] = b.w as f64 / iw;
    f[12] = b.w as f64 / b.h as f64;
    f[13] = p.objectness;

    let inside = color.histogram(&b);
    let outer = color.histogram(&b.scale(RING_SCALE));
    let ring: Vec<f64> = outer.iter().zip(&inside).map(|(o, i)| o - i).collect();
    for c in 0..3 {
        let s = c * COLOR_BINS..(c + 1) * COLOR_BINS;
        f[14 + c] = cosine_distance(&inside[s.clone()], &ring[s]);
        let m = color.sums[c].box_sum(&b) / n as f64;
        f[17 + c] = (color.squares[c].box_sum(&b) / n as f64 - m * m).max(0.0);
    }
    Ok(f)
}

/// Features of many proposals; each proposal uses the occlusion map of its
/// origin layer.
pub fn features_for(props: &[Proposal], color: &ColorIntegrals, occ_by_layer: &[OcclusionEdgeMap]) -> Result<Vec<FeatureVector>> {
    props
        .par_iter()
        .map(|p| {
            let occ = occ_by_layer
                .get(p.layer)
                .ok_or_else(|| Error::contract(format!("proposal from missing layer {}", p.layer)))?;
            proposal_features(p, color, occ)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub names: Vec<String>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            version: FEATURE_SCHEMA_VERSION,
            names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::RegionMap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prop(b: BBox) -> Proposal {
        Proposal { bbox: b, objectness: 0.25, layer: 0 }
    }

    fn random_scene(seed: u64, w: usize, h: usize) -> (Raster, OcclusionEdgeMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Raster::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut occ = RegionMap::zeros(BBox::new(0, 0, w as i32, h as i32));
        for v in occ.values.iter_mut() {
            if rng.gen_bool(0.2) {
                *v = rng.gen_range(0.0..1.0);
            }
        }
        (img.to_hsv(), occ)
    }

    #[test]
    fn empty_edge_semantics() {
        let hsv = Raster::filled(40, 30, 3, 0.5);
        let occ = RegionMap::zeros(BBox::new(0, 0, 40, 30));
        let ci = ColorIntegrals::new(&hsv).unwrap();
        let f = proposal_features(&prop(BBox::new(5, 5, 10, 8)), &ci, &occ).unwrap();
        assert_eq!(&f[..7], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn full_image_geometry() {
        let (hsv, occ) = random_scene(1, 40, 30);
        let ci = ColorIntegrals::new(&hsv).unwrap();
        let f = proposal_features(&prop(BBox::new(0, 0, 40, 30)), &ci, &occ).unwrap();
        assert_eq!(f[7], 1.0);
        assert_eq!((f[8], f[9]), (0.5, 0.5));
        assert_eq!((f[10], f[11]), (1.0, 1.0));
        assert_eq!(f[13], 0.25);
        // the ring is empty
        assert_eq!(&f[14..17], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_color_has_no_contrast_or_variance() {
        let hsv = Raster::filled(50, 50, 3, 0.3);
        let occ = RegionMap::zeros(BBox::new(0, 0, 50, 50));
        let ci = ColorIntegrals::new(&hsv).unwrap();
        let f = proposal_features(&prop(BBox::new(20, 20, 10, 10)), &ci, &occ).unwrap();
        assert!(f[14..20].iter().all(|&v| v.abs() < 1e-12));
    }

    /// Direct per-pixel evaluation of the schema.
    fn brute(b: BBox, hsv: &Raster, occ: &OcclusionEdgeMap, objectness: f64) -> FeatureVector {
        let mut f = [0.0; PROPOSAL_FEATURES];
        let vals: Vec<(i32, i32, f64)> = (b.y..b.bottom())
            .flat_map(|y| (b.x..b.right()).map(move |x| (x, y)))
            .map(|(x, y)| (x, y, occ.get_or_zero(x, y)))
            .collect();
        let n = vals.len() as f64;
        let in_band = |x: i32, y: i32| x < b.x + 2 || y < b.y + 2 || x >= b.right() - 2 || y >= b.bottom() - 2 || b.w <= 4 || b.h <= 4;
        let band: Vec<f64> = vals.iter().filter(|v| in_band(v.0, v.1)).map(|v| v.2).collect();
        let inner: f64 = vals.iter().filter(|v| !in_band(v.0, v.1)).map(|v| v.2).sum();
        f[0] = band.iter().sum::<f64>() / band.len() as f64;
        f[1] = vals.iter().map(|v| v.2).sum::<f64>() / n;
        f[2] = vals.iter().map(|v| v.2).fold(0.0, f64::max);
        let mut hist = [0usize; 32];
        for v in &vals {
            hist[((v.2 * 32.0) as usize).min(31)] += 1;
        }
        let best = *hist.iter().max().unwrap();
        let mode = hist.iter().position(|&c| c == best).unwrap();
        f[3] = mode as f64 / 32.0;
        f[4] = best as f64 / n;
        f[5] = vals.iter().filter(|v| v.2 > 0.1).count() as f64 / n;
        f[6] = band.iter().sum::<f64>() / inner.max(1e-6);
        let (w, h) = (hsv.width() as f64, hsv.height() as f64);
        f[7] = n / (w * h);
        f[8] = (b.x as f64 + b.w as f64 / 2.0) / w;
        f[9] = (b.y as f64 + b.h as f64 / 2.0) / h;
        f[10] = b.h as f64 / h;
        f[11] = b.w as f64 / w;
        f[12] = b.w as f64 / b.h as f64;
        f[13] = objectness;
        let ring_box = b.scale(1.5).clip(hsv.width(), hsv.height()).unwrap();
        for c in 0..3 {
            let mut hi = [0.0; 16];
            let mut hr = [0.0; 16];
            let (mut s, mut s2) = (0.0, 0.0);
            for y in ring_box.y..ring_box.bottom() {
                for x in ring_box.x..ring_box.right() {
                    let v = hsv.get(x as usize, y as usize, c);
                    let bin = ((v * 16.0) as usize).min(15);
                    if b.contains_point(x, y) {
                        hi[bin] += 1.0;
                        s += v;
                        s2 += v * v;
                    } else {
                        hr[bin] += 1.0;
                    }
                }
            }
            let dot: f64 = hi.iter().zip(&hr).map(|(a, b)| a * b).sum();
            let ni = hi.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nr = hr.iter().map(|a| a * a).sum::<f64>().sqrt();
            f[14 + c] = if ni > 0.0 && nr > 0.0 { 1.0 - dot / (ni * nr) } else { 0.0 };
            f[17 + c] = s2 / n - (s / n).powi(2);
        }
        f
    }

    #[test]
    fn matches_brute_force() {
        let (hsv, occ) = random_scene(7, 60, 45);
        let ci = ColorIntegrals::new(&hsv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let w = rng.gen_range(1..40);
            let h = rng.gen_range(1..30);
            let b = BBox::new(rng.gen_range(0..60 - w), rng.gen_range(0..45 - h), w, h);
            let got = proposal_features(&prop(b), &ci, &occ).unwrap();
            let want = brute(b, &hsv, &occ, 0.25);
            for k in 0..PROPOSAL_FEATURES {
                assert!((got[k] - want[k]).abs() < 1e-9, "{b:?} component {k}: {} vs {}", got[k], want[k]);
            }
        }
    }

    #[test]
    fn rejects_box_outside_image() {
        let (hsv, occ) = random_scene(2, 20, 20);
        let ci = ColorIntegrals::new(&hsv).unwrap();
        assert!(proposal_features(&prop(BBox::new(15, 15, 10, 10)), &ci, &occ).is_err());
    }

    fn shifted(hsv: &Raster, occ: &OcclusionEdgeMap, dx: i32, dy: i32) -> (Raster, OcclusionEdgeMap) {
        let (w, h) = (hsv.width() as i32, hsv.height() as i32);
        let mut data = Vec::with_capacity(hsv.data().len());
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = ((x - dx).rem_euclid(w), (y - dy).rem_euclid(h));
                data.extend_from_slice(hsv.pixel(sx as usize, sy as usize));
            }
        }
        let mut o = RegionMap::zeros(occ.region);
        for y in 0..h {
            for x in 0..w {
                let i = o.index(x, y);
                o.values[i] = occ.at((x - dx).rem_euclid(w), (y - dy).rem_euclid(h));
            }
        }
        (Raster::new(w as usize, h as usize, 3, data).unwrap(), o)
    }

    proptest! {
        #[test]
        fn translation_invariance(seed in 0u64..50, dx in -6i32..6, dy in -6i32..6, x in 12i32..20, y in 12i32..20, w in 4i32..14, h in 4i32..14) {
            let (hsv, occ) = random_scene(seed, 60, 60);
            let (hsv2, occ2) = shifted(&hsv, &occ, dx, dy);
            let b = BBox::new(x, y, w, h);
            let f1 = proposal_features(&prop(b), &ColorIntegrals::new(&hsv).unwrap(), &occ).unwrap();
            let f2 = proposal_features(&prop(b.translate(dx, dy)), &ColorIntegrals::new(&hsv2).unwrap(), &occ2).unwrap();
            for k in (0..7).chain(12..20) {
                prop_assert!((f1[k] - f2[k]).abs() < 1e-9, "component {}", k);
            }
        }

        #[test]
        fn ranges_hold(seed in 0u64..50, x in 0i32..30, y in 0i32..30, w in 1i32..30, h in 1i32..30) {
            let (hsv, occ) = random_scene(seed, 60, 60);
            let f = proposal_features(&prop(BBox::new(x, y, w, h)), &ColorIntegrals::new(&hsv).unwrap(), &occ).unwrap();
            prop_assert!(f.iter().all(|v| v.is_finite()));
            for &v in &f[7..12] { prop_assert!((0.0..=1.0).contains(&v)); }
            prop_assert!(f[12] > 0.0);
            for &v in &f[14..17] { prop_assert!((0.0..=1.0).contains(&v)); }
        }
    }
}
