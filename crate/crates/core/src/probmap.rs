//! Per-pixel obstacle probability from scored proposals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{save_gray16, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        save_gray16(path, self.width, self.height, &self.values)
    }

    /// False-color rendering, dark blue at 0 through green to yellow at 1.
    pub fn save_false_color(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.values.len() * 3);
        for &v in &self.values {
            let v = v.clamp(0.0, 1.0);
            let (r, g, b) = if v < 0.5 {
                let t = v / 0.5;
                (0.15 * (1.0 - t), 0.1 + 0.6 * t, 0.45 + 0.05 * t)
            } else {
                let t = (v - 0.5) / 0.5;
                (0.95 * t, 0.7 + 0.25 * t, 0.5 * (1.0 - t))
            };
            buf.extend([r, g, b].map(|c| (c * 255.0).round() as u8));
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| Error::Internal("false-color buffer size".into()))?
            .save(path)
            .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Unnormalized per-pixel sums of covering proposal scores, and coverage
/// counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawAccumulation {
    pub width: usize,
    pub height: usize,
    pub sum: Vec<f64>,
    pub count: Vec<f64>,
}

/// Box-additive accumulation via a difference image.
pub fn accumulate_raw(scored: &[(BBox, f64)], width: usize, height: usize) -> Result<RawAccumulation> {
    let (w1, h1) = (width + 1, height + 1);
    let mut ds = vec![0.0; w1 * h1];
    let mut dc = vec![0.0; w1 * h1];
    for (b, s) in scored {
        if !s.is_finite() {
            return Err(Error::contract("non-finite proposal score"));
        }
        let Some(b) = b.clip(width, height).filter(|c| c == b) else {
            return Err(Error::contract(format!("proposal {b:?} outside {width}x{height} image")));
        };
        let (x0, y0, x1, y1) = (b.x as usize, b.y as usize, b.right() as usize, b.bottom() as usize);
        for (d, v) in [(&mut ds, *s), (&mut dc, 1.0)] {
            d[y0 * w1 + x0] += v;
            d[y0 * w1 + x1] -= v;
            d[y1 * w1 + x0] -= v;
            d[y1 * w1 + x1] += v;
        }
    }
    let integrate = |d: &mut Vec<f64>| {
        for y in 0..h1 {
            for x in 0..w1 {
                let mut v = d[y * w1 + x];
                if x > 0 {
                    v += d[y * w1 + x - 1];
                }
                if y > 0 {
                    v += d[(y - 1) * w1 + x];
                }
                if x > 0 && y > 0 {
                    v -= d[(y - 1) * w1 + x - 1];
                }
                d[y * w1 + x] = v;
            }
        }
        (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| d[y * w1 + x]).collect::<Vec<_>>()
    };
    Ok(RawAccumulation { width, height, sum: integrate(&mut ds), count: integrate(&mut dc) })
}

/// Maps a raw accumulation to `[0, 1]`.
pub trait ProbNormalizer: Send + Sync {
    fn name(&self) -> &'static str;
    fn normalize(&self, raw: &RawAccumulation) -> Vec<f64>;
}

/// Divides by the largest accumulated value.
pub struct GlobalMax;

impl ProbNormalizer for GlobalMax {
    fn name(&self) -> &'static str {
        "global-max"
    }

    fn normalize(&self, raw: &RawAccumulation) -> Vec<f64> {
        let max = raw.sum.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            raw.sum.iter().map(|v| (v / max).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; raw.sum.len()]
        }
    }
}

/// Mean score of the proposals covering each pixel.
pub struct PixelCount;

impl ProbNormalizer for PixelCount {
    fn name(&self) -> &'static str {
        "pixel-count"
    }

    fn normalize(&self, raw: &RawAccumulation) -> Vec<f64> {
        mean_with_floor(raw, 1.0)
    }
}

/// Like [`PixelCount`], but divides by at least the median coverage of the
/// covered pixels, so pixels touched by only a few boxes are damped.
pub struct CoverageMean;

impl ProbNormalizer for CoverageMean {
    fn name(&self) -> &'static str {
        "coverage-mean"
    }

    fn normalize(&self, raw: &RawAccumulation) -> Vec<f64> {
        let mut covered: Vec<f64> = raw.count.iter().copied().filter(|&c| c > 0.5).collect();
        if covered.is_empty() {
            return vec![0.0; raw.sum.len()];
        }
        let mid = (covered.len() - 1) / 2;
        let (_, median, _) = covered.select_nth_unstable_by(mid, f64::total_cmp);
        mean_with_floor(raw, median.max(1.0))
    }
}

fn mean_with_floor(raw: &RawAccumulation, floor: f64) -> Vec<f64> {
    raw.sum
        .iter()
        .zip(&raw.count)
        .map(|(s, c)| if *c > 0.5 { (s / c.max(floor)).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

pub fn accumulate(scored: &[(BBox, f64)], width: usize, height: usize, road_region: &BBox, normalizer: &dyn ProbNormalizer) -> Result<ProbabilityMap> {
    let raw = accumulate_raw(scored, width, height)?;
    let mut values = normalizer.normalize(&raw);
    for y in 0..height {
        for x in 0..width {
            if !road_region.contains_point(x as i32, y as i32) {
                values[y * width + x] = 0.0;
            }
        }
    }
    Ok(ProbabilityMap { width, height, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_boxes(seed: u64, n: usize, w: i32, h: i32, integer: bool) -> Vec<(BBox, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let bw = rng.gen_range(1..=w);
                let bh = rng.gen_range(1..=h);
                let b = BBox::new(rng.gen_range(0..=w - bw), rng.gen_range(0..=h - bh), bw, bh);
                let s = if integer { rng.gen_range(0..8) as f64 } else { rng.gen_range(0.0..1.0) };
                (b, s)
            })
            .collect()
    }

    fn brute(scored: &[(BBox, f64)], w: usize, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                for (b, s) in scored {
                    if b.contains_point(x as i32, y as i32) {
                        out[y * w + x] += s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn empty_is_zero() {
        let p = accumulate(&[], 10, 8, &BBox::new(0, 0, 10, 8), &GlobalMax).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_box_normalizes_to_one() {
        let b = BBox::new(2, 3, 4, 2);
        let p = accumulate(&[(b, 0.8)], 10, 8, &BBox::new(0, 0, 10, 8), &GlobalMax).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                assert_eq!(p.get(x, y), if b.contains_point(x as i32, y as i32) { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn matches_brute_force() {
        let boxes = random_boxes(3, 20, 30, 20, false);
        let raw = accumulate_raw(&boxes, 30, 20).unwrap();
        let want = brute(&boxes, 30, 20);
        for (a, b) in raw.sum.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
        let max = want.iter().cloned().fold(0.0, f64::max);
        let p = accumulate(&boxes, 30, 20, &BBox::new(0, 0, 30, 20), &GlobalMax).unwrap();
        for (a, b) in p.values.iter().zip(&want) {
            assert!((a - b / max).abs() <= 1e-9);
        }
        let ints = random_boxes(4, 20, 30, 20, true);
        assert_eq!(accumulate_raw(&ints, 30, 20).unwrap().sum, brute(&ints, 30, 20));
    }

    #[test]
    fn outside_road_is_zero_and_pixel_count_is_mean() {
        let boxes = vec![(BBox::new(0, 0, 6, 6), 0.4), (BBox::new(3, 3, 6, 6), 0.8)];
        let road = BBox::new(0, 4, 10, 6);
        let p = accumulate(&boxes, 10, 10, &road, &PixelCount).unwrap();
        assert_eq!(p.get(4, 2), 0.0);
        assert!((p.get(4, 4) - 0.6).abs() < 1e-12);
        assert!((p.get(8, 8) - 0.8).abs() < 1e-12);
        assert!((p.get(1, 5) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn coverage_mean_damps_sparse_pixels() {
        // three stacked boxes over the left half, one box alone on the right
        let mut boxes = vec![(BBox::new(0, 0, 4, 4), 0.3); 3];
        boxes.push((BBox::new(6, 0, 2, 4), 0.9));
        let full = BBox::new(0, 0, 8, 4);
        let p = accumulate(&boxes, 8, 4, &full, &CoverageMean).unwrap();
        // coverage is 3 on 16 pixels and 1 on 8, so the median is 3
        assert!((p.get(1, 1) - 0.3).abs() < 1e-12);
        assert!((p.get(6, 1) - 0.3).abs() < 1e-12);
        assert_eq!(p.get(5, 1), 0.0);
        let plain = accumulate(&boxes, 8, 4, &full, &PixelCount).unwrap();
        assert!((plain.get(6, 1) - 0.9).abs() < 1e-12);
        assert!(accumulate(&[], 8, 4, &full, &CoverageMean).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_out_of_image_boxes() {
        assert!(accumulate_raw(&[(BBox::new(5, 5, 10, 10), 0.5)], 8, 8).is_err());
    }

    proptest! {
        #[test]
        fn additive_and_monotone(seed in 0u64..500, na in 0usize..10, nb in 1usize..10) {
            let a = random_boxes(seed, na, 16, 12, true);
            let b = random_boxes(seed + 1000, nb, 16, 12, true);
            let ra = accumulate_raw(&a, 16, 12).unwrap();
            let rb = accumulate_raw(&b, 16, 12).unwrap();
            let all: Vec<_> = a.iter().chain(&b).cloned().collect();
            let rab = accumulate_raw(&all, 16, 12).unwrap();
            for i in 0..16 * 12 {
                prop_assert_eq!(ra.sum[i] + rb.sum[i], rab.sum[i]);
                prop_assert!(rab.sum[i] >= ra.sum[i]);
            }
        }
    }
}
