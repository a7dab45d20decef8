//! Edge probability maps per layer and the far-to-near fusion that feeds
//! deeper layers' evidence back into the shallower ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layering::LayerPartition;
use crate::raster::{BBox, Raster};

/// A per-pixel map over a rectangular region, addressed in global image
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub region: BBox,
    pub values: Vec<f64>,
}

/// Edge probability map `E_k` / `Ê_k`, values in `[0, 1]`.
pub type EdgeMap = RegionMap;

impl RegionMap {
    pub fn zeros(region: BBox) -> Self {
        Self {
            region,
            values: vec![0.0; region.area() as usize],
        }
    }

    pub fn width(&self) -> usize {
        self.region.w as usize
    }

    pub fn height(&self) -> usize {
        self.region.h as usize
    }

    /// Index of global pixel `(x, y)`; the pixel must be inside the region.
    #[inline]
    pub fn index(&self, x: i32, y: i32) -> usize {
        debug_assert!(self.region.contains_point(x, y));
        ((y - self.region.y) * self.region.w + (x - self.region.x)) as usize
    }

    #[inline]
    pub fn at(&self, x: i32, y: i32) -> f64 {
        self.values[self.index(x, y)]
    }

    /// Value at a global pixel, 0 outside the region.
    #[inline]
    pub fn get_or_zero(&self, x: i32, y: i32) -> f64 {
        if self.region.contains_point(x, y) {
            self.at(x, y)
        } else {
            0.0
        }
    }

    #[inline]
    pub fn local(&self, lx: usize, ly: usize) -> f64 {
        self.values[ly * self.region.w as usize + lx]
    }

    pub fn crop(&self, region: BBox) -> Result<RegionMap> {
        if !self.region.contains(&region) {
            return Err(Error::contract(format!("crop {region:?} outside map region {:?}", self.region)));
        }
        let mut values = Vec::with_capacity(region.area() as usize);
        for y in region.y..region.bottom() {
            let start = self.index(region.x, y);
            values.extend_from_slice(&self.values[start..start + region.w as usize]);
        }
        Ok(RegionMap { region, values })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Separable Gaussian blur with clamped borders; kernel truncated at 3σ.
pub fn gaussian_blur(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * row[clamp(x as isize + j as isize - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * tmp[clamp(y as isize + j as isize - radius, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// 3x3 Sobel derivatives with clamped borders.
pub fn sobel(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Produces an edge probability map for one region of an image.
pub trait EdgeDetector: Send + Sync {
    fn name(&self) -> &'static str;
    fn detect(&self, img: &Raster, region: BBox) -> Result<EdgeMap>;
}

/// Multi-scale Sobel detector: per-channel gradients after Gaussian
/// smoothing at each scale, strongest channel/scale wins, 3x3 non-maximum
/// suppression across the gradient direction, then division by the 99th
/// percentile of the surviving magnitudes and clamping to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SobelPyramid {
    pub sigmas: Vec<f64>,
    pub percentile: f64,
}

impl SobelPyramid {
    pub fn two_scale() -> Self {
        Self {
            sigmas: vec![1.0, 2.0],
            percentile: 0.99,
        }
    }

    pub fn single_scale() -> Self {
        Self {
            sigmas: vec![1.0],
            percentile: 0.99,
        }
    }

    /// Pixels of context needed around a region so that its values match a
    /// whole-image computation.
    fn context(&self) -> i32 {
        let max_sigma = self.sigmas.iter().copied().fold(0.0, f64::max);
        (3.0 * max_sigma).ceil() as i32 + 2
    }
}

const TAN_22_5: f64 = 0.414_213_562_373_095;
const MAG_FLOOR: f64 = 1e-9;

impl EdgeDetector for SobelPyramid {
    fn name(&self) -> &'static str {
        if self.sigmas.len() == 1 {
            "sobel1"
        } else {
            "sobel2"
        }
    }

    fn detect(&self, img: &Raster, region: BBox) -> Result<EdgeMap> {
        if region.w < 3 || region.h < 3 {
            return Err(Error::contract(format!("edge region {region:?} is smaller than 3x3")));
        }
        if !img.bounds().contains(&region) {
            return Err(Error::contract(format!("edge region {region:?} outside image")));
        }
        let ctx = region
            .expand(self.context())
            .clip(img.width(), img.height())
            .expect("region inside image");
        let (w, h) = (ctx.w as usize, ctx.h as usize);

        let mut mag = vec![0.0; w * h];
        let mut gxs = vec![0.0; w * h];
        let mut gys = vec![0.0; w * h];
        for c in 0..img.channels() {
            let mut plane = Vec::with_capacity(w * h);
            for y in ctx.y..ctx.bottom() {
                for x in ctx.x..ctx.right() {
                    plane.push(img.get(x as usize, y as usize, c));
                }
            }
            for &sigma in &self.sigmas {
                let smooth = gaussian_blur(&plane, w, h, sigma);
                let (gx, gy) = sobel(&smooth, w, h);
                for i in 0..w * h {
                    let m = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                    if m > mag[i] {
                        mag[i] = m;
                        gxs[i] = gx[i];
                        gys[i] = gy[i];
                    }
                }
            }
        }

        // Non-maximum suppression; ties keep the pixel on the lower/right side.
        let mut nms = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let m = mag[i];
                if m < MAG_FLOOR {
                    continue;
                }
                let (ax, ay) = (gxs[i].abs(), gys[i].abs());
                let (dx, dy): (isize, isize) = if ay <= ax * TAN_22_5 {
                    (1, 0)
                } else if ax <= ay * TAN_22_5 {
                    (0, 1)
                } else if (gxs[i] > 0.0) == (gys[i] > 0.0) {
                    (1, 1)
                } else {
                    (1, -1)
                };
                let sample = |sx: isize, sy: isize| {
                    let (nx, ny) = (x as isize + sx, y as isize + sy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        0.0
                    } else {
                        mag[ny as usize * w + nx as usize]
                    }
                };
                let before = sample(-dx, -dy);
                let after = sample(dx, dy);
                if m > before && m >= after {
                    nms[i] = m;
                }
            }
        }

        let mut out = RegionMap::zeros(region);
        let ox = (region.x - ctx.x) as usize;
        let oy = (region.y - ctx.y) as usize;
        for ly in 0..region.h as usize {
            for lx in 0..region.w as usize {
                out.values[ly * region.w as usize + lx] = nms[(ly + oy) * w + lx + ox];
            }
        }
        let mut live: Vec<f64> = out.values.iter().copied().filter(|v| *v > 0.0).collect();
        if live.is_empty() {
            return Ok(out);
        }
        live.sort_by(f64::total_cmp);
        let idx = ((live.len() - 1) as f64 * self.percentile).round() as usize;
        let scale = live[idx];
        out.values.iter_mut().for_each(|v| *v = (*v / scale).clamp(0.0, 1.0));
        Ok(out)
    }
}

/// Far-to-near fusion output.
#[derive(Clone, Debug)]
pub struct FusedMaps {
    /// Unnormalized sums: `raw_K = E_K`, `raw_k = E_k + raw_{k+1}` on `R_{k+1}`.
    pub raw: Vec<RegionMap>,
    /// `raw_k` divided by its own maximum (unchanged if the maximum is 0).
    pub enhanced: Vec<RegionMap>,
}

pub fn fuse_far_to_near(maps: &[EdgeMap], layers: &LayerPartition) -> Result<FusedMaps> {
    if maps.len() != layers.k() {
        return Err(Error::contract(format!("{} edge maps for {} layers", maps.len(), layers.k())));
    }
    for (k, (m, r)) in maps.iter().zip(&layers.regions).enumerate() {
        if m.region != *r || m.values.len() != r.area() as usize {
            return Err(Error::contract(format!("edge map {} does not cover layer region {r:?}", k + 1)));
        }
    }
    let k = maps.len();
    let mut raw: Vec<RegionMap> = maps.to_vec();
    for i in (0..k - 1).rev() {
        let (head, tail) = raw.split_at_mut(i + 1);
        let deeper = &tail[0];
        let cur = &mut head[i];
        let r = deeper.region;
        for y in r.y..r.bottom() {
            for x in r.x..r.right() {
                let idx = cur.index(x, y);
                cur.values[idx] += deeper.at(x, y);
            }
        }
    }
    let enhanced = raw
        .iter()
        .map(|m| {
            let max = m.max();
            let mut e = m.clone();
            if max > 0.0 {
                e.values.iter_mut().for_each(|v| *v /= max);
            }
            e
        })
        .collect();
    Ok(FusedMaps { raw, enhanced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_image(w: usize, h: usize, split: usize) -> Raster {
        let mut data = Vec::new();
        for _y in 0..h {
            for x in 0..w {
                data.push(if x < split { 0.0 } else { 1.0 });
            }
        }
        Raster::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Raster::filled(20, 15, 3, 0.4);
        let e = SobelPyramid::two_scale().detect(&img, img.bounds()).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_region_rejected() {
        let img = Raster::filled(20, 15, 1, 0.4);
        assert!(SobelPyramid::two_scale().detect(&img, BBox::new(0, 0, 2, 10)).is_err());
    }

    #[test]
    fn step_edge_peaks_on_step_column() {
        let img = step_image(24, 16, 12);
        let e = SobelPyramid::two_scale().detect(&img, img.bounds()).unwrap();
        for y in 2..14 {
            let row: Vec<f64> = (0..24).map(|x| e.local(x, y)).collect();
            let (best, _) = row.iter().enumerate().fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            assert!(best == 11 || best == 12, "row {y}: {row:?}");
            assert_eq!(row[best], 1.0);
            for (x, v) in row.iter().enumerate() {
                if (x as i32 - best as i32).abs() >= 2 {
                    assert!(*v < 1e-6, "x={x} v={v}");
                }
            }
        }
    }

    #[test]
    fn region_values_match_whole_image() {
        let mut data = Vec::new();
        for y in 0..40 {
            for x in 0..50 {
                data.push(((x * 7 + y * 13) % 17) as f64 / 16.0);
            }
        }
        let img = Raster::new(50, 40, 1, data).unwrap();
        let det = SobelPyramid { sigmas: vec![1.0, 2.0], percentile: 1.0 };
        let full = det.detect(&img, img.bounds()).unwrap();
        let region = BBox::new(12, 10, 20, 15);
        let part = det.detect(&img, region).unwrap();
        // identical up to the normalization constant
        let ratio = full.crop(region).unwrap().max() / part.max();
        for y in region.y..region.bottom() {
            for x in region.x..region.right() {
                assert!((full.at(x, y) - part.at(x, y) * ratio).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn detection_is_translation_equivariant() {
        let make = |dx: usize, dy: usize| {
            let mut img = Raster::filled(60, 50, 3, 0.3);
            for y in 15..27 {
                for x in 18..33 {
                    img.set(x + dx, y + dy, 0, 0.8);
                    img.set(x + dx, y + dy, 2, 0.1);
                }
            }
            img
        };
        let det = SobelPyramid::two_scale();
        let a = det.detect(&make(0, 0), BBox::new(0, 0, 60, 50)).unwrap();
        let b = det.detect(&make(4, 3), BBox::new(0, 0, 60, 50)).unwrap();
        for y in 10..35 {
            for x in 10..40 {
                assert_eq!(a.at(x, y), b.at(x + 4, y + 3));
            }
        }
    }

    fn layered(regions: Vec<BBox>) -> LayerPartition {
        LayerPartition {
            road_region: regions[0],
            regions,
            empty_layers: vec![],
        }
    }

    #[test]
    fn fusion_k1_is_identity() {
        let r = BBox::new(0, 0, 4, 3);
        let m = RegionMap {
            region: r,
            values: (0..12).map(|i| i as f64 / 11.0).collect(),
        };
        let f = fuse_far_to_near(&[m.clone()], &layered(vec![r])).unwrap();
        assert_eq!(f.raw[0], m);
        assert_eq!(f.enhanced[0], m);
    }

    #[test]
    fn fusion_telescopes_constant() {
        let regions = vec![BBox::new(0, 0, 10, 10), BBox::new(2, 2, 6, 6), BBox::new(3, 3, 3, 3)];
        let maps: Vec<_> = regions
            .iter()
            .map(|r| RegionMap { region: *r, values: vec![0.2; r.area() as usize] })
            .collect();
        let f = fuse_far_to_near(&maps, &layered(regions)).unwrap();
        assert!((f.raw[0].at(4, 4) - 0.6).abs() < 1e-15);
        assert!((f.raw[0].at(0, 0) - 0.2).abs() < 1e-15);
        assert_eq!(f.enhanced[0].at(4, 4), 1.0);
    }

    #[test]
    fn fusion_rejects_misaligned() {
        let regions = vec![BBox::new(0, 0, 10, 10), BBox::new(2, 2, 6, 6)];
        let maps = vec![RegionMap::zeros(regions[0]), RegionMap::zeros(BBox::new(1, 1, 6, 6))];
        assert!(fuse_far_to_near(&maps, &layered(regions)).is_err());
    }

    proptest! {
        #[test]
        fn fusion_never_decreases_and_preserves_order(
            vals in prop::collection::vec(0u32..1024, 100),
            inner in (1i32..4, 1i32..4, 2i32..6, 2i32..6),
        ) {
            let r1 = BBox::new(0, 0, 10, 10);
            let r2 = BBox::new(inner.0, inner.1, inner.2, inner.3);
            let e1 = RegionMap { region: r1, values: vals.iter().map(|v| *v as f64 / 1024.0).collect() };
            let e2 = e1.crop(r2).unwrap();
            let f = fuse_far_to_near(&[e1.clone(), e2.clone()], &layered(vec![r1, r2])).unwrap();
            for (raw, orig) in f.raw[0].values.iter().zip(&e1.values) {
                prop_assert!(raw >= orig);
            }
            let (raw, enh) = (&f.raw[0].values, &f.enhanced[0].values);
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    prop_assert_eq!(raw[i] < raw[j], enh[i] < enh[j]);
                }
            }
        }
    }
}
