//! Deterministic synthetic road scenes with pixel and box ground truth.
//!
//! Obstacles follow a perspective size law, `h = near_height / (1 + beta *
//! d_bottom)`, so farther obstacles sit higher in the image and are smaller.
//! Optional distractors (zebra crossings, brick texture, shadows) add strong
//! non-obstacle edges on the road surface.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{label, BBox, Mask, Raster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Horizon row as a fraction of the height.
    pub horizon: f64,
    /// Road x-extent at the bottom row, as fractions of the width.
    pub road_bottom: (f64, f64),
    /// Road x-extent at the horizon row.
    pub road_top: (f64, f64),
    pub obstacles: ObstacleSpec,
    pub distractors: DistractorSpec,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    /// Explicit obstacles; when empty, `count` random ones are drawn.
    pub placements: Vec<Placement>,
    pub count: (usize, usize),
    /// Minimum number of random obstacles with height at most `tiny_height`.
    pub min_far_tiny: usize,
    pub tiny_height: usize,
    /// Obstacle height at `d_bottom = 0`.
    pub near_height: f64,
    pub beta: f64,
    /// Width / height range.
    pub aspect: (f64, f64),
    /// RGB distance between obstacle and road colors.
    pub contrast: (f64, f64),
    pub low_contrast: (f64, f64),
    /// Probability that a far-tiny obstacle uses `low_contrast`.
    pub far_low_contrast_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub d_bottom: f64,
    /// Horizontal center as a fraction of the road width at that row.
    pub across: f64,
    pub aspect: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub zebra_prob: f64,
    pub brick_prob: f64,
    pub shadow_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 320,
            height: 240,
            horizon: 0.42,
            road_bottom: (0.04, 0.96),
            road_top: (0.42, 0.58),
            obstacles: ObstacleSpec::default(),
            distractors: DistractorSpec::default(),
            noise: 0.015,
        }
    }
}

impl Default for ObstacleSpec {
    fn default() -> Self {
        Self {
            placements: Vec::new(),
            count: (1, 3),
            min_far_tiny: 1,
            tiny_height: 12,
            near_height: 40.0,
            beta: 0.025,
            aspect: (0.8, 1.8),
            contrast: (0.18, 0.45),
            low_contrast: (0.07, 0.13),
            far_low_contrast_prob: 0.5,
        }
    }
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            zebra_prob: 0.4,
            brick_prob: 0.3,
            shadow_prob: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn horizon_row(&self) -> f64 {
        self.horizon * self.height as f64
    }

    /// Road x-extent `[left, right)` at image row `y`, if the row is below
    /// the horizon.
    pub fn road_span(&self, y: f64) -> Option<(f64, f64)> {
        let top = self.horizon_row();
        let bottom = self.height as f64;
        if y < top {
            return None;
        }
        let t = (y - top) / (bottom - top);
        let w = self.width as f64;
        let l = w * (self.road_top.0 + t * (self.road_bottom.0 - self.road_top.0));
        let r = w * (self.road_top.1 + t * (self.road_bottom.1 - self.road_top.1));
        Some((l, r))
    }
}

/// Pixel height of an obstacle whose center lies `d_bottom` pixels above the
/// image bottom.
pub fn obstacle_height(near_height: f64, beta: f64, d_bottom: f64) -> f64 {
    near_height / (1.0 + beta * d_bottom)
}

/// A rendered scene with its ground truth.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Raster,
    pub mask: Mask,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
    Trapezoid,
}

fn inside_shape(shape: Shape, b: &BBox, x: i32, y: i32) -> bool {
    let fx = (x as f64 + 0.5 - b.x as f64) / b.w as f64;
    let fy = (y as f64 + 0.5 - b.y as f64) / b.h as f64;
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => (fx - 0.5).powi(2) + (fy - 0.5).powi(2) <= 0.25 + 1e-9 || (b.w <= 3 || b.h <= 3),
        Shape::Trapezoid => {
            let inset = 0.25 * (1.0 - fy);
            fx >= inset && fx <= 1.0 - inset
        }
    }
}

struct Planned {
    bbox: BBox,
    shape: Shape,
    contrast: f64,
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    let (w, h) = (spec.width, spec.height);
    if w < 32 || h < 32 {
        return Err(Error::contract("scene must be at least 32x32"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;

    let mut image = Raster::filled(w, h, 3, 0.0);
    let mut mask = Mask::filled(w, h, label::NON_ROAD);

    let road_gray = rng.gen_range(0.36..0.50);
    let road_tint = [rng.gen_range(-0.015..0.015), rng.gen_range(-0.015..0.015), rng.gen_range(-0.015..0.015)];
    let waves = [
        (rng.gen_range(0.01..0.04), rng.gen_range(0.0..6.3), rng.gen_range(0.015..0.03)),
        (rng.gen_range(0.01..0.04), rng.gen_range(0.0..6.3), rng.gen_range(0.015..0.03)),
    ];
    let sky = [0.62, 0.72, 0.86];
    let grass = [0.30, 0.44, 0.22];
    let horizon = spec.horizon_row();

    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let (color, class) = if fy < horizon {
                let t = fy / horizon;
                ([sky[0] - 0.1 * t, sky[1] - 0.08 * t, sky[2] - 0.05 * t], label::NON_ROAD)
            } else {
                let (l, r) = spec.road_span(fy + 0.5).expect("below horizon");
                if fx + 0.5 >= l && fx + 0.5 < r {
                    let shade: f64 = waves
                        .iter()
                        .map(|(a, ph, f)| a * ((fx * f + fy * f * 0.7) + ph).sin())
                        .sum();
                    let g = road_gray + shade;
                    ([g + road_tint[0], g + road_tint[1], g + road_tint[2]], label::ROAD)
                } else {
                    let v = 0.03 * ((fx * 0.3).sin() * (fy * 0.21).cos());
                    ([grass[0] + v, grass[1] + v, grass[2] + v], label::NON_ROAD)
                }
            };
            mask.set(x, y, class);
            for c in 0..3 {
                image.set(x, y, c, color[c]);
            }
        }
    }

    let bottom = h as f64;
    let road_depth = bottom - horizon;
    let on_road = |x: i32, y: i32, mask: &Mask| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask.get(x as usize, y as usize) == label::ROAD;

    // Zebra crossing: bars across a near depth band.
    if rng.gen_bool(spec.distractors.zebra_prob.clamp(0.0, 1.0)) {
        let y1 = bottom - rng.gen_range(0.05..0.35) * road_depth;
        let y0 = y1 - rng.gen_range(0.10..0.22) * road_depth;
        let bars = rng.gen_range(6..11) as f64;
        let bright = rng.gen_range(0.78..0.9);
        for y in y0.max(horizon) as usize..(y1 as usize).min(h) {
            let (l, r) = spec.road_span(y as f64 + 0.5).expect("below horizon");
            for x in l.max(0.0) as usize..(r as usize).min(w) {
                if !on_road(x as i32, y as i32, &mask) {
                    continue;
                }
                let u = (x as f64 + 0.5 - l) / (r - l);
                if ((u * bars * 2.0).floor() as i64) % 2 == 0 {
                    for c in 0..3 {
                        image.set(x, y, c, bright);
                    }
                }
            }
        }
    }
    // Brick texture: mortar lines in a band.
    if rng.gen_bool(spec.distractors.brick_prob.clamp(0.0, 1.0)) {
        let y1 = bottom - rng.gen_range(0.0..0.3) * road_depth;
        let y0 = y1 - rng.gen_range(0.15..0.35) * road_depth;
        let bh = rng.gen_range(5..9);
        let bw = 2 * bh;
        let dark = rng.gen_range(0.06..0.12);
        for y in y0.max(horizon) as usize..(y1 as usize).min(h) {
            for x in 0..w {
                if !on_road(x as i32, y as i32, &mask) {
                    continue;
                }
                let row = y / bh;
                let offset = if row % 2 == 0 { 0 } else { bw / 2 };
                if y % bh == 0 || (x + offset) % bw == 0 {
                    for c in 0..3 {
                        let v = image.get(x, y, c) - dark;
                        image.set(x, y, c, v);
                    }
                }
            }
        }
    }
    // Soft-edged shadows.
    if rng.gen_bool(spec.distractors.shadow_prob.clamp(0.0, 1.0)) {
        for _ in 0..rng.gen_range(1..3) {
            let cy = bottom - rng.gen_range(0.05..0.6) * road_depth;
            let (l, r) = spec.road_span(cy).expect("below horizon");
            let cx = rng.gen_range(l..r);
            let rx = rng.gen_range(15.0..45.0) * (cy - horizon) / road_depth + 4.0;
            let ry = rx * rng.gen_range(0.2..0.45);
            let depth = rng.gen_range(0.55..0.8);
            for y in (cy - ry).max(0.0) as usize..((cy + ry) as usize + 1).min(h) {
                for x in (cx - rx).max(0.0) as usize..((cx + rx) as usize + 1).min(w) {
                    let d = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                    if d < 1.0 && on_road(x as i32, y as i32, &mask) {
                        let f = depth + (1.0 - depth) * d.powi(3);
                        for c in 0..3 {
                            let v = image.get(x, y, c) * f;
                            image.set(x, y, c, v);
                        }
                    }
                }
            }
        }
    }

    let planned = plan_obstacles(spec, &mut rng, &mask)?;
    let mut boxes = Vec::with_capacity(planned.len());
    for p in &planned {
        let base = [
            image.get((p.bbox.x + p.bbox.w / 2) as usize, (p.bbox.bottom() + 1).min(h as i32 - 1) as usize, 0),
            image.get((p.bbox.x + p.bbox.w / 2) as usize, (p.bbox.bottom() + 1).min(h as i32 - 1) as usize, 1),
            image.get((p.bbox.x + p.bbox.w / 2) as usize, (p.bbox.bottom() + 1).min(h as i32 - 1) as usize, 2),
        ];
        // random direction in RGB, biased away from pure gray shifts
        let mut dir = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
        let lum = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        dir.iter_mut().for_each(|d| *d += lum);
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
        let mut color = [0.0; 3];
        for c in 0..3 {
            color[c] = (base[c] + p.contrast * dir[c] / norm).clamp(0.02, 0.98);
        }
        let mut drawn: Option<BBox> = None;
        for y in p.bbox.y..p.bbox.bottom() {
            for x in p.bbox.x..p.bbox.right() {
                if !inside_shape(p.shape, &p.bbox, x, y) {
                    continue;
                }
                let top_light = 0.04 * (1.0 - (y - p.bbox.y) as f64 / p.bbox.h as f64);
                for c in 0..3 {
                    image.set(x as usize, y as usize, c, color[c] + top_light);
                }
                mask.set(x as usize, y as usize, label::OBSTACLE);
                let px = BBox::new(x, y, 1, 1);
                drawn = Some(drawn.map_or(px, |d| d.union(&px)));
            }
        }
        boxes.push(drawn.expect("obstacle covers at least one pixel"));
    }

    if spec.noise > 0.0 {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = image.get(x, y, c) + noise.sample(&mut rng);
                    image.set(x, y, c, v);
                }
            }
        }
    }
    Ok(Scene { image, mask, boxes })
}

fn plan_obstacles(spec: &SceneSpec, rng: &mut ChaCha8Rng, mask: &Mask) -> Result<Vec<Planned>> {
    let o = &spec.obstacles;
    let horizon = spec.horizon_row();
    let h = spec.height as f64;
    let shapes = [Shape::Rect, Shape::Ellipse, Shape::Trapezoid];

    let mut wanted: Vec<Placement> = o.placements.clone();
    if wanted.is_empty() {
        let count = rng.gen_range(o.count.0..=o.count.1.max(o.count.0));
        // farthest usable center: a few pixels below the horizon
        let d_max = h - horizon - 0.7 * o.near_height / (1.0 + o.beta * (h - horizon)) - 3.0;
        let d_tiny = ((o.near_height / o.tiny_height as f64 - 1.0) / o.beta).max(0.0);
        for i in 0..count {
            let tiny = i < o.min_far_tiny;
            let d = if tiny {
                if d_tiny > d_max {
                    return Err(Error::Data("scene too shallow for far-tiny obstacles".into()));
                }
                rng.gen_range(d_tiny + 1.0..=d_max.max(d_tiny + 1.0))
            } else {
                rng.gen_range(o.near_height * 0.6..=d_max)
            };
            let low = tiny && rng.gen_bool(o.far_low_contrast_prob.clamp(0.0, 1.0));
            let range = if low { o.low_contrast } else { o.contrast };
            wanted.push(Placement {
                d_bottom: d,
                across: rng.gen_range(0.12..0.88),
                aspect: rng.gen_range(o.aspect.0..=o.aspect.1),
                contrast: rng.gen_range(range.0..=range.1),
            });
        }
    }

    let mut out: Vec<Planned> = Vec::new();
    for p in wanted {
        let mut placed = false;
        for attempt in 0..60 {
            let across = if attempt == 0 { p.across } else { rng.gen_range(0.1..0.9) };
            let oh = obstacle_height(o.near_height, o.beta, p.d_bottom).round().max(3.0);
            let ow = (oh * p.aspect).round().max(3.0);
            let cy = h - p.d_bottom;
            let Some((l, r)) = spec.road_span(cy) else { break };
            let cx = l + across * (r - l);
            let b = BBox::new((cx - ow / 2.0).round() as i32, (cy - oh / 2.0).round() as i32, ow as i32, oh as i32);
            let fits = (b.y..b.bottom()).all(|y| {
                [b.x - 1, b.right()].iter().all(|&x| {
                    x >= 0 && y >= 0 && (x as usize) < spec.width && (y as usize) < spec.height && mask.get(x as usize, y as usize) == label::ROAD
                })
            }) && b.bottom() < spec.height as i32;
            let clear = out.iter().all(|q| q.bbox.expand(4).intersect(&b).is_none());
            if fits && clear {
                out.push(Planned {
                    bbox: b,
                    shape: shapes[rng.gen_range(0..shapes.len())],
                    contrast: p.contrast,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!("could not place obstacle at d_bottom={}", p.d_bottom)));
        }
    }
    Ok(out)
}
