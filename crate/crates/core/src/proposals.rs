//! Box proposals scored against occlusion edge maps.
//!
//! Occlusion pixels are grouped into smooth chains. A box scores the strength
//! of the groups it fully contains minus the groups crossing its border,
//! normalized by perimeter.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occlusion::OcclusionEdgeMap;
use crate::raster::{label, BBox, IntegralMap, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// Zero-based origin layer.
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    pub budget: usize,
    pub nms_iou: f64,
    pub kappa: f64,
    pub eta: f64,
    /// Occlusion pixels at or below this value are not grouped.
    pub group_min: f64,
    pub component_threshold: f64,
    pub scales: Vec<i32>,
    pub aspects: Vec<f64>,
    pub stride: f64,
    pub dilations: Vec<f64>,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            budget: 1000,
            nms_iou: 0.8,
            kappa: 1.5,
            eta: 1.0,
            group_min: 0.1,
            component_threshold: 0.3,
            scales: vec![16, 24, 32, 48, 64, 96, 128],
            aspects: vec![0.5, 1.0, 2.0],
            stride: 0.25,
            dilations: vec![1.0, 1.2, 1.5],
        }
    }
}

/// A smooth chain of occlusion pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGroup {
    pub pixels: Vec<(i32, i32)>,
    pub strength: f64,
    pub bbox: BBox,
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Local edge orientation in `[0, pi)` from the spread of nearby edge pixels.
fn orientations(on: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if !on[y * w + x] {
                continue;
            }
            let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for yy in y.saturating_sub(2)..(y + 3).min(h) {
                for xx in x.saturating_sub(2)..(x + 3).min(w) {
                    if on[yy * w + xx] {
                        let (fx, fy) = (xx as f64, yy as f64);
                        n += 1.0;
                        sx += fx;
                        sy += fy;
                        sxx += fx * fx;
                        syy += fy * fy;
                        sxy += fx * fy;
                    }
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let (cxx, cyy, cxy) = (sxx / n - mx * mx, syy / n - my * my, sxy / n - mx * my);
            out[y * w + x] = (0.5 * (2.0 * cxy).atan2(cxx - cyy)).rem_euclid(PI);
        }
    }
    out
}

/// Groups occlusion pixels into 8-connected chains whose accumulated
/// orientation change stays below a right angle.
pub fn edge_groups(occ: &OcclusionEdgeMap, min_value: f64) -> Vec<EdgeGroup> {
    let r = occ.region;
    let (w, h) = (r.w as usize, r.h as usize);
    let on: Vec<bool> = occ.values.iter().map(|&v| v > min_value).collect();
    let theta = orientations(&on, w, h);
    let mut group = vec![usize::MAX; w * h];
    let mut out = Vec::new();
    let mut cost = vec![f64::INFINITY; w * h];
    for start in 0..w * h {
        if !on[start] || group[start] != usize::MAX {
            continue;
        }
        let gid = out.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        group[start] = gid;
        cost[start] = 0.0;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !on[j] || group[j] != usize::MAX {
                        continue;
                    }
                    let c = cost[i] + angle_diff(theta[i], theta[j]);
                    if c < FRAC_PI_2 {
                        group[j] = gid;
                        cost[j] = c;
                        queue.push_back(j);
                    }
                }
            }
        }
        members.sort_unstable();
        let pixels: Vec<(i32, i32)> = members.iter().map(|&i| ((i % w) as i32 + r.x, (i / w) as i32 + r.y)).collect();
        let strength = members.iter().map(|&i| occ.values[i]).sum();
        let bbox = pixels
            .iter()
            .map(|&(x, y)| BBox::new(x, y, 1, 1))
            .reduce(|a, b| a.union(&b))
            .expect("group has a seed pixel");
        out.push(EdgeGroup { pixels, strength, bbox });
    }
    out
}

/// Edge groups bucketed on a coarse grid for fast box queries.
pub struct GroupIndex {
    groups: Vec<EdgeGroup>,
    region: BBox,
    cell: i32,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl GroupIndex {
    pub fn new(groups: Vec<EdgeGroup>, region: BBox) -> Self {
        let cell = 16;
        let cols = ((region.w + cell - 1) / cell).max(1) as usize;
        let rows = ((region.h + cell - 1) / cell).max(1) as usize;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (gi, g) in groups.iter().enumerate() {
            let (c0, r0, c1, r1) = Self::span(region, cell, cols, rows, &g.bbox);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    buckets[row * cols + col].push(gi);
                }
            }
        }
        Self { groups, region, cell, cols, rows, buckets }
    }

    fn span(region: BBox, cell: i32, cols: usize, rows: usize, b: &BBox) -> (usize, usize, usize, usize) {
        let cl = |v: i32, n: usize| (v.max(0) / cell).min(n as i32 - 1) as usize;
        (
            cl(b.x - region.x, cols),
            cl(b.y - region.y, rows),
            cl(b.right() - 1 - region.x, cols),
            cl(b.bottom() - 1 - region.y, rows),
        )
    }

    pub fn groups(&self) -> &[EdgeGroup] {
        &self.groups
    }

    /// Sums of group strengths fully inside `b` and straddling its border.
    pub fn inside_straddling(&self, b: &BBox) -> (f64, f64) {
        let Some(q) = b.intersect(&self.region) else { return (0.0, 0.0) };
        let (c0, r0, c1, r1) = Self::span(self.region, self.cell, self.cols, self.rows, &q);
        let mut seen: Vec<usize> = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                seen.extend_from_slice(&self.buckets[row * self.cols + col]);
            }
        }
        seen.sort_unstable();
        seen.dedup();
        let (mut inside, mut straddle) = (0.0, 0.0);
        for gi in seen {
            let g = &self.groups[gi];
            if b.contains(&g.bbox) {
                inside += g.strength;
            } else if g.bbox.intersect(b).is_some() {
                let n_in = g.pixels.iter().filter(|&&(x, y)| b.contains_point(x, y)).count();
                if n_in > 0 {
                    straddle += g.strength;
                }
            }
        }
        (inside, straddle)
    }
}

/// Objectness of `b`; never negative.
pub fn score_box(b: &BBox, index: &GroupIndex, params: &ProposalParams) -> f64 {
    let (inside, straddle) = index.inside_straddling(b);
    let perimeter = 2.0 * (b.w + b.h) as f64;
    ((inside - params.eta * straddle) / perimeter.powf(params.kappa)).max(0.0)
}

/// A source of candidate boxes for one occlusion map.
pub trait CandidateSource: Send + Sync {
    fn name(&self) -> &'static str;
    fn candidates(&self, occ: &OcclusionEdgeMap, params: &ProposalParams) -> Vec<BBox>;
}

/// Dense multi-scale sliding windows.
pub struct SlidingWindows;

impl CandidateSource for SlidingWindows {
    fn name(&self) -> &'static str {
        "sliding"
    }

    fn candidates(&self, occ: &OcclusionEdgeMap, params: &ProposalParams) -> Vec<BBox> {
        let r = occ.region;
        let mut out = Vec::new();
        for &s in &params.scales {
            for &a in &params.aspects {
                let bw = (s as f64 * a.sqrt()).round().max(1.0) as i32;
                let bh = (s as f64 / a.sqrt()).round().max(1.0) as i32;
                if bw > r.w || bh > r.h {
                    continue;
                }
                let sx = ((bw as f64 * params.stride).round() as i32).max(1);
                let sy = ((bh as f64 * params.stride).round() as i32).max(1);
                let mut y = r.y;
                while y + bh <= r.bottom() {
                    let mut x = r.x;
                    while x + bw <= r.right() {
                        out.push(BBox::new(x, y, bw, bh));
                        x += sx;
                    }
                    y += sy;
                }
            }
        }
        out
    }
}

/// Bounding boxes of thresholded occlusion components at several dilations.
pub struct Components;

impl CandidateSource for Components {
    fn name(&self) -> &'static str {
        "components"
    }

    fn candidates(&self, occ: &OcclusionEdgeMap, params: &ProposalParams) -> Vec<BBox> {
        let r = occ.region;
        let (w, h) = (r.w as usize, r.h as usize);
        let on: Vec<bool> = occ.values.iter().map(|&v| v > params.component_threshold).collect();
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            if !on[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let j = yy * w + xx;
                        if on[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            let b = BBox::from_corners(x0 as i32 + r.x, y0 as i32 + r.y, x1 as i32 + 1 + r.x, y1 as i32 + 1 + r.y);
            for &f in &params.dilations {
                if let Some(c) = b.scale(f).intersect(&r) {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Greedy non-maximum suppression over proposals sorted by descending score.
pub fn nms(sorted: Vec<Proposal>, iou: f64, budget: usize) -> Vec<Proposal> {
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.len() >= budget {
            break;
        }
        if kept.iter().all(|k| k.bbox.iou(&p.bbox) <= iou) {
            kept.push(p);
        }
    }
    kept
}

fn by_score_desc(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.objectness.total_cmp(&a.objectness).then_with(|| a.bbox.cmp(&b.bbox))
}

/// Proposals of one layer, at most `params.budget`, by descending objectness.
pub fn extract(occ: &OcclusionEdgeMap, layer: usize, sources: &[&dyn CandidateSource], params: &ProposalParams) -> Result<Vec<Proposal>> {
    if params.budget == 0 {
        return Err(Error::contract("proposal budget must be at least 1"));
    }
    let index = GroupIndex::new(edge_groups(occ, params.group_min), occ.region);
    if index.groups().is_empty() {
        return Ok(Vec::new());
    }
    let mut boxes: Vec<BBox> = sources.iter().flat_map(|s| s.candidates(occ, params)).collect();
    boxes.sort_unstable();
    boxes.dedup();
    let mut props: Vec<Proposal> = boxes
        .par_iter()
        .filter_map(|b| {
            let s = score_box(b, &index, params);
            (s > 0.0).then_some(Proposal { bbox: *b, objectness: s, layer })
        })
        .collect();
    props.sort_by(by_score_desc);
    Ok(nms(props, params.nms_iou, params.budget))
}

/// Concatenates per-layer proposal lists.
pub fn merge(layers: Vec<Vec<Proposal>>) -> Vec<Proposal> {
    layers.into_iter().flatten().collect()
}

/// Keeps proposals mostly inside the road region; with ground truth, also
/// drops those whose labeled pixels are mostly non-road.
pub fn filter_road(props: &[Proposal], road_region: &BBox, gt: Option<&Mask>, min_inside: f64) -> Vec<Proposal> {
    let non_road = gt.map(|m| {
        (
            IntegralMap::from_fn(m.width(), m.height(), |x, y| (m.get(x, y) == label::NON_ROAD) as u8 as f64),
            IntegralMap::from_fn(m.width(), m.height(), |x, y| (m.get(x, y) != label::IGNORE) as u8 as f64),
        )
    });
    props
        .iter()
        .filter(|p| {
            let area = p.bbox.area();
            if area <= 0 || (p.bbox.intersection_area(road_region) as f64) < min_inside * area as f64 {
                return false;
            }
            match &non_road {
                Some((nr, valid)) => nr.box_sum(&p.bbox) * 2.0 <= valid.box_sum(&p.bbox),
                None => true,
            }
        })
        .copied()
        .collect()
}
