//! Lateral connections: edge-guided superpixels per layer and the atomic
//! edges between adjacent superpixels.
//!
//! Segmentation starts from single pixels and greedily merges the adjacent
//! pair whose merge cost is lowest until `target_count` regions remain. The
//! cost adds the Ward increase of color and (compactness-weighted) position
//! scatter to the enhanced-edge mass lying on the shared boundary, so
//! boundaries with strong edge evidence survive longest. A short
//! reassignment pass then moves boundary pixels to the neighbor that best
//! explains them without breaking 4-connectivity.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::EdgeMap;
use crate::error::{Error, Result};
use crate::raster::{BBox, Raster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelParams {
    /// Pixels per superpixel used for the default count.
    pub cell_area: usize,
    pub min_count: usize,
    pub max_count: usize,
    /// Weight of the boundary edge mass in the merge cost.
    pub edge_weight: f64,
    /// Weight of spatial scatter relative to color scatter.
    pub compactness: f64,
    /// Boundary reassignment sweeps after merging.
    pub refine_iterations: usize,
}

impl Default for SuperpixelParams {
    fn default() -> Self {
        Self {
            cell_area: 400,
            min_count: 16,
            max_count: 4096,
            edge_weight: 0.5,
            compactness: 0.02,
            refine_iterations: 2,
        }
    }
}

impl SuperpixelParams {
    /// `area / cell_area` clamped to `[min_count, max_count]` and to the
    /// pixel count.
    pub fn target_count(&self, region: &BBox) -> usize {
        let area = region.area() as usize;
        (area / self.cell_area.max(1))
            .clamp(self.min_count, self.max_count)
            .min(area)
    }
}

/// Superpixel id per pixel of a region; ids are `0..count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelLabels {
    pub region: BBox,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl SuperpixelLabels {
    #[inline]
    pub fn at(&self, x: i32, y: i32) -> u32 {
        self.labels[((y - self.region.y) * self.region.w + (x - self.region.x)) as usize]
    }

    #[inline]
    pub fn local(&self, lx: usize, ly: usize) -> u32 {
        self.labels[ly * self.region.w as usize + lx]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &l in &self.labels {
            s[l as usize] += 1;
        }
        s
    }

    /// Pixels whose right or lower neighbor carries a different label.
    pub fn boundary_pixels(&self) -> Vec<(i32, i32)> {
        let (w, h) = (self.region.w as usize, self.region.h as usize);
        let mut out = Vec::new();
        for ly in 0..h {
            for lx in 0..w {
                let l = self.local(lx, ly);
                if (lx + 1 < w && self.local(lx + 1, ly) != l) || (ly + 1 < h && self.local(lx, ly + 1) != l) {
                    out.push((lx as i32 + self.region.x, ly as i32 + self.region.y));
                }
            }
        }
        out
    }

    /// Every id is used and every id's pixels are 4-connected.
    pub fn is_valid_partition(&self) -> bool {
        let (w, h) = (self.region.w as usize, self.region.h as usize);
        let sizes = self.sizes();
        if sizes.iter().any(|&s| s == 0) {
            return false;
        }
        let mut seen = vec![false; w * h];
        let mut components = 0;
        for start in 0..w * h {
            if seen[start] {
                continue;
            }
            components += 1;
            let l = self.labels[start];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if !seen[j] && self.labels[j] == l {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
        }
        components == self.count
    }
}

#[derive(Clone, Copy, Debug)]
struct Region {
    n: f64,
    color: [f64; 3],
    sx: f64,
    sy: f64,
    version: u32,
    alive: bool,
}

impl Region {
    fn mean(&self) -> [f64; 3] {
        [self.color[0] / self.n, self.color[1] / self.n, self.color[2] / self.n]
    }
}

#[derive(Clone, Copy, Debug)]
struct Link {
    other: u32,
    edge_mass: f64,
}

struct Candidate {
    cost: f64,
    a: u32,
    b: u32,
    va: u32,
    vb: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Candidate {
    // min-heap on (cost, a, b)
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost
            .total_cmp(&self.cost)
            .then(o.a.cmp(&self.a))
            .then(o.b.cmp(&self.b))
    }
}

fn pixel_color(img: &Raster, x: usize, y: usize) -> [f64; 3] {
    if img.channels() == 1 {
        let v = img.get(x, y, 0);
        [v, v, v]
    } else {
        let p = img.pixel(x, y);
        [p[0], p[1], p[2]]
    }
}

/// Segments `enhanced.region` of `img` into `target_count` superpixels.
pub fn segment(
    img: &Raster,
    enhanced: &EdgeMap,
    target_count: usize,
    seed: u64,
    params: &SuperpixelParams,
) -> Result<SuperpixelLabels> {
    let region = enhanced.region;
    if !img.bounds().contains(&region) {
        return Err(Error::contract("superpixel region outside image"));
    }
    let (w, h) = (region.w as usize, region.h as usize);
    let n = w * h;
    if target_count < 2 || target_count > n {
        return Err(Error::contract(format!("superpixel target {target_count} outside 2..={n}")));
    }
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|i| pixel_color(img, region.x as usize + i % w, region.y as usize + i / w))
        .collect();
    let edge = &enhanced.values;
    let pair_edge = |i: usize, j: usize| edge[i].max(edge[j]);

    let mut regions: Vec<Region> = (0..n)
        .map(|i| Region {
            n: 1.0,
            color: colors[i],
            sx: (i % w) as f64,
            sy: (i / w) as f64,
            version: 0,
            alive: true,
        })
        .collect();
    let mut links: Vec<Vec<Link>> = vec![Vec::with_capacity(4); n];
    for i in 0..n {
        let (x, y) = (i % w, i / w);
        if x + 1 < w {
            let m = pair_edge(i, i + 1);
            links[i].push(Link { other: (i + 1) as u32, edge_mass: m });
            links[i + 1].push(Link { other: i as u32, edge_mass: m });
        }
        if y + 1 < h {
            let m = pair_edge(i, i + w);
            links[i].push(Link { other: (i + w) as u32, edge_mass: m });
            links[i + w].push(Link { other: i as u32, edge_mass: m });
        }
    }

    let s2 = n as f64 / target_count as f64;
    let cost = |a: &Region, b: &Region, edge_mass: f64| {
        let ma = a.mean();
        let mb = b.mean();
        let dc = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + (ma[2] - mb[2]).powi(2);
        let ds = (a.sx / a.n - b.sx / b.n).powi(2) + (a.sy / a.n - b.sy / b.n).powi(2);
        let ward = a.n * b.n / (a.n + b.n);
        ward * (dc + params.compactness * ds / s2) + params.edge_weight * edge_mass
    };

    let mut heap = BinaryHeap::with_capacity(2 * n);
    for (a, ls) in links.iter().enumerate() {
        for l in ls {
            if (a as u32) < l.other {
                heap.push(Candidate {
                    cost: cost(&regions[a], &regions[l.other as usize], l.edge_mass),
                    a: a as u32,
                    b: l.other,
                    va: 0,
                    vb: 0,
                });
            }
        }
    }

    let mut parent: Vec<u32> = (0..n as u32).collect();
    let mut alive = n;
    while alive > target_count {
        let Some(c) = heap.pop() else { break };
        let (a, b) = (c.a as usize, c.b as usize);
        if !regions[a].alive || !regions[b].alive || regions[a].version != c.va || regions[b].version != c.vb {
            continue;
        }
        // survivor keeps the longer adjacency list
        let (keep, gone) = if links[a].len() >= links[b].len() { (a, b) } else { (b, a) };
        let g = regions[gone];
        {
            let r = &mut regions[keep];
            r.n += g.n;
            for ch in 0..3 {
                r.color[ch] += g.color[ch];
            }
            r.sx += g.sx;
            r.sy += g.sy;
            r.version += 1;
        }
        regions[gone].alive = false;
        parent[gone] = keep as u32;
        alive -= 1;

        let gone_links = std::mem::take(&mut links[gone]);
        links[keep].retain(|l| l.other as usize != gone);
        for gl in gone_links {
            let other = gl.other as usize;
            if other == keep {
                continue;
            }
            match links[keep].iter_mut().find(|l| l.other as usize == other) {
                Some(l) => l.edge_mass += gl.edge_mass,
                None => links[keep].push(Link { other: other as u32, edge_mass: gl.edge_mass }),
            }
            let ol = &mut links[other];
            ol.retain(|l| l.other as usize != gone);
            match ol.iter_mut().find(|l| l.other as usize == keep) {
                Some(l) => l.edge_mass += gl.edge_mass,
                None => ol.push(Link { other: keep as u32, edge_mass: gl.edge_mass }),
            }
        }
        for l in &links[keep] {
            let o = l.other as usize;
            let (lo, hi) = if keep < o { (keep, o) } else { (o, keep) };
            heap.push(Candidate {
                cost: cost(&regions[lo], &regions[hi], l.edge_mass),
                a: lo as u32,
                b: hi as u32,
                va: regions[lo].version,
                vb: regions[hi].version,
            });
        }
    }

    let labels: Vec<u32> = (0..n).map(|i| find(&mut parent, i as u32)).collect();
    let mut out = relabel(region, labels);
    refine(&mut out, &colors, edge, params, seed);
    Ok(out)
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    let mut root = i;
    while parent[root as usize] != root {
        root = parent[root as usize];
    }
    while parent[i as usize] != root {
        let next = parent[i as usize];
        parent[i as usize] = root;
        i = next;
    }
    root
}

/// Renumbers labels `0..count` in scan order of first appearance.
fn relabel(region: BBox, labels: Vec<u32>) -> SuperpixelLabels {
    let mut map: HashMap<u32, u32> = HashMap::new();
    let mut next = 0u32;
    let labels: Vec<u32> = labels
        .into_iter()
        .map(|l| {
            *map.entry(l).or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    SuperpixelLabels {
        region,
        labels,
        count: next as usize,
    }
}

/// Whether removing pixel `(x, y)` from its label keeps the label's
/// remaining pixels locally 4-connected.
fn removable(labels: &[u32], w: usize, h: usize, x: usize, y: usize) -> bool {
    let l = labels[y * w + x];
    // ring: N, NE, E, SE, S, SW, W, NW
    const RING: [(isize, isize); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];
    let mut same = [false; 8];
    for (k, (dx, dy)) in RING.iter().enumerate() {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        same[k] = nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize && labels[ny as usize * w + nx as usize] == l;
    }
    if !(same[0] || same[2] || same[4] || same[6]) {
        // isolated single pixel of its label
        return false;
    }
    // count cyclic runs of `same` that contain an edge (even) position
    let mut runs_with_edge = 0;
    let start = match (0..8).find(|&k| !same[k]) {
        Some(s) => s,
        None => return true,
    };
    let mut k = (start + 1) % 8;
    let mut in_run = false;
    let mut run_has_edge = false;
    for _ in 0..8 {
        if same[k] {
            if !in_run {
                in_run = true;
                run_has_edge = false;
            }
            if k % 2 == 0 {
                run_has_edge = true;
            }
        } else if in_run {
            in_run = false;
            if run_has_edge {
                runs_with_edge += 1;
            }
        }
        k = (k + 1) % 8;
    }
    if in_run && run_has_edge {
        runs_with_edge += 1;
    }
    runs_with_edge <= 1
}

fn refine(sp: &mut SuperpixelLabels, colors: &[[f64; 3]], edge: &[f64], params: &SuperpixelParams, seed: u64) {
    if params.refine_iterations == 0 {
        return;
    }
    let (w, h) = (sp.region.w as usize, sp.region.h as usize);
    let k = sp.count;
    let mut sum = vec![[0.0f64; 3]; k];
    let mut cnt = vec![0.0f64; k];
    for (i, &l) in sp.labels.iter().enumerate() {
        for c in 0..3 {
            sum[l as usize][c] += colors[i][c];
        }
        cnt[l as usize] += 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neighbors = |i: usize| {
        let (x, y) = (i % w, i / w);
        let mut v = [usize::MAX; 4];
        if x > 0 {
            v[0] = i - 1;
        }
        if x + 1 < w {
            v[1] = i + 1;
        }
        if y > 0 {
            v[2] = i - w;
        }
        if y + 1 < h {
            v[3] = i + w;
        }
        v
    };
    for _ in 0..params.refine_iterations {
        let mut boundary: Vec<usize> = (0..w * h)
            .filter(|&i| neighbors(i).iter().any(|&j| j != usize::MAX && sp.labels[j] != sp.labels[i]))
            .collect();
        boundary.shuffle(&mut rng);
        let mut moved = 0usize;
        for i in boundary {
            let own = sp.labels[i] as usize;
            if cnt[own] <= 1.0 {
                continue;
            }
            let nb = neighbors(i);
            let label_cost = |l: usize| {
                let m = [sum[l][0] / cnt[l], sum[l][1] / cnt[l], sum[l][2] / cnt[l]];
                let dc = (colors[i][0] - m[0]).powi(2) + (colors[i][1] - m[1]).powi(2) + (colors[i][2] - m[2]).powi(2);
                let cut: f64 = nb
                    .iter()
                    .filter(|&&j| j != usize::MAX && sp.labels[j] as usize != l)
                    .map(|&j| 1.0 - edge[i].max(edge[j]))
                    .sum();
                dc + params.edge_weight * cut / 4.0
            };
            let mut best = (own, label_cost(own));
            for &j in nb.iter().filter(|&&j| j != usize::MAX) {
                let l = sp.labels[j] as usize;
                if l == best.0 || l == own {
                    continue;
                }
                let c = label_cost(l);
                if c < best.1 - 1e-12 {
                    best = (l, c);
                }
            }
            if best.0 != own && removable(&sp.labels, w, h, i % w, i / w) {
                for c in 0..3 {
                    sum[own][c] -= colors[i][c];
                    sum[best.0][c] += colors[i][c];
                }
                cnt[own] -= 1.0;
                cnt[best.0] += 1.0;
                sp.labels[i] = best.0 as u32;
                moved += 1;
            }
        }
        if moved == 0 {
            break;
        }
    }
}

/// A maximal boundary segment between one pair of adjacent superpixels.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicEdge {
    /// Boundary pixels in global coordinates, ordered along the segment.
    pub pixels: Vec<(i32, i32)>,
    /// Superpixel ids, `pair.0 < pair.1`.
    pub pair: (u32, u32),
    /// Zero-based layer index.
    pub layer: usize,
}

/// Splits the label boundary into one chain per adjacent pair and
/// 8-connected segment.
///
/// A pixel belongs to the boundary of pair `(a, b)` when it carries one of
/// the labels and its right or lower neighbor carries the other, so a
/// straight cut yields a one-pixel-wide chain.
pub fn atomic_edges(labels: &SuperpixelLabels, layer: usize) -> Vec<AtomicEdge> {
    let (w, h) = (labels.region.w as usize, labels.region.h as usize);
    let mut by_pair: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for ly in 0..h {
        for lx in 0..w {
            let i = ly * w + lx;
            let l = labels.labels[i];
            let mut push = |o: u32| {
                let key = (l.min(o), l.max(o));
                let v = by_pair.entry(key).or_default();
                if v.last() != Some(&i) {
                    v.push(i);
                }
            };
            if lx + 1 < w && labels.labels[i + 1] != l {
                push(labels.labels[i + 1]);
            }
            if ly + 1 < h && labels.labels[i + w] != l {
                let o = labels.labels[i + w];
                push(o);
            }
        }
    }
    let mut pairs: Vec<_> = by_pair.into_iter().collect();
    pairs.sort_unstable_by_key(|(k, _)| *k);

    let mut mark = vec![u32::MAX; w * h];
    let mut out = Vec::new();
    for (pair_idx, (pair, pixels)) in pairs.into_iter().enumerate() {
        let tag = pair_idx as u32;
        for &i in &pixels {
            mark[i] = tag;
        }
        let mut taken = vec![false; pixels.len()];
        let pos: HashMap<usize, usize> = pixels.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        for start_k in 0..pixels.len() {
            if taken[start_k] {
                continue;
            }
            // 8-connected component of this pair's pixels
            let mut comp = Vec::new();
            let mut stack = vec![pixels[start_k]];
            taken[start_k] = true;
            while let Some(i) = stack.pop() {
                comp.push(i);
                for j in neighbors8(i, w, h) {
                    if mark[j] == tag {
                        let k = pos[&j];
                        if !taken[k] {
                            taken[k] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            let chain = order_chain(&comp, w, h, &mark, tag);
            out.push(AtomicEdge {
                pixels: chain
                    .into_iter()
                    .map(|i| ((i % w) as i32 + labels.region.x, (i / w) as i32 + labels.region.y))
                    .collect(),
                pair,
                layer,
            });
        }
        for &i in &pixels {
            mark[i] = u32::MAX;
        }
    }
    out
}

fn neighbors8(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((i % w) as isize, (i / w) as isize);
    // 4-neighbors first so chain walks prefer them
    const OFF: [(isize, isize); 8] = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)];
    OFF.into_iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize).then(|| ny as usize * w + nx as usize)
    })
}

/// Orders a connected pixel set into a walk: start at the member with the
/// fewest in-set neighbors, step to an unvisited neighbor while possible,
/// otherwise jump to the nearest unvisited member.
fn order_chain(comp: &[usize], w: usize, h: usize, mark: &[u32], tag: u32) -> Vec<usize> {
    if comp.len() == 1 {
        return comp.to_vec();
    }
    let mut sorted = comp.to_vec();
    sorted.sort_unstable();
    let degree = |i: usize| neighbors8(i, w, h).filter(|&j| mark[j] == tag).count();
    let start = *sorted.iter().min_by_key(|&&i| (degree(i), i)).expect("non-empty");
    let mut visited: HashMap<usize, bool> = sorted.iter().map(|&i| (i, false)).collect();
    let mut chain = Vec::with_capacity(sorted.len());
    let mut cur = start;
    loop {
        visited.insert(cur, true);
        chain.push(cur);
        if chain.len() == sorted.len() {
            break;
        }
        let next = neighbors8(cur, w, h).find(|j| visited.get(j) == Some(&false));
        cur = match next {
            Some(n) => n,
            None => {
                let (cx, cy) = ((cur % w) as isize, (cur / w) as isize);
                *sorted
                    .iter()
                    .filter(|i| !visited[i])
                    .min_by_key(|&&i| (((i % w) as isize - cx).abs() + ((i / w) as isize - cy).abs(), i))
                    .expect("unvisited member remains")
            }
        };
    }
    chain
}
