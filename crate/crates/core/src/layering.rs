//! Near-to-far pathway: cluster training obstacles by pseudo distance and
//! turn the clusters into nested image regions `R_1 ⊇ R_2 ⊇ … ⊇ R_K`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BBox;

/// A ground-truth obstacle box from the training annotations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObstacleAnnotation {
    pub image_id: String,
    pub bbox: BBox,
}

/// 2D proxy for metric distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoDistance {
    /// Distance in pixels from the box center to the image bottom.
    pub d_bottom: f64,
    /// Box pixel count.
    pub area: f64,
}

pub fn pseudo_distance(b: &BBox, image_height: usize) -> PseudoDistance {
    PseudoDistance {
        d_bottom: image_height as f64 - (b.y as f64 + b.h as f64 / 2.0),
        area: b.area() as f64,
    }
}

#[derive(Clone, Debug)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            restarts: 8,
        }
    }
}

/// Cluster assignment of the training obstacles, re-indexed so that mean
/// `d_bottom` increases with the cluster index (cluster `K-1` is farthest).
/// Empty clusters sort last.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl Clustering {
    pub fn subset_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Items of each cluster, in input order.
    pub fn subsets<T: Clone>(&self, items: &[T]) -> Vec<Vec<T>> {
        let mut out = vec![Vec::new(); self.k];
        for (item, &a) in items.iter().zip(&self.assignment) {
            out[a].push(item.clone());
        }
        out
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centers: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// One seeded k-means++ run; returns (assignment, inertia).
fn kmeans_run(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng, params: &KMeansParams) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)]];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(*p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // fewer distinct points than clusters; the rest stay empty
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.push(points[pick]);
    }
    // Unseeded clusters park at infinity so they never win an assignment.
    while centers.len() < k {
        centers.push([f64::INFINITY, f64::INFINITY]);
    }

    let mut assignment = vec![0; n];
    for _ in 0..params.max_iter {
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(*p, &centers).0;
        }
        let mut sums = vec![[0.0, 0.0]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignment.iter().zip(points) {
            sums[*a][0] += p[0];
            sums[*a][1] += p[1];
            counts[*a] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let next = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            shift = shift.max(sq_dist(next, centers[c]).sqrt());
            centers[c] = next;
        }
        if shift < params.tol {
            break;
        }
    }
    for (a, p) in assignment.iter_mut().zip(points) {
        *a = nearest(*p, &centers).0;
    }
    let inertia = assignment.iter().zip(points).map(|(a, p)| sq_dist(*p, centers[*a])).sum();
    (assignment, inertia)
}

/// k-means over z-scored `(d_bottom, area)`.
///
/// Points are put in a canonical value order before seeding, so the result
/// does not depend on the order of the input list.
pub fn cluster_obstacles(distances: &[PseudoDistance], k: usize, seed: u64, params: &KMeansParams) -> Result<Clustering> {
    let n = distances.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("cluster count K={k} must be in 1..={n}")));
    }
    let stats = |f: fn(&PseudoDistance) -> f64| {
        let mean = distances.iter().map(f).sum::<f64>() / n as f64;
        let var = distances.iter().map(|d| (f(d) - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
    };
    let (m0, s0) = stats(|d| d.d_bottom);
    let (m1, s1) = stats(|d| d.area);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        distances[a]
            .d_bottom
            .total_cmp(&distances[b].d_bottom)
            .then(distances[a].area.total_cmp(&distances[b].area))
    });
    let points: Vec<[f64; 2]> = order
        .iter()
        .map(|&i| [(distances[i].d_bottom - m0) / s0, (distances[i].area - m1) / s1])
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..params.restarts.max(1) {
        let run = kmeans_run(&points, k, &mut rng, params);
        if best.as_ref().map_or(true, |b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let sorted_assignment = best.expect("at least one restart").0;

    // Re-index by mean d_bottom; empty clusters go last.
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (pos, &c) in sorted_assignment.iter().enumerate() {
        sum[c] += distances[order[pos]].d_bottom;
        count[c] += 1;
    }
    let mut rank: Vec<usize> = (0..k).collect();
    rank.sort_by(|&a, &b| {
        let key = |c: usize| if count[c] == 0 { f64::INFINITY } else { sum[c] / count[c] as f64 };
        key(a).total_cmp(&key(b)).then(a.cmp(&b))
    });
    let mut relabel = vec![0; k];
    for (new, &old) in rank.iter().enumerate() {
        relabel[old] = new;
    }
    let mut assignment = vec![0; n];
    for (pos, &c) in sorted_assignment.iter().enumerate() {
        assignment[order[pos]] = relabel[c];
    }
    Ok(Clustering { k, assignment })
}

/// Nested layer regions. `regions[0]` is `R_1` and always equals the road
/// region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub road_region: BBox,
    pub regions: Vec<BBox>,
    /// Zero-based indices of layers whose obstacle subset was empty.
    pub empty_layers: Vec<usize>,
}

impl LayerPartition {
    /// Single layer covering the road region.
    pub fn single(road_region: BBox) -> Self {
        Self {
            road_region,
            regions: vec![road_region],
            empty_layers: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.regions.len()
    }

    /// Number of distinct regions.
    pub fn effective_layers(&self) -> usize {
        1 + self.regions.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn is_nested(&self) -> bool {
        self.road_region.contains(&self.regions[0]) && self.regions.windows(2).all(|w| w[0].contains(&w[1]))
    }
}

/// Builds `R_1..R_K` from the obstacle subsets `O_1..O_K` (nearest first).
///
/// `R_k` is the bounding rectangle of `O_k ∪ … ∪ O_K` grown by `margin`,
/// clipped to the road region and unioned with `R_{k+1}`; `R_1` is the road
/// region itself.
pub fn derive_layers(subsets: &[Vec<BBox>], road_region: BBox, margin: i32) -> Result<LayerPartition> {
    let k = subsets.len();
    if k == 0 {
        return Err(Error::contract("layer partition needs at least one subset"));
    }
    if !road_region.is_valid() {
        return Err(Error::contract("road region must be non-empty"));
    }
    let mut empty_layers = Vec::new();
    let mut tails: Vec<Option<BBox>> = vec![None; k];
    let mut acc: Option<BBox> = None;
    for i in (0..k).rev() {
        if subsets[i].is_empty() {
            log::warn!("layer {} has no training obstacles; it collapses onto its neighbor", i + 1);
            empty_layers.push(i);
        }
        for b in &subsets[i] {
            acc = Some(acc.map_or(*b, |a| a.union(b)));
        }
        tails[i] = acc.and_then(|a| a.expand(margin).intersect(&road_region));
    }
    empty_layers.sort_unstable();

    let mut regions = vec![road_region; k];
    // Layers without any obstacle at or beyond them inherit the shallower region.
    for i in 1..k {
        regions[i] = tails[i].unwrap_or(regions[i - 1]);
    }
    for i in (1..k - 1).rev() {
        regions[i] = regions[i].union(&regions[i + 1]);
    }
    Ok(LayerPartition {
        road_region,
        regions,
        empty_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const H: usize = 240;

    fn band_boxes(rng: &mut ChaCha8Rng, bands: &[(i32, i32)], per: usize) -> (Vec<BBox>, Vec<usize>) {
        // each band: (center row, side length)
        let mut boxes = Vec::new();
        let mut truth = Vec::new();
        for (g, &(cy, side)) in bands.iter().enumerate() {
            for _ in 0..per {
                let x = rng.gen_range(10..200);
                let y = cy - side / 2 + rng.gen_range(-1..=1);
                boxes.push(BBox::new(x, y, side, side));
                truth.push(g);
            }
        }
        (boxes, truth)
    }

    #[test]
    fn pseudo_distance_examples() {
        let p = pseudo_distance(&BBox::new(0, H as i32 - 10, 10, 10), H);
        assert_eq!(p.d_bottom, 5.0);
        assert_eq!(p.area, 100.0);
        let near = pseudo_distance(&BBox::new(0, 200, 8, 8), H);
        let far = pseudo_distance(&BBox::new(0, 150, 8, 8), H);
        assert!(far.d_bottom > near.d_bottom);
    }

    #[test]
    fn single_cluster_is_everything() {
        let d: Vec<_> = (0..5).map(|i| PseudoDistance { d_bottom: i as f64, area: 10.0 }).collect();
        let c = cluster_obstacles(&d, 1, 0, &KMeansParams::default()).unwrap();
        assert!(c.assignment.iter().all(|&a| a == 0));
        assert!(cluster_obstacles(&d, 6, 0, &KMeansParams::default()).is_err());
    }

    #[test]
    fn two_separated_groups_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // near-large vs far-small, separation far beyond 5 sigma of the jitter
        let (boxes, truth) = band_boxes(&mut rng, &[(210, 40), (110, 8)], 12);
        let d: Vec<_> = boxes.iter().map(|b| pseudo_distance(b, H)).collect();
        let c = cluster_obstacles(&d, 2, 11, &KMeansParams::default()).unwrap();
        assert_eq!(c.assignment, truth);
    }

    #[test]
    fn four_bands_ordered_and_contained() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bands = [(220, 30), (180, 20), (140, 12), (110, 7)];
        let (boxes, truth) = band_boxes(&mut rng, &bands, 8);
        let d: Vec<_> = boxes.iter().map(|b| pseudo_distance(b, H)).collect();
        let c = cluster_obstacles(&d, 4, 1, &KMeansParams::default()).unwrap();
        assert_eq!(c.assignment, truth);
        let subsets = c.subsets(&boxes);
        let means: Vec<f64> = subsets
            .iter()
            .map(|s| s.iter().map(|b| pseudo_distance(b, H).d_bottom).sum::<f64>() / s.len() as f64)
            .collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]));

        let road = BBox::new(0, 90, 320, 150);
        let lp = derive_layers(&subsets, road, 10).unwrap();
        assert!(lp.is_nested());
        for (k, s) in subsets.iter().enumerate() {
            for b in s {
                for r in &lp.regions[..=k] {
                    assert!(r.contains(b), "{b:?} not in {r:?}");
                }
            }
        }
    }

    #[test]
    fn k1_layer_is_road() {
        let road = BBox::new(5, 50, 100, 60);
        let lp = derive_layers(&[vec![BBox::new(10, 60, 5, 5)]], road, 10).unwrap();
        assert_eq!(lp.regions, vec![road]);
    }

    #[test]
    fn empty_subset_collapses() {
        let road = BBox::new(0, 0, 100, 100);
        let subsets = vec![vec![BBox::new(10, 80, 10, 10)], vec![], vec![BBox::new(40, 20, 4, 4)]];
        let lp = derive_layers(&subsets, road, 2).unwrap();
        assert_eq!(lp.empty_layers, vec![1]);
        assert_eq!(lp.regions[1], lp.regions[2]);
        assert_eq!(lp.effective_layers(), 2);
    }

    #[test]
    fn duplicate_points_leave_empty_clusters() {
        let d = vec![PseudoDistance { d_bottom: 20.0, area: 400.0 }; 6];
        let c = cluster_obstacles(&d, 3, 0, &KMeansParams::default()).unwrap();
        assert_eq!(c.subset_sizes(), vec![6, 0, 0]);
    }

    proptest! {
        #[test]
        fn order_invariant_and_nested(
            raw in prop::collection::vec((0i32..300, 100i32..230, 3i32..40), 4..30),
            k in 1usize..5,
            rot in 0usize..30,
        ) {
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, s)| BBox::new(x, y, s, s.min(240 - y))).collect();
            prop_assume!(k <= boxes.len());
            let d: Vec<_> = boxes.iter().map(|b| pseudo_distance(b, H)).collect();
            let c = cluster_obstacles(&d, k, 9, &KMeansParams::default()).unwrap();

            let shift = rot % boxes.len();
            let mut perm: Vec<usize> = (0..boxes.len()).collect();
            perm.rotate_left(shift);
            perm.reverse();
            let d2: Vec<_> = perm.iter().map(|&i| d[i]).collect();
            let c2 = cluster_obstacles(&d2, k, 9, &KMeansParams::default()).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(c.assignment[i], c2.assignment[j]);
            }

            let road = BBox::new(0, 80, 340, 160);
            let subsets = c.subsets(&boxes);
            let lp = derive_layers(&subsets, road, 10).unwrap();
            prop_assert!(lp.is_nested());
            prop_assert!(lp.regions.windows(2).all(|w| w[0].area() >= w[1].area()));
            for (k, s) in subsets.iter().enumerate() {
                for b in s {
                    let b = b.intersect(&road).unwrap();
                    prop_assert!(lp.regions[k].contains(&b));
                }
            }
        }
    }
}
