//! Independent reference implementations shared by the integration tests.
//! Everything here is deliberately naive: direct loops over pixels, masks
//! and pairs, with no shared code paths with the library.

#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeMap;

use omnifield::hier2d::{MaskSet, NULL_PATCH};
use omnifield::mask::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random mask set: unions of rectangles and discs, some nested inside an
/// earlier mask, plus sparse speckle so patches can be disconnected.
pub fn random_mask_set(seed: u64, max_side: usize, max_masks: usize) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rng.gen_range(1..=max_side);
    let h = rng.gen_range(1..=max_side);
    let n = rng.gen_range(1..=max_masks.max(1));
    let mut masks: Vec<Mask> = Vec::with_capacity(n);
    for _ in 0..n {
        let shapes = rng.gen_range(1..=3);
        let mut m = Mask::new(w, h);
        for _ in 0..shapes {
            let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
            let (rw, rh) = (rng.gen_range(1..=w.max(1)), rng.gen_range(1..=h.max(1)));
            let disc = rng.gen_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let inside = if disc {
                        let dx = (x as f64 - x0 as f64) / rw as f64;
                        let dy = (y as f64 - y0 as f64) / rh as f64;
                        dx * dx + dy * dy <= 1.0
                    } else {
                        x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh
                    };
                    if inside {
                        m.set(x, y, true);
                    }
                }
            }
        }
        // Nest inside an earlier mask to create hierarchy.
        if !masks.is_empty() && rng.gen_bool(0.4) {
            let parent = masks[rng.gen_range(0..masks.len())].clone();
            m.intersect_with(&parent);
        }
        for _ in 0..rng.gen_range(0..4) {
            let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
            m.set(x, y, !m.get(x, y));
        }
        if m.count() > 0 {
            masks.push(m);
        }
    }
    if masks.is_empty() {
        let mut m = Mask::new(w, h);
        m.set(rng.gen_range(0..w), rng.gen_range(0..h), true);
        masks.push(m);
    }
    MaskSet::new(w, h, masks).expect("consistent mask sizes")
}

/// Oracle partition: patch id per pixel, ids in row-major first-encounter
/// order of distinct nonempty membership vectors.
pub struct OraclePartition {
    pub patch_of_pixel: Vec<u32>,
    pub memberships: Vec<Vec<bool>>,
    pub pixel_counts: Vec<u32>,
}

pub fn oracle_partition(set: &MaskSet) -> OraclePartition {
    let n = set.width() * set.height();
    let mut memberships: Vec<Vec<bool>> = Vec::new();
    let mut pixel_counts = Vec::new();
    let mut patch_of_pixel = vec![NULL_PATCH; n];
    for p in 0..n {
        let v: Vec<bool> = set.masks().iter().map(|m| m.get_index(p)).collect();
        if !v.iter().any(|&b| b) {
            continue;
        }
        let id = match memberships.iter().position(|u| *u == v) {
            Some(i) => i,
            None => {
                memberships.push(v);
                pixel_counts.push(0);
                memberships.len() - 1
            }
        };
        patch_of_pixel[p] = id as u32;
        pixel_counts[id] += 1;
    }
    OraclePartition {
        patch_of_pixel,
        memberships,
        pixel_counts,
    }
}

/// Oracle correlation straight from pixels: masks containing some pixel of
/// patch i and some pixel of patch j.
pub fn oracle_correlation(set: &MaskSet, part: &OraclePartition) -> Vec<Vec<u32>> {
    let k = part.memberships.len();
    let mut c = vec![vec![0u32; k]; k];
    for m in set.masks() {
        let mut touched = vec![false; k];
        for p in m.indices() {
            let id = part.patch_of_pixel[p];
            if id != NULL_PATCH {
                touched[id as usize] = true;
            }
        }
        for i in 0..k {
            for j in 0..k {
                if touched[i] && touched[j] {
                    c[i][j] += 1;
                }
            }
        }
    }
    c
}

/// Oracle levels: distinct positive votes of the anchor's row, descending.
pub fn oracle_levels(c: &[Vec<u32>], anchor: usize) -> Vec<(u32, Vec<u32>)> {
    let mut by_vote: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (j, &v) in c[anchor].iter().enumerate() {
        if v > 0 {
            by_vote.entry(v).or_default().push(j as u32);
        }
    }
    by_vote.into_iter().rev().collect()
}

/// Central differences of `f` at `x` in the coordinates `idx`.
pub fn central_differences(x: &[f64], idx: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    idx.iter()
        .map(|&i| {
            let orig = y[i];
            y[i] = orig + h;
            let up = f(&y);
            y[i] = orig - h;
            let down = f(&y);
            y[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

pub fn random_unitish(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Union-find over `n` items.
pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the graph keeping edges with cosine ≥ t; each
/// point maps to the smallest id in its component.
pub fn oracle_components(units: &[f64], dim: usize, adjacency: &[Vec<u32>], t: f64) -> Vec<usize> {
    let n = adjacency.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for &j in &adjacency[i] {
            let j = j as usize;
            let c: f64 = (0..dim).map(|k| units[i * dim + k] * units[j * dim + k]).sum();
            if c.clamp(-1.0, 1.0) >= t {
                uf.union(i, j);
            }
        }
    }
    (0..n).map(|i| uf.find(i)).collect()
}

/// Exhaustive best threshold: tries every distinct score and one value below
/// the minimum; ties keep the larger threshold.
pub fn oracle_best_iou(scores: &[f64], gt: &[bool]) -> (f64, f64) {
    let mut cands: Vec<f64> = scores.to_vec();
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    cands.push(min - 1.0);
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    let mut best = (f64::NAN, -1.0);
    for t in cands {
        let (mut inter, mut union) = (0usize, 0usize);
        for (s, &g) in scores.iter().zip(gt) {
            let p = *s > t;
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        if iou > best.1 {
            best = (t, iou);
        }
    }
    best
}
