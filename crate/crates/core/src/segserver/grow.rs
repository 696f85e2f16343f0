use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit point features plus a symmetric neighbor graph; the input of region
/// growing.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGraph {
    pub dim: usize,
    /// Row-major unit features; zero vectors stay zero.
    pub units: Vec<f64>,
    /// Neighbor lists, ids ascending.
    pub adjacency: Vec<Vec<u32>>,
}

impl PointGraph {
    pub fn new(features: &[f64], dim: usize, adjacency: &[Vec<u32>]) -> Result<Self> {
        if dim == 0 || features.len() != adjacency.len() * dim {
            return Err(Error::invalid("features and adjacency disagree in point count"));
        }
        let n = adjacency.len();
        if adjacency.iter().flatten().any(|&j| j as usize >= n) {
            return Err(Error::invalid("adjacency references a missing point"));
        }
        let mut units = features.to_vec();
        for f in units.chunks_exact_mut(dim) {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                f.iter_mut().for_each(|v| *v /= norm);
            } else {
                f.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let adjacency = adjacency
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect();
        Ok(Self { dim, units, adjacency })
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn unit(&self, i: usize) -> &[f64] {
        &self.units[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity clamped to `[-1, 1]`; 0 when either vector is zero.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let c: f64 = self.unit(i).iter().zip(self.unit(j)).map(|(a, b)| a * b).sum();
        c.clamp(-1.0, 1.0)
    }

    fn grow_into(&self, seeds: &[u32], threshold: f64, visited: &mut [bool]) -> Vec<u32> {
        let mut start: Vec<u32> = seeds.to_vec();
        start.sort_unstable();
        start.dedup();
        let mut queue = VecDeque::new();
        let mut out = Vec::new();
        for s in start {
            if !visited[s as usize] {
                visited[s as usize] = true;
                queue.push_back(s);
            }
        }
        while let Some(i) = queue.pop_front() {
            out.push(i);
            for &j in &self.adjacency[i as usize] {
                if !visited[j as usize] && self.cosine(i as usize, j as usize) >= threshold {
                    visited[j as usize] = true;
                    queue.push_back(j);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Breadth-first growth from `seeds` over the neighbor graph, accepting a
/// neighbor when its cosine to the current point is at least `threshold`.
/// Seeds are visited in ascending id. Returns the point ids, ascending.
pub fn region_grow(graph: &PointGraph, seeds: &[u32], threshold: f64) -> Result<Vec<u32>> {
    if seeds.iter().any(|&s| s as usize >= graph.len()) {
        return Err(Error::invalid("seed point out of range"));
    }
    if threshold.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let mut visited = vec![false; graph.len()];
    Ok(graph.grow_into(seeds, threshold, &mut visited))
}

/// Full labeling of the points into region-grown components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub threshold: f64,
    /// Component label per point; labels follow the smallest member id.
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Components come from local similarity alone and need not correspond
    /// to one hierarchy level.
    pub note: String,
}

impl Discretization {
    pub fn component_count(&self) -> usize {
        self.sizes.len()
    }
}

pub const DISCRETIZE_NOTE: &str = "components are similarity-connected regions; they need not share one hierarchy level";

/// Grows from every still unlabeled point in ascending id order.
pub fn auto_discretize(graph: &PointGraph, threshold: f64) -> Result<Discretization> {
    if threshold.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let n = graph.len();
    let mut visited = vec![false; n];
    let mut labels = vec![u32::MAX; n];
    let mut sizes = Vec::new();
    for i in 0..n {
        if visited[i] {
            continue;
        }
        let comp = graph.grow_into(&[i as u32], threshold, &mut visited);
        for &p in &comp {
            labels[p as usize] = sizes.len() as u32;
        }
        sizes.push(comp.len());
    }
    Ok(Discretization {
        threshold,
        labels,
        sizes,
        note: DISCRETIZE_NOTE.into(),
    })
}
