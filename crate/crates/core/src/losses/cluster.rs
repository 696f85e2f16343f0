use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hier2d::NULL_PATCH;

/// Smoothing constant in the cluster temperature denominator `n·ln(n + α)`.
pub const TEMPERATURE_SMOOTHING: f64 = 10.0;

/// Default lower bound on cluster temperatures.
pub const DEFAULT_PHI_MIN: f64 = 0.05;

/// Sampled features grouped by patch id, with detached cluster statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBatch {
    pub dim: usize,
    /// `N × dim`.
    pub features: Vec<f64>,
    pub patch_of_sample: Vec<u32>,
    /// Patch ids present in the batch, ascending. Position = cluster slot.
    pub patches: Vec<u32>,
    /// Sample indices per cluster slot.
    pub members: Vec<Vec<usize>>,
    /// `K × dim` cluster means.
    pub means: Vec<f64>,
    pub temperatures: Vec<f64>,
}

/// Per-cluster means and temperatures.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    pub patches: Vec<u32>,
    pub members: Vec<Vec<usize>>,
    pub means: Vec<f64>,
    pub temperatures: Vec<f64>,
}

/// Groups samples by patch id and computes, for each cluster,
/// `mean = Σ f / n` and `φ = Σ ‖f − mean‖ / (n · ln(n + 10))`, floored at
/// `phi_min`.
pub fn cluster_stats(features: &[f64], dim: usize, patch_of_sample: &[u32], phi_min: f64) -> Result<ClusterStats> {
    if dim == 0 || features.len() != patch_of_sample.len() * dim {
        return Err(Error::invalid("features and patch ids disagree in length"));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, &p) in patch_of_sample.iter().enumerate() {
        if p == NULL_PATCH {
            return Err(Error::invalid(format!("sample {j} has the null patch id")));
        }
        groups.entry(p).or_default().push(j);
    }
    let k = groups.len();
    let mut stats = ClusterStats {
        patches: Vec::with_capacity(k),
        members: Vec::with_capacity(k),
        means: vec![0.0; k * dim],
        temperatures: Vec::with_capacity(k),
    };
    for (slot, (patch, members)) in groups.into_iter().enumerate() {
        let n = members.len() as f64;
        let mean = &mut stats.means[slot * dim..(slot + 1) * dim];
        for &j in &members {
            for (m, v) in mean.iter_mut().zip(&features[j * dim..(j + 1) * dim]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let spread: f64 = members
            .iter()
            .map(|&j| {
                features[j * dim..(j + 1) * dim]
                    .iter()
                    .zip(mean.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        let phi = spread / (n * (n + TEMPERATURE_SMOOTHING).ln());
        stats.temperatures.push(phi.max(phi_min));
        stats.patches.push(patch);
        stats.members.push(members);
    }
    Ok(stats)
}

impl ClusterBatch {
    pub fn new(features: Vec<f64>, dim: usize, patch_of_sample: Vec<u32>, phi_min: f64) -> Result<Self> {
        let s = cluster_stats(&features, dim, &patch_of_sample, phi_min)?;
        Ok(Self {
            dim,
            features,
            patch_of_sample,
            patches: s.patches,
            members: s.members,
            means: s.means,
            temperatures: s.temperatures,
        })
    }

    /// Same clusters, different feature values; statistics stay as they were.
    /// Finite-difference checks rely on this.
    pub fn with_features(&self, features: Vec<f64>) -> Self {
        assert_eq!(features.len(), self.features.len());
        Self {
            features,
            ..self.clone()
        }
    }

    pub fn num_samples(&self) -> usize {
        self.patch_of_sample.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.patches.len()
    }

    pub fn slot_of(&self, patch: u32) -> Option<usize> {
        self.patches.binary_search(&patch).ok()
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    pub fn mean(&self, slot: usize) -> &[f64] {
        &self.means[slot * self.dim..(slot + 1) * self.dim]
    }

    /// `f_j · mean_k / φ_k` for every cluster slot `k`.
    pub(crate) fn logits(&self, j: usize) -> Vec<f64> {
        let f = self.feature(j);
        (0..self.num_clusters())
            .map(|k| dot(f, self.mean(k)) / self.temperatures[k])
            .collect()
    }

    /// Sum over clusters of `softmax(logits)_k · mean_k / φ_k`.
    pub(crate) fn expected_direction(&self, logits: &[f64], lse: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, &l) in logits.iter().enumerate() {
            let w = (l - lse).exp() / self.temperatures[k];
            for (o, m) in out.iter_mut().zip(self.mean(k)) {
                *o += w * m;
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
