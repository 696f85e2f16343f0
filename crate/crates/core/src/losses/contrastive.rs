//! Cluster-contrastive objectives.
//!
//! For a sample `f` of cluster `i`, the contrastive term against cluster `s` is
//! `L(s) = −f·m_s/φ_s + log Σ_k exp(f·m_k/φ_k)` with cluster means `m` and
//! temperatures `φ` held constant. The sum runs over clusters present in the
//! batch.

use super::cluster::{dot, log_sum_exp, ClusterBatch};
use crate::error::{Error, Result};
use crate::hier2d::HierLevels;
use crate::par;

/// A loss value and its gradient with respect to the batch features.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossTerm {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

/// Basic cluster-contrastive loss, averaged over clusters:
/// `L = −(1/K) Σ_i Σ_{j∈i} log softmax_i(f_j · m / φ)`.
pub fn loss_cc(batch: &ClusterBatch) -> LossTerm {
    let k = batch.num_clusters();
    let d = batch.dim;
    if k == 0 {
        return LossTerm::zero(batch.features.len());
    }
    let scale = 1.0 / k as f64;
    let per_sample = par::map_range(batch.num_samples(), |j| {
        let own = batch.slot_of(batch.patch_of_sample[j]).expect("sample patch is a cluster");
        let logits = batch.logits(j);
        let lse = log_sum_exp(&logits);
        let value = lse - logits[own];
        let mut g = batch.expected_direction(&logits, lse);
        for (gv, m) in g.iter_mut().zip(batch.mean(own)) {
            *gv = scale * (*gv - m / batch.temperatures[own]);
        }
        (value, g)
    });
    let mut out = LossTerm {
        value: 0.0,
        grad: Vec::with_capacity(batch.num_samples() * d),
    };
    for (v, g) in per_sample {
        out.value += v;
        out.grad.extend_from_slice(&g);
    }
    out.value *= scale;
    out
}

/// A patch hierarchy restricted to the clusters present in one batch.
#[derive(Clone, Debug, PartialEq)]
struct BatchLevels {
    /// `(depth, slots)` for each nonempty level, depth 1-based and increasing.
    levels: Vec<(usize, Vec<usize>)>,
}

fn restrict_levels(batch: &ClusterBatch, levels: &HierLevels) -> BatchLevels {
    let levels = levels
        .levels
        .iter()
        .enumerate()
        .filter_map(|(d, set)| {
            let slots: Vec<usize> = set.iter().filter_map(|&p| batch.slot_of(p)).collect();
            (!slots.is_empty()).then_some((d + 1, slots))
        })
        .collect();
    BatchLevels { levels }
}

/// Hierarchical contrastive loss with per-level decay and ordering clamp.
///
/// ```text
/// L_H = Σ_i Σ_d λ^{d−1}/(N·L) Σ_{j∈i} Σ_{s∈S_d^i} max(L_ij(s), Lmax_ij(d−1))
/// Lmax_ij(d) = max_{s∈S_d^i} L_ij(s),   Lmax_ij(0) = −∞
/// ```
///
/// `levels_by_patch[p]` holds the hierarchy of anchor patch `p` (as returned
/// by `HierRep::all_levels`). Only anchors and level members present in the
/// batch take part; empty levels are skipped, keep their depth for the decay
/// weight, and the clamp refers to the previous nonempty level. `N` is the
/// sample count and `L` the number of (anchor, nonempty level) pairs. The
/// gradient of a clamped term flows through the previous level's maximizer.
pub fn loss_hier(batch: &ClusterBatch, levels_by_patch: &[HierLevels], lambda: f64) -> Result<LossTerm> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("decay λ must lie in [0, 1], got {lambda}")));
    }
    let d = batch.dim;
    let k = batch.num_clusters();
    let mut restricted = Vec::with_capacity(k);
    for &p in &batch.patches {
        let lv = levels_by_patch
            .get(p as usize)
            .ok_or_else(|| Error::invalid(format!("no hierarchy levels for patch {p}")))?;
        if lv.anchor != p {
            return Err(Error::invalid(format!("levels for patch {p} are anchored at {}", lv.anchor)));
        }
        restricted.push(restrict_levels(batch, lv));
    }
    let pairs: usize = restricted.iter().map(|r| r.levels.len()).sum();
    if pairs == 0 || batch.num_samples() == 0 {
        return Ok(LossTerm::zero(batch.features.len()));
    }
    let norm = 1.0 / (batch.num_samples() as f64 * pairs as f64);

    let per_sample = par::map_range(batch.num_samples(), |j| {
        let anchor = batch.slot_of(batch.patch_of_sample[j]).expect("sample patch is a cluster");
        let logits = batch.logits(j);
        let lse = log_sum_exp(&logits);
        let term = |s: usize| lse - logits[s];

        // coefficient on each slot's −m_s/φ_s, plus the total weight that
        // multiplies the softmax expectation
        let mut coef = vec![0.0; k];
        let mut total_weight = 0.0;
        let mut value = 0.0;
        let mut prev: Option<(f64, usize)> = None;
        for (depth, slots) in &restricted[anchor].levels {
            let w = lambda.powi(*depth as i32 - 1) * norm;
            let mut level_max: Option<(f64, usize)> = None;
            for &s in slots {
                let l = term(s);
                if level_max.is_none_or(|(m, _)| l > m) {
                    level_max = Some((l, s));
                }
                if w == 0.0 {
                    continue;
                }
                let (v, src) = match prev {
                    Some((pm, ps)) if pm > l => (pm, ps),
                    _ => (l, s),
                };
                value += w * v;
                coef[src] += w;
                total_weight += w;
            }
            prev = level_max;
        }
        let mut g = batch.expected_direction(&logits, lse);
        g.iter_mut().for_each(|v| *v *= total_weight);
        for (s, &c) in coef.iter().enumerate() {
            if c != 0.0 {
                let t = batch.temperatures[s];
                for (gv, m) in g.iter_mut().zip(batch.mean(s)) {
                    *gv -= c * m / t;
                }
            }
        }
        (value, g)
    });

    let mut out = LossTerm {
        value: 0.0,
        grad: Vec::with_capacity(batch.num_samples() * d),
    };
    for (v, g) in per_sample {
        out.value += v;
        out.grad.extend_from_slice(&g);
    }
    Ok(out)
}

/// Mean cosine similarity between an anchor cluster's samples and the means
/// of the patches at each of its (batch-present) levels, shallowest first.
pub fn level_similarity_profile(batch: &ClusterBatch, levels: &HierLevels) -> Vec<(usize, f64)> {
    let Some(anchor) = batch.slot_of(levels.anchor) else {
        return Vec::new();
    };
    let r = restrict_levels(batch, levels);
    let unit = |v: &[f64]| {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect::<Vec<f64>>()
    };
    let samples: Vec<Vec<f64>> = batch.members[anchor].iter().map(|&j| unit(batch.feature(j))).collect();
    r.levels
        .iter()
        .map(|(depth, slots)| {
            let mut acc = 0.0;
            for &s in slots {
                let m = unit(batch.mean(s));
                acc += samples.iter().map(|f| dot(f, &m)).sum::<f64>();
            }
            (*depth, acc / (slots.len() * samples.len()) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier2d::{hierarchy_levels, CorrelationMatrix};

    fn two_cluster_batch() -> ClusterBatch {
        let feats = vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0];
        ClusterBatch::new(feats, 2, vec![0, 0, 1, 1], 0.05).unwrap()
    }

    #[test]
    fn single_cluster_has_zero_loss() {
        let b = ClusterBatch::new(vec![0.3, 0.1, -0.2, 0.4], 2, vec![7, 7], 0.05).unwrap();
        let l = loss_cc(&b);
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn separated_clusters_have_near_zero_loss() {
        let l = loss_cc(&two_cluster_batch());
        // −log σ(2/0.05) per sample, four samples, averaged over two clusters
        let per_sample = (1.0 + (-40.0f64).exp()).ln();
        assert!((l.value - 2.0 * per_sample).abs() < 1e-15);
        assert!(l.value < 1e-15);
    }

    #[test]
    fn lambda_out_of_range_is_an_error() {
        let b = two_cluster_batch();
        let c = CorrelationMatrix::from_votes(2, vec![1, 0, 0, 1]).unwrap();
        let lv = vec![hierarchy_levels(&c, 0).unwrap(), hierarchy_levels(&c, 1).unwrap()];
        assert!(loss_hier(&b, &lv, 1.5).is_err());
        assert!(loss_hier(&b, &lv, -0.1).is_err());
        assert!(loss_hier(&b, &lv, 0.0).is_ok());
    }

    #[test]
    fn single_level_reduces_to_depth_one_term() {
        let b = ClusterBatch::new(vec![0.9, 0.1, 0.7, 0.3, -0.5, 0.8], 2, vec![0, 0, 1], 0.05).unwrap();
        let c = CorrelationMatrix::from_votes(2, vec![1, 0, 0, 1]).unwrap();
        let lv = vec![hierarchy_levels(&c, 0).unwrap(), hierarchy_levels(&c, 1).unwrap()];
        let h = loss_hier(&b, &lv, 0.5).unwrap();
        let cc = loss_cc(&b);
        // L_H · N · L = L_CC · K with N = 3 samples, L = 2 pairs, K = 2
        assert!((h.value * 3.0 * 2.0 - cc.value * 2.0).abs() < 1e-12);
    }
}
