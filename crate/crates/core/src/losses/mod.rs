//! Training objectives with analytic gradients, and the per-step loss log.

mod cluster;
mod contrastive;
mod regularizers;

pub use cluster::{cluster_stats, ClusterBatch, ClusterStats, DEFAULT_PHI_MIN, TEMPERATURE_SMOOTHING};
pub use contrastive::{level_similarity_profile, loss_cc, loss_hier, LossTerm};
pub use regularizers::{loss_color, loss_norm, loss_opacity, OPACITY_EPS};

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Weights in `total = L_c + w1·L_H + w2·L_norm + w3·L_reg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl LossWeights {
    /// Values used for full-scale scenes.
    pub const REFERENCE: LossWeights = LossWeights {
        w1: 5e-4,
        w2: 5e2,
        w3: 1e-3,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::REFERENCE
    }
}

/// Unweighted component losses of one step. Absent components are `None`
/// (the surface backend has no color or opacity terms).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Contrastive term (hierarchical, or basic when λ = 0 is not used).
    pub l_h: Option<LossTerm>,
    pub l_norm: Option<LossTerm>,
    pub l_color: Option<LossTerm>,
    pub l_opacity: Option<LossTerm>,
}

/// Weighted total and the cotangents it induces on the rendered outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_h: f64,
    pub l_norm: f64,
    pub l_color: f64,
    pub l_opacity: f64,
    pub total: f64,
    /// `d total / d feature`, `N × D`; empty when no feature term is present.
    pub feature_grad: Vec<f64>,
    /// `d total / d color`, `N × 3`.
    pub color_grad: Vec<f64>,
    /// `d total / d opacity`, `N`.
    pub opacity_grad: Vec<f64>,
}

fn axpy(acc: &mut Vec<f64>, w: f64, g: &[f64]) {
    if acc.is_empty() {
        acc.resize(g.len(), 0.0);
    }
    assert_eq!(acc.len(), g.len(), "feature cotangents disagree in length");
    for (a, v) in acc.iter_mut().zip(g) {
        *a += w * v;
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> LossBreakdown {
    let value = |t: &Option<LossTerm>| t.as_ref().map_or(0.0, |t| t.value);
    let mut out = LossBreakdown {
        l_h: value(&parts.l_h),
        l_norm: value(&parts.l_norm),
        l_color: value(&parts.l_color),
        l_opacity: value(&parts.l_opacity),
        total: 0.0,
        feature_grad: Vec::new(),
        color_grad: Vec::new(),
        opacity_grad: Vec::new(),
    };
    out.total = out.l_color + w.w1 * out.l_h + w.w2 * out.l_norm + w.w3 * out.l_opacity;
    if let Some(t) = &parts.l_h {
        axpy(&mut out.feature_grad, w.w1, &t.grad);
    }
    if let Some(t) = &parts.l_norm {
        axpy(&mut out.feature_grad, w.w2, &t.grad);
    }
    if let Some(t) = &parts.l_color {
        axpy(&mut out.color_grad, 1.0, &t.grad);
    }
    if let Some(t) = &parts.l_opacity {
        axpy(&mut out.opacity_grad, w.w3, &t.grad);
    }
    out
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub l_h: f64,
    pub l_norm: f64,
    pub l_color: f64,
    pub l_opacity: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "# step l_h l_norm l_color l_opacity total lr";

impl LossRecord {
    pub fn new(step: u64, b: &LossBreakdown, lr: f64) -> Self {
        Self {
            step,
            l_h: b.l_h,
            l_norm: b.l_norm,
            l_color: b.l_color,
            l_opacity: b.l_opacity,
            total: b.total,
            lr,
        }
    }

    /// Space-separated, floats in shortest round-trip form.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {}",
            self.step, self.l_h, self.l_norm, self.l_color, self.l_opacity, self.total, self.lr
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::format("loss log", format!("malformed line {line:?}"));
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 7 {
            return Err(bad());
        }
        let f = |i: usize| cols[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: cols[0].parse().map_err(|_| bad())?,
            l_h: f(1)?,
            l_norm: f(2)?,
            l_color: f(3)?,
            l_opacity: f(4)?,
            total: f(5)?,
            lr: f(6)?,
        })
    }
}

pub fn format_loss_log(records: &[LossRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(LOSS_LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(LossRecord::parse_line)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_of_zero_parts_is_zero() {
        let parts = LossParts {
            l_h: Some(LossTerm::zero(4)),
            l_norm: Some(LossTerm::zero(4)),
            l_color: Some(LossTerm::zero(3)),
            l_opacity: Some(LossTerm::zero(1)),
        };
        let b = total_loss(&parts, &LossWeights::REFERENCE);
        assert_eq!(b.total, 0.0);
        assert_eq!(b.feature_grad, vec![0.0; 4]);
    }

    #[test]
    fn feature_cotangent_combines_both_terms() {
        let parts = LossParts {
            l_h: Some(LossTerm {
                value: 2.0,
                grad: vec![1.0, -1.0],
            }),
            l_norm: Some(LossTerm {
                value: 0.5,
                grad: vec![0.5, 0.0],
            }),
            ..Default::default()
        };
        let w = LossWeights { w1: 2.0, w2: 4.0, w3: 1.0 };
        let b = total_loss(&parts, &w);
        assert_eq!(b.total, 6.0);
        assert_eq!(b.feature_grad, vec![4.0, -2.0]);
        assert!(b.color_grad.is_empty());
    }

    #[test]
    fn log_round_trips_exactly() {
        let r = LossRecord {
            step: 17,
            l_h: 0.1 + 0.2,
            l_norm: 1e-300,
            l_color: 0.0,
            l_opacity: 3.0f64.sqrt(),
            total: -0.0,
            lr: 0.01,
        };
        let text = format_loss_log(&[r, r]);
        assert!(text.starts_with(LOSS_LOG_HEADER));
        assert_eq!(parse_loss_log(&text).unwrap(), vec![r, r]);
        assert!(parse_loss_log("1 2 3").is_err());
    }
}
