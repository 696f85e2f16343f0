use super::contrastive::LossTerm;

/// Lower clamp on opacity inside the entropy regularizer.
pub const OPACITY_EPS: f64 = 1e-6;

/// `(1/N) Σ (‖f_i‖ − 1)²` over `N` rows of width `dim`. A zero row has a zero
/// gradient.
pub fn loss_norm(features: &[f64], dim: usize) -> LossTerm {
    let n = if dim == 0 { 0 } else { features.len() / dim };
    if n == 0 {
        return LossTerm::zero(features.len());
    }
    let inv_n = 1.0 / n as f64;
    let mut out = LossTerm::zero(features.len());
    for (f, g) in features.chunks_exact(dim).zip(out.grad.chunks_exact_mut(dim)) {
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.value += (norm - 1.0) * (norm - 1.0);
        if norm > 0.0 {
            let c = 2.0 * (norm - 1.0) / norm * inv_n;
            for (gv, v) in g.iter_mut().zip(f) {
                *gv = c * v;
            }
        }
    }
    out.value *= inv_n;
    out
}

/// Mean over rays of `‖c − c_gt‖²`.
pub fn loss_color(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> LossTerm {
    assert_eq!(rendered.len(), target.len(), "rendered and target colors differ in length");
    let n = rendered.len();
    let mut out = LossTerm::zero(3 * n);
    if n == 0 {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    for (k, (c, t)) in rendered.iter().zip(target).enumerate() {
        for a in 0..3 {
            let d = c[a] - t[a];
            out.value += d * d;
            out.grad[3 * k + a] = 2.0 * d * inv_n;
        }
    }
    out.value *= inv_n;
    out
}

/// Mean over rays of `−o log o` with `o` clamped to `[ε, 1]`. The gradient is
/// zero where the clamp is active.
pub fn loss_opacity(opacity: &[f64]) -> LossTerm {
    let n = opacity.len();
    let mut out = LossTerm::zero(n);
    if n == 0 {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    for (g, &o) in out.grad.iter_mut().zip(opacity) {
        let c = o.clamp(OPACITY_EPS, 1.0);
        out.value -= c * c.ln();
        if o > OPACITY_EPS && o < 1.0 {
            *g = -(c.ln() + 1.0) * inv_n;
        }
    }
    out.value *= inv_n;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_examples() {
        assert_eq!(loss_norm(&[1.0, 0.0, 0.0, -1.0], 2).value, 0.0);
        let l = loss_norm(&[0.0, 3.0, 0.0], 3);
        assert!((l.value - 4.0).abs() < 1e-15);
        assert!((l.grad[1] - 4.0).abs() < 1e-15);
        let z = loss_norm(&[0.0, 0.0], 2);
        assert_eq!(z.value, 1.0);
        assert_eq!(z.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn color_is_mean_squared_error() {
        let l = loss_color(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], &[[0.0, 0.0, 0.0], [0.0, 0.5, 0.0]]);
        assert!((l.value - 0.625).abs() < 1e-15);
        assert_eq!(l.grad[0], 1.0);
        assert_eq!(l.grad[4], -0.5);
    }

    #[test]
    fn opacity_extremes_cost_nothing() {
        let l = loss_opacity(&[0.0, 1.0]);
        assert!(l.value.abs() < 1e-4);
        assert_eq!(l.grad, vec![0.0, 0.0]);
        let h = loss_opacity(&[0.5]);
        assert!((h.value - 0.5 * 2f64.ln()).abs() < 1e-15);
    }
}
