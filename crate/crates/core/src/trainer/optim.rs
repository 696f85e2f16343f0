use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub tensors: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            step: 0,
            tensors: shapes
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != state.tensors.len() || grads.len() != params.len() {
        return Err(Error::invalid("optimizer tensor count mismatch"));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.tensors) {
        if p.len() != g.len() || p.len() != s.m.len() {
            return Err(Error::invalid("optimizer tensor shape mismatch"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut state.tensors) {
        for i in 0..p.len() {
            let gi = g[i];
            s.m[i] = ADAM_BETA1 * s.m[i] + (1.0 - ADAM_BETA1) * gi;
            s.v[i] = ADAM_BETA2 * s.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            p[i] -= lr * (s.m[i] / c1) / ((s.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
