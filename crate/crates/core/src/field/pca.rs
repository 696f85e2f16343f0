use nalgebra::{DMatrix, SymmetricEigen};

/// Top principal directions of a feature set plus the affine map that sends
/// the projected data into `[0, 1]³`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Up to three unit loading vectors; the largest-magnitude entry of each
    /// is positive.
    pub components: Vec<Vec<f64>>,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl PcaBasis {
    pub fn fit(features: &[f64], dim: usize) -> Self {
        let n = if dim == 0 { 0 } else { features.len() / dim };
        let mut mean = vec![0.0; dim];
        for f in features.chunks_exact(dim.max(1)).take(n) {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        if n > 0 {
            mean.iter_mut().for_each(|m| *m /= n as f64);
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for f in features.chunks_exact(dim.max(1)).take(n) {
            for a in 0..dim {
                let da = f[a] - mean[a];
                for b in a..dim {
                    cov[(a, b)] += da * (f[b] - mean[b]);
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let components: Vec<Vec<f64>> = order
            .into_iter()
            .take(3)
            .map(|k| {
                let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                let pivot = v
                    .iter()
                    .copied()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                    .map(|(_, x)| x)
                    .unwrap_or(1.0);
                if pivot < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        let mut basis = PcaBasis {
            mean,
            components,
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        };
        for f in features.chunks_exact(dim.max(1)).take(n) {
            let p = basis.project(f);
            for k in 0..3 {
                basis.lo[k] = basis.lo[k].min(p[k]);
                basis.hi[k] = basis.hi[k].max(p[k]);
            }
        }
        basis
    }

    fn project(&self, f: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, c) in self.components.iter().enumerate() {
            out[k] = c.iter().zip(f.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum();
        }
        out
    }

    /// RGB in `[0, 1]³` for one feature vector.
    pub fn color(&self, f: &[f64]) -> [f64; 3] {
        let p = self.project(f);
        let mut rgb = [0.5; 3];
        for k in 0..3 {
            let span = self.hi[k] - self.lo[k];
            if span > 1e-12 && span.is_finite() {
                rgb[k] = ((p[k] - self.lo[k]) / span).clamp(0.0, 1.0);
            }
        }
        rgb
    }
}

/// Maps each `dim`-vector to RGB through its top three principal components.
pub fn pca_colorize(features: &[f64], dim: usize) -> Vec<[f64; 3]> {
    let basis = PcaBasis::fit(features, dim);
    features.chunks_exact(dim.max(1)).map(|f| basis.color(f)).collect()
}
