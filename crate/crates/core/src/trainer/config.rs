use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_PHI_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Surface,
    Volume,
}

/// Training hyper-parameters. Field names are the keys of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: Schedule,
    pub lambda: f64,
    pub dim: usize,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub backend: Backend,
    pub seed: u64,
    pub phi_min: f64,
    /// Spread of the initial unit features around one shared random
    /// direction; larger values approach independent random directions.
    pub init_noise: f64,
    /// Steps between checkpoints; 0 writes only the final field.
    pub checkpoint_every: usize,
    /// Voxel grid nodes per axis (volume backend).
    pub volume_resolution: usize,
    pub samples_per_ray: usize,
    /// Surface backend: nodes per axis of the feature grid the point
    /// features are interpolated from; 0 stores one free vector per point.
    pub surface_grid: usize,
    /// Splat radius in pixels (surface backend).
    pub point_radius: f64,
    /// Field points (surface) or voxel nodes (volume) drawn uniformly each
    /// step for an extra `L_norm` term; rendered samples alone leave unseen
    /// parts of the field unconstrained. 0 disables it.
    pub norm_samples: usize,
}

impl Default for TrainConfig {
    /// Desk-scale settings: short runs on small synthetic scenes.
    fn default() -> Self {
        Self {
            iterations: 3000,
            rays_per_batch: 2048,
            lr_start: 1e-2,
            lr_end: 3e-4,
            schedule: Schedule::Cosine,
            lambda: 0.5,
            dim: 16,
            w1: 1.0,
            w2: 1.0,
            w3: 1e-3,
            backend: Backend::Surface,
            seed: 0,
            phi_min: DEFAULT_PHI_MIN,
            init_noise: 0.1,
            checkpoint_every: 0,
            volume_resolution: 32,
            samples_per_ray: 48,
            surface_grid: 16,
            point_radius: 0.75,
            norm_samples: 2048,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings with the reference loss weights.
    pub fn reference() -> Self {
        let w = LossWeights::REFERENCE;
        Self {
            iterations: 50_000,
            rays_per_batch: 8192,
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            volume_resolution: 128,
            samples_per_ray: 128,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.rays_per_batch == 0 {
            return fail("iterations and rays_per_batch must be positive".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return fail(format!(
                "need lr_start ≥ lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.dim == 0 {
            return fail("dim must be at least 1".into());
        }
        if [self.w1, self.w2, self.w3].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return fail("loss weights must be finite and nonnegative".into());
        }
        if !(self.init_noise > 0.0 && self.init_noise.is_finite()) {
            return fail("init_noise must be positive".into());
        }
        if !(self.phi_min > 0.0) {
            return fail("phi_min must be positive".into());
        }
        if self.surface_grid == 1 {
            return fail("surface_grid must be 0 or at least 2".into());
        }
        if self.volume_resolution < 2 || self.samples_per_ray < 2 {
            return fail("volume_resolution and samples_per_ray must be at least 2".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// Learning rate at `step`: cosine annealing from `lr_start` to `lr_end` over
/// `iterations`, or constant.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    match config.schedule {
        Schedule::Constant => config.lr_start,
        Schedule::Cosine => {
            let frac = step as f64 / config.iterations as f64;
            config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::reference();
        assert_eq!(lr_at(0, &c), 1e-2);
        assert!((lr_at(c.iterations, &c) - 3e-4).abs() < 1e-18);
        assert!((lr_at(c.iterations / 2, &c) - (1e-2 + 3e-4) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn config_parsing_and_validation() {
        let c = TrainConfig::from_toml("iterations = 10\nlambda = 0.0\nbackend = \"volume\"\n").unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.backend, Backend::Volume);
        assert!(TrainConfig::from_toml("lambda = 2.0").is_err());
        assert!(TrainConfig::from_toml("lr_start = 1e-4\nlr_end = 1e-3").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1").is_err());
        let r = TrainConfig::reference();
        assert_eq!(TrainConfig::from_toml(&r.to_toml()).unwrap(), r);
    }
}
