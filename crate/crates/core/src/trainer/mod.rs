//! Optimization loop: per-image ray batches, hierarchical contrastive and
//! regularization losses, Adam updates of the field parameters.

mod config;
mod optim;

pub use config::{lr_at, Backend, Schedule, TrainConfig};
pub use optim::{adam_step, Moments, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{
    backprop_volume, render_rays, render_surface, save_field, FieldModel, RayCotangents, Sampling, SurfaceField, Vec3,
    VoxelField, NO_HIT,
};
use crate::hier2d::{HierLevels, NULL_PATCH};
use crate::losses::{
    loss_color, loss_hier, loss_norm, loss_opacity, total_loss, ClusterBatch, LossBreakdown, LossParts, LossRecord,
};
use crate::par;
use crate::synthdata::Dataset;
use crate::util::mix_seed;

const INIT_STREAM: u64 = 1 << 22;
const BATCH_STREAM: u64 = 1 << 23;
const RAY_STREAM: u64 = 1 << 24;
const NORM_STREAM: u64 = 1 << 25;

/// Pixels of one batch with their patch ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch {
    pub pixels: Vec<usize>,
    pub patches: Vec<u32>,
}

/// Draws `n` pixels uniformly, with replacement, among `candidates`.
/// Returns `None` when there is nothing to draw from.
pub fn sample_batch(candidates: &[usize], patch_map: &[u32], n: usize, rng: &mut ChaCha8Rng) -> Option<PixelBatch> {
    if candidates.is_empty() {
        return None;
    }
    let pixels: Vec<usize> = (0..n).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect();
    let patches = pixels.iter().map(|&p| patch_map[p]).collect();
    Some(PixelBatch { pixels, patches })
}

/// `n` unit vectors of width `dim`, row-major: one shared random direction
/// plus isotropic Gaussian noise of scale `noise`, renormalized.
pub fn random_features(n: usize, dim: usize, noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = unit(&v) {
            break u;
        }
    };
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = base
            .iter()
            .map(|b| b + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        out.extend(unit(&v).unwrap_or_else(|| base.clone()));
    }
    out
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

/// Result of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub field: FieldModel,
    pub log: Vec<LossRecord>,
    /// Views skipped because they had no usable pixels.
    pub skipped_views: Vec<usize>,
}

/// Where and how often to write checkpoints, and a per-step observer.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub checkpoint: Option<PathBuf>,
    pub on_step: Option<&'a mut dyn FnMut(&LossRecord)>,
}

struct ViewPlan {
    view: usize,
    candidates: Vec<usize>,
    levels: Vec<HierLevels>,
    /// Surface backend only.
    hits: Vec<u32>,
}

fn plan_views(dataset: &Dataset, hits: Option<&[Vec<u32>]>) -> (Vec<ViewPlan>, Vec<usize>) {
    let plans = par::map_range(dataset.num_views(), |v| {
        let rep = dataset.views[v].hierrep.as_ref()?;
        let map = &rep.partition.patch_index_map;
        let hit = hits.map(|h| h[v].clone()).unwrap_or_default();
        let candidates: Vec<usize> = (0..map.len())
            .filter(|&p| map[p] != NULL_PATCH && (hit.is_empty() || hit[p] != NO_HIT))
            .collect();
        (!candidates.is_empty()).then(|| ViewPlan {
            view: v,
            candidates,
            levels: rep.all_levels(),
            hits: hit,
        })
    });
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for (v, p) in plans.into_iter().enumerate() {
        match p {
            Some(p) => ok.push(p),
            None => {
                log::warn!("view {v}: no usable pixels, skipped");
                skipped.push(v);
            }
        }
    }
    (ok, skipped)
}

fn contrastive_parts(features: Vec<f64>, batch: &PixelBatch, plan: &ViewPlan, config: &TrainConfig) -> Result<LossParts> {
    let cluster = ClusterBatch::new(features, config.dim, batch.patches.clone(), config.phi_min)?;
    Ok(LossParts {
        l_h: Some(loss_hier(&cluster, &plan.levels, config.lambda)?),
        l_norm: Some(loss_norm(&cluster.features, config.dim)),
        ..Default::default()
    })
}

/// Folds the field-sample norm term into the step's `L_norm` and total, and
/// returns its weighted gradient.
fn add_field_norm(b: &mut LossBreakdown, features: &[f64], config: &TrainConfig) -> Vec<f64> {
    let term = loss_norm(features, config.dim);
    b.l_norm += term.value;
    b.total += config.w2 * term.value;
    term.grad.into_iter().map(|g| config.w2 * g).collect()
}

fn draw_ids(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..n)).collect()
}

fn all_finite(b: &LossBreakdown) -> bool {
    b.total.is_finite() && b.feature_grad.iter().chain(&b.color_grad).chain(&b.opacity_grad).all(|v| v.is_finite())
}

/// Writes the diagnostic checkpoint next to the regular one and builds the
/// error. A failed diagnostic write is logged, not returned.
fn abort_nonfinite(step: usize, field: &FieldModel, checkpoint: Option<&Path>) -> Error {
    let dump = checkpoint.map(|p| {
        let mut s = p.as_os_str().to_owned();
        s.push(".nonfinite");
        PathBuf::from(s)
    });
    if let Some(d) = &dump {
        if let Err(e) = save_field(field, d) {
            log::error!("writing diagnostic checkpoint: {e}");
        }
    }
    Error::NonFinite { step, checkpoint: dump }
}

fn checkpoint_due(step: usize, config: &TrainConfig) -> bool {
    config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0
}

/// Trains a field on `dataset`. Images are visited round-robin, one per
/// step. The surface backend keeps geometry fixed and optimizes features with
/// `w1·L_H + w2·L_norm`; the volume backend adds color and opacity terms.
pub fn train_scene(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_scene_with(dataset, config, TrainHooks::default())
}

pub fn train_scene_with(dataset: &Dataset, config: &TrainConfig, mut hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let outcome = match config.backend {
        Backend::Surface => train_surface(dataset, config, &mut hooks)?,
        Backend::Volume => train_volume(dataset, config, &mut hooks)?,
    };
    if let Some(p) = &hooks.checkpoint {
        save_field(&outcome.field, p)?;
    }
    Ok(outcome)
}

/// Trainable parameters behind the per-point features of the surface
/// backend.
enum PointFeatures {
    /// One free vector per point.
    Free { dim: usize, values: Vec<f64> },
    /// Trilinear interpolation of a node grid at each point position.
    Grid {
        dim: usize,
        nodes: Vec<f64>,
        corners: Vec<([u32; 8], [f64; 8])>,
    },
}

impl PointFeatures {
    fn new(geometry: &SurfaceField, config: &TrainConfig) -> Result<Self> {
        let d = config.dim;
        let seed = mix_seed(config.seed, INIT_STREAM);
        if config.surface_grid == 0 {
            return Ok(Self::Free {
                dim: d,
                values: random_features(geometry.len(), d, config.init_noise, seed),
            });
        }
        let (lo, hi) = geometry.bounds();
        let pad = (hi - lo) * 0.02 + Vec3::repeat(1e-3);
        let grid = VoxelField::new(config.surface_grid, lo - pad, hi + pad, 1)?;
        Ok(Self::Grid {
            dim: d,
            nodes: random_features(grid.num_nodes(), d, config.init_noise, seed),
            corners: geometry.points.iter().map(|p| grid.corners(p)).collect(),
        })
    }

    fn params(&mut self) -> &mut Vec<f64> {
        match self {
            Self::Free { values, .. } => values,
            Self::Grid { nodes, .. } => nodes,
        }
    }

    fn push_feature(&self, i: usize, out: &mut Vec<f64>) {
        match self {
            Self::Free { dim, values } => out.extend_from_slice(&values[i * dim..(i + 1) * dim]),
            Self::Grid { dim, nodes, corners } => {
                let start = out.len();
                out.resize(start + dim, 0.0);
                let (idx, w) = &corners[i];
                for (&c, &wc) in idx.iter().zip(w) {
                    let c = c as usize;
                    for (o, v) in out[start..].iter_mut().zip(&nodes[c * dim..(c + 1) * dim]) {
                        *o += wc * v;
                    }
                }
            }
        }
    }

    fn scatter(&self, i: usize, g: &[f64], grad: &mut [f64]) {
        match self {
            Self::Free { dim, .. } => {
                for (a, v) in grad[i * dim..(i + 1) * dim].iter_mut().zip(g) {
                    *a += v;
                }
            }
            Self::Grid { dim, corners, .. } => {
                let (idx, w) = &corners[i];
                for (&c, &wc) in idx.iter().zip(w) {
                    let c = c as usize;
                    for (a, v) in grad[c * dim..(c + 1) * dim].iter_mut().zip(g) {
                        *a += wc * v;
                    }
                }
            }
        }
    }

    fn bake(&self, n: usize) -> Vec<f64> {
        match self {
            Self::Free { values, .. } => values.clone(),
            Self::Grid { dim, .. } => {
                let mut out = Vec::with_capacity(n * dim);
                (0..n).for_each(|i| self.push_feature(i, &mut out));
                out
            }
        }
    }
}

fn train_surface(dataset: &Dataset, config: &TrainConfig, hooks: &mut TrainHooks<'_>) -> Result<TrainOutcome> {
    let d = config.dim;
    let geometry = &dataset.geometry;
    let n = geometry.len();
    let mut params = PointFeatures::new(geometry, config)?;
    let hit_maps: Vec<Vec<u32>> = par::map_slice(&dataset.cameras, |cam| {
        render_surface(geometry, cam, config.point_radius)
            .hit_index
            .expect("surface render has a hit map")
    });
    let (plans, skipped_views) = plan_views(dataset, Some(&hit_maps));
    if plans.is_empty() {
        return Err(Error::invalid("no view has pixels covered by both a mask and the surface"));
    }
    let snapshot = |p: &PointFeatures| -> Result<FieldModel> { Ok(FieldModel::Surface(geometry.with_features(p.bake(n), d)?)) };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, BATCH_STREAM));
    let mut norm_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, NORM_STREAM));
    let mut opt = OptimizerState::new(&[params.params().len()]);
    let weights = config.weights();
    let mut log = Vec::with_capacity(config.iterations);
    let mut grad = vec![0.0; params.params().len()];
    for step in 0..config.iterations {
        let plan = &plans[step % plans.len()];
        let map = &dataset.views[plan.view].hierrep.as_ref().expect("planned view").partition.patch_index_map;
        let batch = sample_batch(&plan.candidates, map, config.rays_per_batch, &mut rng).expect("nonempty plan");
        let ids: Vec<usize> = batch.pixels.iter().map(|&p| plan.hits[p] as usize).collect();
        let mut feats = Vec::with_capacity(ids.len() * d);
        ids.iter().for_each(|&i| params.push_feature(i, &mut feats));
        let parts = contrastive_parts(feats, &batch, plan, config)?;
        let mut b = total_loss(&parts, &weights);
        let norm_ids = draw_ids(n, config.norm_samples, &mut norm_rng);
        let mut norm_feats = Vec::with_capacity(norm_ids.len() * d);
        norm_ids.iter().for_each(|&i| params.push_feature(i, &mut norm_feats));
        let norm_grad = add_field_norm(&mut b, &norm_feats, config);
        if !all_finite(&b) || !norm_grad.iter().all(|v| v.is_finite()) {
            return Err(abort_nonfinite(step, &snapshot(&params)?, hooks.checkpoint.as_deref()));
        }

        grad.iter_mut().for_each(|g| *g = 0.0);
        for (j, &i) in ids.iter().enumerate() {
            params.scatter(i, &b.feature_grad[j * d..(j + 1) * d], &mut grad);
        }
        for (j, &i) in norm_ids.iter().enumerate() {
            params.scatter(i, &norm_grad[j * d..(j + 1) * d], &mut grad);
        }
        let lr = lr_at(step, config);
        adam_step(&mut [params.params()], &[&grad], &mut opt, lr)?;

        let rec = LossRecord::new(step as u64, &b, lr);
        if let Some(f) = hooks.on_step.as_mut() {
            f(&rec);
        }
        log.push(rec);
        if checkpoint_due(step, config) {
            if let Some(p) = hooks.checkpoint.as_deref() {
                save_field(&snapshot(&params)?, p)?;
            }
        }
    }
    Ok(TrainOutcome {
        field: snapshot(&params)?,
        log,
        skipped_views,
    })
}

/// Voxel grid covering the scene geometry with a margin, features
/// initialized to random unit vectors and density to near-empty.
pub fn init_volume(geometry: &SurfaceField, config: &TrainConfig) -> Result<VoxelField> {
    let (lo, hi) = geometry.bounds();
    let pad = (hi - lo) * 0.1 + Vec3::repeat(1e-3);
    let mut f = VoxelField::new(config.volume_resolution, lo - pad, hi + pad, config.dim)?;
    f.features = random_features(f.num_nodes(), config.dim, config.init_noise, mix_seed(config.seed, INIT_STREAM));
    f.density_raw.iter_mut().for_each(|v| *v = -2.0);
    f.colors.iter_mut().for_each(|v| *v = 0.5);
    Ok(f)
}

fn train_volume(dataset: &Dataset, config: &TrainConfig, hooks: &mut TrainHooks<'_>) -> Result<TrainOutcome> {
    let mut field = init_volume(&dataset.geometry, config)?;
    let (plans, skipped_views) = plan_views(dataset, None);
    if plans.is_empty() {
        return Err(Error::invalid("no view has masked pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, BATCH_STREAM));
    let mut norm_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, NORM_STREAM));
    let mut opt = OptimizerState::new(&[field.density_raw.len(), field.features.len(), field.colors.len()]);
    let weights = config.weights();
    let mut log = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let plan = &plans[step % plans.len()];
        let view = &dataset.views[plan.view];
        let cam = &dataset.cameras[plan.view];
        let map = &view.hierrep.as_ref().expect("planned view").partition.patch_index_map;
        let batch = sample_batch(&plan.candidates, map, config.rays_per_batch, &mut rng).expect("nonempty plan");
        let rays: Vec<_> = batch.pixels.iter().map(|&p| cam.pixel_ray(p % cam.width, p / cam.width)).collect();
        let sampling = Sampling::Stratified {
            seed: mix_seed(config.seed, RAY_STREAM + step as u64),
        };
        let (out, cache) = render_rays(&field, &rays, config.samples_per_ray, sampling)?;
        let target: Vec<[f64; 3]> = batch.pixels.iter().map(|&p| view.rgb[p]).collect();
        let mut parts = contrastive_parts(out.features.clone(), &batch, plan, config)?;
        parts.l_color = Some(loss_color(&out.colors, &target));
        parts.l_opacity = Some(loss_opacity(&out.opacity));
        let mut b = total_loss(&parts, &weights);
        let d = config.dim;
        let norm_ids = draw_ids(field.num_nodes(), config.norm_samples, &mut norm_rng);
        let norm_feats: Vec<f64> = norm_ids.iter().flat_map(|&i| field.features[i * d..(i + 1) * d].to_vec()).collect();
        let norm_grad = add_field_norm(&mut b, &norm_feats, config);
        if !all_finite(&b) || !norm_grad.iter().all(|v| v.is_finite()) {
            return Err(abort_nonfinite(step, &FieldModel::Volume(field.clone()), hooks.checkpoint.as_deref()));
        }

        let n = rays.len();
        let cot = RayCotangents {
            features: b.feature_grad.clone(),
            colors: b.color_grad.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            depth: vec![0.0; n],
            opacity: b.opacity_grad.clone(),
        };
        let mut g = backprop_volume(&field, &cache, &cot)?;
        for (j, &i) in norm_ids.iter().enumerate() {
            for (a, v) in g.features[i * d..(i + 1) * d].iter_mut().zip(&norm_grad[j * d..(j + 1) * d]) {
                *a += v;
            }
        }
        let lr = lr_at(step, config);
        adam_step(
            &mut [&mut field.density_raw, &mut field.features, &mut field.colors],
            &[&g.density_raw, &g.features, &g.colors],
            &mut opt,
            lr,
        )?;
        field.touch();

        let rec = LossRecord::new(step as u64, &b, lr);
        if let Some(f) = hooks.on_step.as_mut() {
            f(&rec);
        }
        log.push(rec);
        if checkpoint_due(step, config) {
            if let Some(p) = hooks.checkpoint.as_deref() {
                save_field(&FieldModel::Volume(field.clone()), p)?;
            }
        }
    }
    Ok(TrainOutcome {
        field: FieldModel::Volume(field),
        log,
        skipped_views,
    })
}
