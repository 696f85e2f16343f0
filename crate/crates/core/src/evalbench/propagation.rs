use serde::{Deserialize, Serialize};

use super::{best_iou_gap, dot, render_all, unit, ScoreMap, ScoreRule};
use crate::error::{Error, Result};
use crate::field::{Camera, FieldModel, RenderOptions, RenderedView, Vec3};
use crate::mask::Mask;
use crate::par;
use crate::synthdata::{Dataset, Level};

/// Scoring knobs for cross-view propagation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Weight of the strongest negative match.
    pub beta: f64,
    /// Percentile of positive similarities standing in for their maximum.
    pub positive_percentile: f64,
    /// Spatial decay; `None` means 4 / scene diagonal.
    pub alpha: Option<f64>,
    /// Percentile of positive-scribble scores used as threshold without a mask.
    pub scribble_percentile: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            beta: 0.15,
            positive_percentile: 95.0,
            alpha: None,
            scribble_percentile: 10.0,
        }
    }
}

impl PropagationConfig {
    pub fn alpha_for(&self, diagonal: f64) -> f64 {
        self.alpha.unwrap_or(4.0 / diagonal.max(1e-12))
    }
}

/// Rendered pixels lifted to world positions with unit features.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelCloud {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub positions: Vec<Vec3>,
    /// Unit features, zero rows where invalid.
    pub features: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PixelCloud {
    /// Lifts each covered pixel to its depth along the camera ray. Volume
    /// renders carry opacity-weighted depth, so it is divided back out.
    pub fn from_render(view: &RenderedView, camera: &Camera) -> Self {
        let d = view.dim;
        let n = view.num_pixels();
        let mut positions = vec![Vec3::zeros(); n];
        let mut features = vec![0.0; n * d];
        let mut valid = vec![false; n];
        for p in 0..n {
            if !view.covered(p) {
                continue;
            }
            let Some(f) = unit(view.feature(p)) else { continue };
            let z = view.depth[p] / view.opacity[p].max(1e-12);
            positions[p] = camera.unproject(p % view.width, p / view.width, z);
            features[p * d..(p + 1) * d].copy_from_slice(&f);
            valid[p] = true;
        }
        Self {
            width: view.width,
            height: view.height,
            dim: d,
            positions,
            features,
            valid,
        }
    }

    pub fn feature(&self, p: usize) -> &[f64] {
        &self.features[p * self.dim..(p + 1) * self.dim]
    }

    pub fn valid_mask(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.valid[y * self.width + x])
    }
}

/// `exp(−α‖x₁ − x₂‖)·(1 + f₁·f₂)` for unit features.
pub fn distance_weighted_sim(x1: &Vec3, f1: &[f64], x2: &Vec3, f2: &[f64], alpha: f64) -> f64 {
    (-alpha * (x1 - x2).norm()).exp() * (1.0 + dot(f1, f2))
}

/// Linearly interpolated percentile `q ∈ [0, 100]` of `values`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Score of every target pixel: the positive-similarity percentile minus
/// `β` times the largest negative similarity. Invalid pixels get the
/// minimum score `−2β − 1`, below anything a valid pixel can reach.
pub fn propagation_scores(
    reference: &PixelCloud,
    positives: &[usize],
    negatives: &[usize],
    target: &PixelCloud,
    view_index: usize,
    cfg: &PropagationConfig,
    alpha: f64,
) -> Result<ScoreMap> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("propagation needs positive and negative samples"));
    }
    if reference.dim != target.dim {
        return Err(Error::invalid("reference and target feature widths differ"));
    }
    let floor = floor_score(cfg);
    let scores = par::map_range(target.valid.len(), |p| {
        if !target.valid[p] {
            return floor;
        }
        let (x, f) = (&target.positions[p], target.feature(p));
        let sims = |set: &[usize]| -> Vec<f64> {
            set.iter()
                .map(|&r| distance_weighted_sim(x, f, &reference.positions[r], reference.feature(r), alpha))
                .collect()
        };
        let pos = percentile(&sims(positives), cfg.positive_percentile).expect("nonempty");
        let neg = sims(negatives).into_iter().fold(0.0, f64::max);
        pos - cfg.beta * neg
    });
    Ok(ScoreMap {
        width: target.width,
        height: target.height,
        scores,
        view: view_index,
        query: None,
        rule: ScoreRule::Propagation,
    })
}

fn floor_score(cfg: &PropagationConfig) -> f64 {
    -2.0 * cfg.beta - 1.0
}

/// What the user marked in the reference view.
#[derive(Clone, Debug, PartialEq)]
pub enum InstancePrompt {
    /// Object mask; its complement supplies negatives.
    Mask(Mask),
    /// Rasterized scribbles as pixel indices.
    Scribbles { positive: Vec<usize>, negative: Vec<usize> },
}

/// Pixels on the polyline through `points`, sorted and deduplicated.
pub fn rasterize_polyline(width: usize, height: usize, points: &[(i64, i64)]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut push = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            out.push(y as usize * width + x as usize);
        }
    };
    if let [(x, y)] = points {
        push(*x, *y);
    }
    for w in points.windows(2) {
        let ((mut x0, mut y0), (x1, y1)) = (w[0], w[1]);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let mut err = dx + dy;
        loop {
            push(x0, y0);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Result of propagating one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub threshold: f64,
    /// IoU of the fitted threshold on the reference view (mask prompts).
    pub reference_iou: Option<f64>,
    pub masks: Vec<Mask>,
    pub scores: Vec<ScoreMap>,
}

/// Fits a threshold on the reference view, then applies it unchanged to
/// every target. With a mask prompt the threshold is the center of the
/// interval that maximizes reference IoU;
/// with scribbles it is a low percentile of the positive-scribble scores.
pub fn propagate_instance(
    reference: &PixelCloud,
    reference_view: usize,
    prompt: &InstancePrompt,
    targets: &[(usize, &PixelCloud)],
    cfg: &PropagationConfig,
    alpha: f64,
) -> Result<Propagation> {
    let keep = |v: Vec<usize>| -> Vec<usize> { v.into_iter().filter(|&p| reference.valid[p]).collect() };
    let (positives, negatives) = match prompt {
        InstancePrompt::Mask(m) => {
            if m.width() != reference.width || m.height() != reference.height {
                return Err(Error::invalid("prompt mask size differs from the reference view"));
            }
            (
                keep(m.indices().collect()),
                keep(m.complement().indices().collect()),
            )
        }
        InstancePrompt::Scribbles { positive, negative } => (keep(positive.clone()), keep(negative.clone())),
    };
    let ref_scores = propagation_scores(reference, &positives, &negatives, reference, reference_view, cfg, alpha)?;
    let (threshold, reference_iou) = match prompt {
        InstancePrompt::Mask(m) => {
            // The gap center transfers to other views better than its lower
            // end, which sits right against the weakest reference pixel.
            let gap = best_iou_gap(&ref_scores, m)?;
            (gap.midpoint(), Some(gap.iou))
        }
        InstancePrompt::Scribbles { .. } => {
            let s: Vec<f64> = positives.iter().map(|&p| ref_scores.scores[p]).collect();
            // Strictly below the percentile so that value itself is kept.
            let t = percentile(&s, cfg.scribble_percentile).expect("nonempty");
            (t - 1e-12, None)
        }
    };
    let mut masks = Vec::with_capacity(targets.len());
    let mut scores = Vec::with_capacity(targets.len());
    for &(view, cloud) in targets {
        let map = propagation_scores(reference, &positives, &negatives, cloud, view, cfg, alpha)?;
        masks.push(map.threshold(threshold));
        scores.push(map);
    }
    Ok(Propagation {
        threshold,
        reference_iou,
        masks,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceQueryResult {
    pub object: u32,
    pub reference_view: usize,
    pub target_view: usize,
    pub iou: f64,
}

/// Cross-view propagation over every labeled object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub pairs: Vec<InstanceQueryResult>,
    pub miou: f64,
    /// Per object: fitted reference IoU and the IoU of propagating onto the
    /// reference view itself.
    pub self_checks: Vec<(u32, f64, f64)>,
}

/// For each object, uses its largest visible footprint as the reference mask
/// and propagates to every other view where it covers at least `min_area`
/// pixels.
pub fn instance_benchmark(
    field: &FieldModel,
    dataset: &Dataset,
    opts: &RenderOptions,
    cfg: &PropagationConfig,
    min_area: usize,
) -> Result<InstanceResult> {
    let renders = render_all(field, dataset, opts)?;
    let clouds: Vec<PixelCloud> = renders
        .iter()
        .zip(&dataset.cameras)
        .map(|(r, c)| PixelCloud::from_render(r, c))
        .collect();
    let labels: Vec<_> = (0..dataset.num_views()).map(|v| dataset.labels(v)).collect::<Result<_>>()?;
    let mut objects: Vec<u32> = labels.iter().flat_map(|l| l.areas(Level::Object)).map(|(o, _)| o).collect();
    objects.sort_unstable();
    objects.dedup();
    let alpha = cfg.alpha_for(dataset.diagonal());
    let mut pairs = Vec::new();
    let mut self_checks = Vec::new();
    for o in objects {
        let areas: Vec<usize> = labels.iter().map(|l| l.mask_of(Level::Object, o).count()).collect();
        let reference = (0..areas.len()).max_by_key(|&v| (areas[v], std::cmp::Reverse(v))).expect("views exist");
        if areas[reference] < min_area {
            continue;
        }
        let gt_ref = labels[reference].mask_of(Level::Object, o);
        let mut targets = vec![(reference, &clouds[reference])];
        targets.extend((0..areas.len()).filter(|&v| v != reference && areas[v] >= min_area).map(|v| (v, &clouds[v])));
        let prop = match propagate_instance(&clouds[reference], reference, &InstancePrompt::Mask(gt_ref.clone()), &targets, cfg, alpha) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("object {o}: {e}");
                continue;
            }
        };
        self_checks.push((o, prop.reference_iou.unwrap_or(0.0), prop.masks[0].iou(&gt_ref)));
        for (&(v, _), m) in targets.iter().zip(&prop.masks).skip(1) {
            pairs.push(InstanceQueryResult {
                object: o,
                reference_view: reference,
                target_view: v,
                iou: m.iou(&labels[v].mask_of(Level::Object, o)),
            });
        }
    }
    let miou = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.iou).sum::<f64>() / pairs.len() as f64
    };
    Ok(InstanceResult {
        pairs,
        miou,
        self_checks,
    })
}
