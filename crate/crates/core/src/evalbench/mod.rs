//! Segmentation benchmarks: click-query score maps with IoU-optimal
//! thresholds, cross-view instance propagation and ablation sweeps.

mod ablation;
mod ordering;
mod propagation;
mod report;

pub use ablation::{ablation_sweep, AblationRow, AblationTable, Sweep};
pub use ordering::{hierarchy_ordering, OrderingPair, OrderingResult};
pub use propagation::{
    distance_weighted_sim, instance_benchmark, percentile, propagate_instance, propagation_scores, rasterize_polyline,
    InstancePrompt, InstanceQueryResult, InstanceResult, PixelCloud, PropagationConfig, Propagation,
};
pub use report::{heat_color, overlay_tp_fp_fn, score_map_image, FN_COLOR, FP_COLOR, TP_COLOR};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldModel, RenderOptions, RenderedView};
use crate::mask::Mask;
use crate::par;
use crate::synthdata::Dataset;

/// Score given to pixels without a rendered feature. Below every cosine.
pub const EMPTY_SCORE: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreRule {
    Cosine,
    Propagation,
}

/// Per-pixel scores of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
    pub view: usize,
    /// Query pixel; `None` for maps built from pixel sets.
    pub query: Option<(usize, usize)>,
    pub rule: ScoreRule,
}

impl ScoreMap {
    /// `{p : score(p) > t}`.
    pub fn threshold(&self, t: f64) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.scores[y * self.width + x] > t)
    }
}

/// Unit-length copy of `f`, or `None` for a zero vector.
pub(crate) fn unit(f: &[f64]) -> Option<Vec<f64>> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n > 1e-12 && n.is_finite()).then(|| f.iter().map(|v| v / n).collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of every rendered feature to the feature at `(x, y)`.
/// Uncovered pixels score [`EMPTY_SCORE`].
pub fn cosine_score_map(view: &RenderedView, view_index: usize, x: usize, y: usize) -> Result<ScoreMap> {
    if x >= view.width || y >= view.height {
        return Err(Error::invalid(format!("query pixel ({x}, {y}) outside the image")));
    }
    let q = y * view.width + x;
    let anchor = (view.covered(q))
        .then(|| unit(view.feature(q)))
        .flatten()
        .ok_or_else(|| Error::invalid(format!("no surface at query pixel ({x}, {y})")))?;
    Ok(score_against(view, view_index, &[anchor], Some((x, y))))
}

/// Per-pixel maximum cosine similarity to any of `anchors` (unit vectors).
pub fn score_against(view: &RenderedView, view_index: usize, anchors: &[Vec<f64>], query: Option<(usize, usize)>) -> ScoreMap {
    let scores = par::map_range(view.num_pixels(), |p| {
        if !view.covered(p) {
            return EMPTY_SCORE;
        }
        match unit(view.feature(p)) {
            Some(f) => anchors.iter().map(|a| dot(a, &f).clamp(-1.0, 1.0)).fold(EMPTY_SCORE, f64::max),
            None => EMPTY_SCORE,
        }
    });
    ScoreMap {
        width: view.width,
        height: view.height,
        scores,
        view: view_index,
        query,
        rule: ScoreRule::Cosine,
    }
}

/// Threshold `t` maximizing IoU of `{score > t}` against `gt`, with that IoU.
/// Candidates are every distinct score plus one value below the minimum;
/// ties go to the larger threshold. Two empty masks have IoU 1.
pub fn best_iou_threshold(map: &ScoreMap, gt: &Mask) -> Result<(f64, f64)> {
    best_iou_gap(map, gt).map(|g| (g.lower, g.iou))
}

/// The interval of thresholds that all select the IoU-optimal set chosen by
/// [`best_iou_threshold`]: every `t` in `[lower, upper)` gives the same mask.
/// `upper` is infinite when the optimal set is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdGap {
    pub lower: f64,
    pub upper: f64,
    pub iou: f64,
}

impl ThresholdGap {
    /// Center of the gap; the lower end when the gap is unbounded.
    pub fn midpoint(&self) -> f64 {
        if self.upper.is_finite() {
            0.5 * (self.lower + self.upper)
        } else {
            self.lower
        }
    }
}

pub fn best_iou_gap(map: &ScoreMap, gt: &Mask) -> Result<ThresholdGap> {
    if gt.width() != map.width || gt.height() != map.height {
        return Err(Error::invalid("score map and mask sizes differ"));
    }
    if map.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("score map has non-finite values"));
    }
    let mut order: Vec<usize> = (0..map.scores.len()).collect();
    order.sort_by(|&a, &b| map.scores[b].total_cmp(&map.scores[a]));
    let gt_n = gt.count();
    let iou = |inter: usize, pred: usize| {
        let union = gt_n + pred - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    let Some(&top) = order.first() else {
        return Ok(ThresholdGap {
            lower: 0.0,
            upper: f64::INFINITY,
            iou: 1.0,
        });
    };
    let mut best = ThresholdGap {
        lower: map.scores[top],
        upper: f64::INFINITY,
        iou: iou(0, 0),
    };
    let (mut inter, mut pred) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let v = map.scores[order[i]];
        while i < order.len() && map.scores[order[i]] == v {
            pred += 1;
            inter += gt.get_index(order[i]) as usize;
            i += 1;
        }
        let t = if i < order.len() { map.scores[order[i]] } else { v - 1.0 };
        let s = iou(inter, pred);
        if s > best.iou {
            best = ThresholdGap {
                lower: t,
                upper: v,
                iou: s,
            };
        }
    }
    Ok(best)
}

/// Outcome of one click query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub iou_l1: f64,
    pub iou_l2: f64,
    pub threshold_l1: f64,
    pub threshold_l2: f64,
}

/// Per-query IoUs and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub queries: Vec<QueryResult>,
    pub miou_l1: f64,
    pub miou_l2: f64,
    pub miou_avg: f64,
    /// Free-form description of the evaluated setting.
    pub config: String,
}

impl BenchResult {
    pub fn from_queries(queries: Vec<QueryResult>, config: impl Into<String>) -> Self {
        let n = queries.len().max(1) as f64;
        let miou_l1 = queries.iter().map(|q| q.iou_l1).sum::<f64>() / n;
        let miou_l2 = queries.iter().map(|q| q.iou_l2).sum::<f64>() / n;
        Self {
            queries,
            miou_l1,
            miou_l2,
            miou_avg: (miou_l1 + miou_l2) / 2.0,
            config: config.into(),
        }
    }
}

/// Renders every view of `dataset` through `field`.
pub fn render_all(field: &FieldModel, dataset: &Dataset, opts: &RenderOptions) -> Result<Vec<RenderedView>> {
    par::map_slice(&dataset.cameras, |c| field.render(c, opts)).into_iter().collect()
}

/// Click benchmark: for each dataset query, score the query view against the
/// clicked feature and fit the best threshold separately for the small (L1)
/// and large (L2) ground-truth regions. A click on an empty pixel scores 0.
pub fn hierarchical_benchmark(field: &FieldModel, dataset: &Dataset, opts: &RenderOptions) -> Result<BenchResult> {
    if dataset.queries.is_empty() {
        return Err(Error::invalid("dataset has no benchmark queries"));
    }
    let renders = render_all(field, dataset, opts)?;
    benchmark_renders(&renders, dataset, field.backend_name())
}

/// [`hierarchical_benchmark`] over precomputed renders, one per view.
pub fn benchmark_renders(renders: &[RenderedView], dataset: &Dataset, config: &str) -> Result<BenchResult> {
    let results: Vec<Result<QueryResult>> = par::map_slice(&dataset.queries, |q| {
        let labels = dataset.labels(q.view)?;
        let (m1, m2) = q.masks(labels)?;
        let view = renders.get(q.view).ok_or_else(|| Error::invalid(format!("no render of view {}", q.view)))?;
        let (t1, i1, t2, i2) = match cosine_score_map(view, q.view, q.x, q.y) {
            Ok(map) => {
                let (t1, i1) = best_iou_threshold(&map, &m1)?;
                let (t2, i2) = best_iou_threshold(&map, &m2)?;
                (t1, i1, t2, i2)
            }
            Err(_) => {
                log::warn!("query at view {} ({}, {}) hit no surface", q.view, q.x, q.y);
                (1.0, 0.0, 1.0, 0.0)
            }
        };
        Ok(QueryResult {
            view: q.view,
            x: q.x,
            y: q.y,
            iou_l1: i1,
            iou_l2: i2,
            threshold_l1: t1,
            threshold_l2: t2,
        })
    });
    Ok(BenchResult::from_queries(results.into_iter().collect::<Result<_>>()?, config))
}

/// One JSON object per query followed by a summary object.
pub fn bench_records(result: &BenchResult) -> String {
    let mut out = String::new();
    for q in &result.queries {
        out.push_str(&serde_json::to_string(&serde_json::json!({"kind": "query", "result": q})).expect("serializable"));
        out.push('\n');
    }
    let summary = serde_json::json!({
        "kind": "summary",
        "config": result.config,
        "queries": result.queries.len(),
        "miou_l1": result.miou_l1,
        "miou_l2": result.miou_l2,
        "miou_avg": result.miou_avg,
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    out
}

/// Fixed-width text summary.
pub fn bench_table(result: &BenchResult) -> String {
    format!(
        "{:<24} {:>8} {:>8} {:>8}\n{:<24} {:>8.1} {:>8.1} {:>8.1}\n",
        "setting",
        "L1",
        "L2",
        "Avg",
        result.config,
        100.0 * result.miou_l1,
        100.0 * result.miou_l2,
        100.0 * result.miou_avg
    )
}
