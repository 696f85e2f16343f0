use serde::{Deserialize, Serialize};

use super::{dot, render_all, unit};
use crate::error::Result;
use crate::field::{FieldModel, RenderOptions, RenderedView};
use crate::hier2d::{HierRep, NULL_PATCH};
use crate::par;
use crate::synthdata::Dataset;

/// Similarity profile of one anchor patch in one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingPair {
    pub view: usize,
    pub anchor: u32,
    /// `similarity[d - 1]`: mean cosine between the anchor's pixel features
    /// and the unit means of the depth-`d` patches.
    pub similarity: Vec<f64>,
}

impl OrderingPair {
    pub fn is_ordered(&self, tol: f64) -> bool {
        self.similarity.windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingResult {
    pub pairs: Vec<OrderingPair>,
    /// Share of all pairs whose profile is nonincreasing.
    pub fraction: f64,
    /// The same share over pairs with at least two rendered levels.
    pub fraction_multilevel: f64,
}

/// Unit mean rendered feature of every patch; `None` when no pixel of the
/// patch is covered.
fn patch_means(rep: &HierRep, view: &RenderedView) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; view.dim]; rep.num_patches()];
    for (pix, &p) in rep.partition.patch_index_map.iter().enumerate() {
        if p == NULL_PATCH || !view.covered(pix) {
            continue;
        }
        if let Some(f) = unit(view.feature(pix)) {
            for (s, v) in sums[p as usize].iter_mut().zip(f) {
                *s += v;
            }
        }
    }
    sums.into_iter().map(|s| unit(&s)).collect()
}

fn view_pairs(view_index: usize, rep: &HierRep, view: &RenderedView) -> Vec<OrderingPair> {
    let means = patch_means(rep, view);
    let mut anchor_pixels: Vec<Vec<Vec<f64>>> = vec![Vec::new(); rep.num_patches()];
    for (pix, &p) in rep.partition.patch_index_map.iter().enumerate() {
        if p != NULL_PATCH && view.covered(pix) {
            if let Some(f) = unit(view.feature(pix)) {
                anchor_pixels[p as usize].push(f);
            }
        }
    }
    let mut out = Vec::new();
    for levels in rep.all_levels() {
        let feats = &anchor_pixels[levels.anchor as usize];
        if feats.is_empty() {
            continue;
        }
        let similarity: Vec<f64> = levels
            .levels
            .iter()
            .filter_map(|level| {
                let ms: Vec<&Vec<f64>> = level.iter().filter_map(|&s| means[s as usize].as_ref()).collect();
                if ms.is_empty() {
                    return None;
                }
                let total: f64 = feats.iter().map(|f| ms.iter().map(|m| dot(f, m)).sum::<f64>()).sum();
                Some(total / (feats.len() * ms.len()) as f64)
            })
            .collect();
        out.push(OrderingPair {
            view: view_index,
            anchor: levels.anchor,
            similarity,
        });
    }
    out
}

/// Checks on every view with a hierarchy that anchors are most similar to
/// their own level and less similar to each coarser one. Levels without a
/// rendered pixel are skipped.
pub fn hierarchy_ordering(field: &FieldModel, dataset: &Dataset, opts: &RenderOptions, tol: f64) -> Result<OrderingResult> {
    let renders = render_all(field, dataset, opts)?;
    let per_view = par::map_range(dataset.num_views(), |v| match &dataset.views[v].hierrep {
        Some(rep) => view_pairs(v, rep, &renders[v]),
        None => Vec::new(),
    });
    let pairs: Vec<OrderingPair> = per_view.into_iter().flatten().collect();
    let share = |it: &mut dyn Iterator<Item = &OrderingPair>| {
        let (mut n, mut ok) = (0usize, 0usize);
        for p in it {
            n += 1;
            ok += p.is_ordered(tol) as usize;
        }
        if n == 0 {
            1.0
        } else {
            ok as f64 / n as f64
        }
    };
    Ok(OrderingResult {
        fraction: share(&mut pairs.iter()),
        fraction_multilevel: share(&mut pairs.iter().filter(|p| p.similarity.len() >= 2)),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier2d::MaskSet;
    use crate::mask::Mask;

    #[test]
    fn nested_masks_with_matching_features_are_ordered() {
        // Left half is one part, the whole row is the object.
        let (w, h) = (4, 1);
        let part = Mask::from_fn(w, h, |x, _| x < 2);
        let object = Mask::from_fn(w, h, |_, _| true);
        let rep = HierRep::build(&MaskSet::new(w, h, vec![part, object]).unwrap()).unwrap();
        let mut view = RenderedView::empty(w, h, 2);
        for pix in 0..w {
            view.opacity[pix] = 1.0;
            let f = if pix < 2 { [1.0, 0.0] } else { [0.6, 0.8] };
            view.features[pix * 2..pix * 2 + 2].copy_from_slice(&f);
        }
        let pairs = view_pairs(0, &rep, &view);
        assert_eq!(pairs.len(), 2);
        // The left patch shares two masks with itself and one with the right.
        let left = &pairs[0];
        assert_eq!(left.similarity.len(), 2);
        assert!((left.similarity[0] - 1.0).abs() < 1e-12);
        assert!((left.similarity[1] - 0.6).abs() < 1e-12);
        assert!(left.is_ordered(0.0));
        // The right patch ties with both, so it has a single level.
        assert_eq!(pairs[1].similarity.len(), 1);
    }
}
