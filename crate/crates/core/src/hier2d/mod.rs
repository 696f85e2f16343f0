//! Per-image hierarchical representation built from overlapping binary masks.
//!
//! Pixels are grouped into *patches*: maximal sets of pixels that belong to
//! exactly the same masks. Masks then vote on how related two patches are
//! (the number of masks containing both), and sorting one patch's votes
//! yields its hierarchy levels.

mod format;

use std::collections::HashMap;

pub use format::{deserialize_hierrep, serialize_hierrep, HierRepMeta, HIERREP_MAGIC, HIERREP_VERSION};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::par;

/// Patch id stored for pixels that no mask covers.
pub const NULL_PATCH: u32 = u32::MAX;

/// The masks proposed for one image.
#[derive(Clone, Debug)]
pub struct MaskSet {
    width: usize,
    height: usize,
    masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(width: usize, height: usize, masks: Vec<Mask>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::invalid("mask set is empty; there is no segmentation evidence"));
        }
        for (k, m) in masks.iter().enumerate() {
            if m.width() != width || m.height() != height {
                return Err(Error::invalid(format!(
                    "mask {k} is {}x{}, expected {width}x{height}",
                    m.width(),
                    m.height()
                )));
            }
            if m.is_empty() {
                return Err(Error::invalid(format!("mask {k} has no set pixels")));
            }
        }
        Ok(Self { width, height, masks })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Dense bit matrix with rows packed into 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        let stride = cols.div_ceil(64).max(1);
        Self {
            rows,
            cols,
            stride,
            words: vec![0; rows * stride],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.stride..(r + 1) * self.stride]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.row(r)[c / 64] >> (c % 64)) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize) {
        self.words[r * self.stride + c / 64] |= 1 << (c % 64);
    }

    fn push_row(&mut self, row: &[u64]) {
        debug_assert_eq!(row.len(), self.stride);
        self.words.extend_from_slice(row);
        self.rows += 1;
    }

    /// Number of set bits in the AND of two rows.
    pub fn row_overlap(&self, a: usize, b: usize) -> u32 {
        self.row(a)
            .iter()
            .zip(self.row(b))
            .map(|(x, y)| (x & y).count_ones())
            .sum()
    }
}

/// Membership-equivalence partition of an image's pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPartition {
    pub width: usize,
    pub height: usize,
    /// Row-major patch id per pixel, [`NULL_PATCH`] where no mask applies.
    pub patch_index_map: Vec<u32>,
    /// `N_p × N_m`; bit `(p, k)` is set when patch `p` lies inside mask `k`.
    pub membership: BitMatrix,
    pub pixel_counts: Vec<u32>,
}

impl PatchPartition {
    pub fn num_patches(&self) -> usize {
        self.membership.rows()
    }

    pub fn num_masks(&self) -> usize {
        self.membership.cols()
    }

    pub fn patch_at(&self, x: usize, y: usize) -> Option<u32> {
        let p = self.patch_index_map[y * self.width + x];
        (p != NULL_PATCH).then_some(p)
    }

    /// Indicator mask of one patch.
    pub fn patch_mask(&self, patch: u32) -> Mask {
        let mut m = Mask::new(self.width, self.height);
        for (i, &p) in self.patch_index_map.iter().enumerate() {
            if p == patch {
                m.set_index(i, true);
            }
        }
        m
    }
}

/// Patch-pair vote counts: how many masks contain both patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrelationMatrix {
    n: usize,
    votes: Vec<u32>,
}

impl CorrelationMatrix {
    pub fn from_votes(n: usize, votes: Vec<u32>) -> Result<Self> {
        if votes.len() != n * n {
            return Err(Error::invalid(format!(
                "correlation matrix needs {} entries, got {}",
                n * n,
                votes.len()
            )));
        }
        Ok(Self { n, votes })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.votes[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.votes[i * self.n..(i + 1) * self.n]
    }

    pub fn votes(&self) -> &[u32] {
        &self.votes
    }
}

/// Patches grouped by decreasing vote count against one anchor patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierLevels {
    pub anchor: u32,
    /// `levels[d - 1]` is the patch set at depth `d`, ids ascending.
    pub levels: Vec<Vec<u32>>,
    pub vote_of_level: Vec<u32>,
}

impl HierLevels {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Depth (1-based) of `patch`, if it shares any mask with the anchor.
    pub fn depth_of(&self, patch: u32) -> Option<usize> {
        self.levels
            .iter()
            .position(|l| l.binary_search(&patch).is_ok())
            .map(|d| d + 1)
    }
}

/// Patch index map plus correlation matrix for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierRep {
    pub partition: PatchPartition,
    pub correlation: CorrelationMatrix,
}

impl HierRep {
    pub fn build(masks: &MaskSet) -> Result<Self> {
        let partition = build_partition(masks)?;
        let correlation = build_correlation(&partition);
        Ok(Self {
            partition,
            correlation,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.partition.num_patches()
    }

    pub fn levels(&self, anchor: u32) -> Result<HierLevels> {
        hierarchy_levels(&self.correlation, anchor)
    }

    /// Levels for every patch, indexed by anchor id.
    pub fn all_levels(&self) -> Vec<HierLevels> {
        par::map_range(self.num_patches(), |a| {
            hierarchy_levels(&self.correlation, a as u32).expect("anchor in range")
        })
    }
}

/// Groups pixels by their full mask-membership vector.
///
/// Ids are assigned in row-major first-encounter order; pixels in no mask get
/// [`NULL_PATCH`]. Disconnected pixels with identical membership share an id.
pub fn build_partition(masks: &MaskSet) -> Result<PatchPartition> {
    if masks.is_empty() {
        return Err(Error::invalid("mask set is empty"));
    }
    let (w, h) = (masks.width(), masks.height());
    for m in masks.masks() {
        if m.width() != w || m.height() != h {
            return Err(Error::invalid("mask dimensions disagree"));
        }
    }
    let n_masks = masks.len();
    let stride = n_masks.div_ceil(64).max(1);

    let mut keys = vec![0u64; w * h * stride];
    par::for_each_chunk_mut(&mut keys, w * stride, |y, row| {
        for (k, m) in masks.masks().iter().enumerate() {
            for x in 0..w {
                if m.get(x, y) {
                    row[x * stride + k / 64] |= 1 << (k % 64);
                }
            }
        }
    });

    let mut ids: HashMap<&[u64], u32> = HashMap::new();
    let mut membership = BitMatrix {
        rows: 0,
        cols: n_masks,
        stride,
        words: Vec::new(),
    };
    let mut pixel_counts = Vec::new();
    let mut patch_index_map = Vec::with_capacity(w * h);
    for key in keys.chunks_exact(stride) {
        if key.iter().all(|&k| k == 0) {
            patch_index_map.push(NULL_PATCH);
            continue;
        }
        let next = ids.len() as u32;
        let id = *ids.entry(key).or_insert_with(|| {
            membership.push_row(key);
            pixel_counts.push(0);
            next
        });
        pixel_counts[id as usize] += 1;
        patch_index_map.push(id);
    }

    Ok(PatchPartition {
        width: w,
        height: h,
        patch_index_map,
        membership,
        pixel_counts,
    })
}

/// `votes = membership · membershipᵀ`, computed with popcounts.
pub fn build_correlation(partition: &PatchPartition) -> CorrelationMatrix {
    let n = partition.num_patches();
    let m = &partition.membership;
    let rows = par::map_range(n, |i| (0..n).map(|j| m.row_overlap(i, j)).collect::<Vec<_>>());
    CorrelationMatrix {
        n,
        votes: rows.concat(),
    }
}

/// Sorts patches by vote count against `anchor` into hierarchy levels.
///
/// Equal counts share a level; patches with zero votes are excluded.
pub fn hierarchy_levels(correlation: &CorrelationMatrix, anchor: u32) -> Result<HierLevels> {
    let n = correlation.size();
    if anchor as usize >= n {
        return Err(Error::invalid(format!(
            "anchor patch {anchor} out of range (N_p = {n})"
        )));
    }
    let row = correlation.row(anchor as usize);
    let mut related: Vec<(u32, u32)> = row
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .map(|(j, &v)| (v, j as u32))
        .collect();
    related.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut levels: Vec<Vec<u32>> = Vec::new();
    let mut vote_of_level = Vec::new();
    for (v, j) in related {
        if vote_of_level.last() != Some(&v) {
            vote_of_level.push(v);
            levels.push(Vec::new());
        }
        levels.last_mut().expect("level pushed").push(j);
    }
    Ok(HierLevels {
        anchor,
        levels,
        vote_of_level,
    })
}
