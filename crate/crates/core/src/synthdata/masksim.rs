use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{Level, SynthScene};
use crate::mask::Mask;
use crate::par;
use crate::util::mix_seed;

/// Stream offset separating mask simulation from scene construction.
const MASK_STREAM: u64 = 1 << 20;

/// Simulated segmenter output for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedMasks {
    pub masks: Vec<Mask>,
    /// `"<level>:<id>"` for each mask.
    pub provenance: Vec<String>,
    /// For every visible object, ascending by id, which levels
    /// `[object, part, subpart]` contributed at least one mask.
    pub levels: Vec<(u32, [bool; 3])>,
}

/// Masks a segmenter might return for `view`. Every visible hierarchy node
/// is emitted independently with the probability of its level, re-drawn per
/// view. Emitted masks are jittered by a random dilation or erosion of at most
/// `jitter_px`, clipped to the visible footprint, and dropped with the
/// dropout rate. Empty masks are discarded.
pub fn simulate_masks(scene: &SynthScene, view: usize) -> SimulatedMasks {
    let spec = &scene.spec;
    let labels = &scene.labels[view];
    let footprint = labels.footprint();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, MASK_STREAM + view as u64));
    let (np, ns) = (spec.parts_per_object as u32, spec.subparts_per_part as u32);
    let parts = labels.areas(Level::Part);
    let subparts = labels.areas(Level::Subpart);

    let mut out = SimulatedMasks {
        masks: Vec::new(),
        provenance: Vec::new(),
        levels: Vec::new(),
    };
    for (object, _) in labels.areas(Level::Object) {
        let mut regions: Vec<(Level, u32)> = vec![(Level::Object, object)];
        regions.extend(parts.iter().filter(|(p, _)| p / np == object).map(|&(p, _)| (Level::Part, p)));
        regions.extend(
            subparts
                .iter()
                .filter(|(s, _)| s / ns / np == object)
                .map(|&(s, _)| (Level::Subpart, s)),
        );
        let mut seen = [false; 3];
        for (level, id) in regions {
            let li = level as usize;
            if rng.gen::<f64>() >= spec.level_probs[li] || rng.gen::<f64>() < spec.dropout {
                continue;
            }
            let mut m = labels.mask_of(level, id);
            let amp = rng.gen_range(0..=spec.jitter_px);
            if amp > 0 {
                m = if rng.gen::<bool>() { m.dilate(amp) } else { m.erode(amp) };
            }
            m.intersect_with(&footprint);
            if m.count() > 0 {
                seen[li] = true;
                out.masks.push(m);
                out.provenance.push(format!("{}:{id}", level.name()));
            }
        }
        out.levels.push((object, seen));
    }
    out
}

/// Mask simulation for every view, in view order.
pub fn simulate_all(scene: &SynthScene) -> Vec<SimulatedMasks> {
    par::map_range(scene.num_views(), |v| simulate_masks(scene, v))
}

/// Summary used for regression checks of the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSimStats {
    pub masks_per_view: Vec<usize>,
    /// Fraction of objects seen in ≥2 views whose set of emitted levels is
    /// not the same in all of them.
    pub inconsistency_rate: f64,
}

pub fn mask_sim_stats(sims: &[SimulatedMasks]) -> MaskSimStats {
    let mut levels: std::collections::BTreeMap<u32, Vec<[bool; 3]>> = Default::default();
    for s in sims {
        for &(o, l) in &s.levels {
            levels.entry(o).or_default().push(l);
        }
    }
    let multi: Vec<&Vec<[bool; 3]>> = levels.values().filter(|v| v.len() >= 2).collect();
    let inconsistent = multi.iter().filter(|v| v.iter().any(|l| *l != v[0])).count();
    MaskSimStats {
        masks_per_view: sims.iter().map(|s| s.masks.len()).collect(),
        inconsistency_rate: if multi.is_empty() {
            0.0
        } else {
            inconsistent as f64 / multi.len() as f64
        },
    }
}
