use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{LabelMaps, Level, SynthScene};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::util::mix_seed;

const QUERY_STREAM: u64 = 1 << 21;

/// A benchmark query: a pixel plus references to its small (L1) and large
/// (L2) ground-truth regions, each written as `"<level>:<id>"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub l1: String,
    pub l2: String,
}

pub(crate) fn resolve_ref(labels: &LabelMaps, r: &str) -> Result<Mask> {
    let bad = || Error::format("queries", format!("bad mask reference {r:?}"));
    let (lv, id) = r.split_once(':').ok_or_else(bad)?;
    let level = Level::parse(lv).ok_or_else(bad)?;
    let id: u32 = id.parse().map_err(|_| bad())?;
    Ok(labels.mask_of(level, id))
}

impl Query {
    pub fn masks(&self, labels: &LabelMaps) -> Result<(Mask, Mask)> {
        Ok((resolve_ref(labels, &self.l1)?, resolve_ref(labels, &self.l2)?))
    }

    pub fn to_line(&self) -> String {
        format!("{} {} {} {} {}", self.view, self.x, self.y, self.l1, self.l2)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::format("queries", format!("malformed line {line:?}"));
        let c: Vec<&str> = line.split_whitespace().collect();
        if c.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            view: c[0].parse().map_err(|_| bad())?,
            x: c[1].parse().map_err(|_| bad())?,
            y: c[2].parse().map_err(|_| bad())?,
            l1: c[3].to_string(),
            l2: c[4].to_string(),
        })
    }
}

/// Picks up to `per_view` queries in each view. Objects are ordered by
/// visible area and visited round-robin, starting at a view-dependent offset,
/// so small and large objects are both represented. Each query's part (L1)
/// and object (L2) regions cover at least `min_area` pixels and the part is a
/// proper subset of the object. The query pixel is drawn from the part's
/// interior when it has one.
pub fn make_benchmark_queries(scene: &SynthScene, per_view: usize, min_area: usize) -> Vec<Query> {
    let np = scene.spec.parts_per_object as u32;
    let mut out = Vec::new();
    for (view, labels) in scene.labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.spec.seed, QUERY_STREAM + view as u64));
        let parts = labels.areas(Level::Part);
        let mut objects: Vec<(u32, usize, Vec<(u32, usize)>)> = labels
            .areas(Level::Object)
            .into_iter()
            .filter(|&(_, a)| a >= min_area)
            .map(|(o, a)| {
                let mut ps: Vec<(u32, usize)> = parts
                    .iter()
                    .copied()
                    .filter(|&(p, pa)| p / np == o && pa >= min_area && pa < a)
                    .collect();
                ps.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
                (o, a, ps)
            })
            .filter(|(_, _, ps)| !ps.is_empty())
            .collect();
        if objects.is_empty() {
            continue;
        }
        objects.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        let n = objects.len();
        for k in 0..per_view {
            let (o, _, ps) = &objects[(view + k) % n];
            let Some(&(p, _)) = ps.get(k / n) else {
                continue;
            };
            let part_mask = labels.mask_of(Level::Part, p);
            let inner = part_mask.erode(1);
            let pool: Vec<usize> = if inner.count() > 0 { inner.indices().collect() } else { part_mask.indices().collect() };
            let &pix = pool.choose(&mut rng).expect("part has pixels");
            out.push(Query {
                view,
                x: pix % labels.width,
                y: pix / labels.width,
                l1: format!("part:{p}"),
                l2: format!("object:{o}"),
            });
        }
    }
    out
}
