use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_surface, Camera, SurfaceField, Vec3, NO_HIT};
use crate::mask::Mask;
use crate::par;
use crate::util::mix_seed;

/// Label value for pixels with no visible surface.
pub const NO_LABEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Box,
    Sphere,
    Cylinder,
}

/// Procedural scene recipe. Field names double as keys of the TOML spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierSceneSpec {
    pub name: String,
    pub objects: usize,
    pub parts_per_object: usize,
    pub subparts_per_part: usize,
    pub primitives: Vec<Primitive>,
    /// Surface samples per part.
    pub points_per_part: usize,
    pub seed: u64,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub point_radius: f64,
    /// Per-view probability that a visible `[object, part, subpart]` node
    /// gets a mask.
    pub level_probs: [f64; 3],
    pub dropout: f64,
    pub jitter_px: usize,
    pub queries_per_view: usize,
    pub min_query_area: usize,
}

impl Default for HierSceneSpec {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            objects: 3,
            parts_per_object: 3,
            subparts_per_part: 2,
            primitives: vec![Primitive::Box, Primitive::Sphere, Primitive::Cylinder],
            points_per_part: 1500,
            seed: 7,
            views: 12,
            width: 64,
            height: 64,
            fov_deg: 60.0,
            point_radius: 0.75,
            level_probs: [0.15, 0.9, 0.0],
            dropout: 0.05,
            jitter_px: 0,
            queries_per_view: 3,
            min_query_area: 12,
        }
    }
}

impl HierSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("objects", self.objects),
            ("parts_per_object", self.parts_per_object),
            ("subparts_per_part", self.subparts_per_part),
            ("points_per_part", self.points_per_part),
            ("views", self.views),
            ("width", self.width),
            ("height", self.height),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.primitives.is_empty() {
            return Err(Error::Config("primitives must not be empty".into()));
        }
        if self.level_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "level_probs must lie in [0, 1], got {:?}",
                self.level_probs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) {
            return Err(Error::Config("fov_deg must lie in (1, 170)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }
}

/// Per-point position in the ground-truth hierarchy, as global ids:
/// `part = object · P + p`, `subpart = part · S + s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HierPath {
    pub object: u32,
    pub part: u32,
    pub subpart: u32,
}

/// Ground-truth label images of one view; `NO_LABEL` where nothing is visible.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMaps {
    pub width: usize,
    pub height: usize,
    pub object: Vec<u32>,
    pub part: Vec<u32>,
    pub subpart: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Object,
    Part,
    Subpart,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Object, Level::Part, Level::Subpart];

    pub fn name(self) -> &'static str {
        match self {
            Level::Object => "object",
            Level::Part => "part",
            Level::Subpart => "subpart",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        Level::ALL.into_iter().find(|l| l.name() == s)
    }
}

impl LabelMaps {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn layer(&self, level: Level) -> &[u32] {
        match level {
            Level::Object => &self.object,
            Level::Part => &self.part,
            Level::Subpart => &self.subpart,
        }
    }

    pub fn mask_of(&self, level: Level, id: u32) -> Mask {
        let layer = self.layer(level);
        Mask::from_fn(self.width, self.height, |x, y| layer[y * self.width + x] == id)
    }

    pub fn footprint(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.object[y * self.width + x] != NO_LABEL)
    }

    /// Distinct ids at `level` with their pixel counts, ascending by id.
    pub fn areas(&self, level: Level) -> Vec<(u32, usize)> {
        let mut ids: Vec<u32> = self.layer(level).iter().copied().filter(|&v| v != NO_LABEL).collect();
        ids.sort_unstable();
        let mut out: Vec<(u32, usize)> = Vec::new();
        for id in ids {
            match out.last_mut() {
                Some((last, n)) if *last == id => *n += 1,
                _ => out.push((id, 1)),
            }
        }
        out
    }
}

/// A generated scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub spec: HierSceneSpec,
    /// Geometry and colors; the one-wide features are placeholders.
    pub geometry: SurfaceField,
    pub paths: Vec<HierPath>,
    pub cameras: Vec<Camera>,
    pub labels: Vec<LabelMaps>,
    /// Per-view point id winning each pixel.
    pub hit_maps: Vec<Vec<u32>>,
    /// Per-view rendered colors.
    pub rgb: Vec<Vec<[f64; 3]>>,
}

impl SynthScene {
    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    /// Length of the bounding-box diagonal of the geometry.
    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.geometry.bounds();
        (hi - lo).norm()
    }
}

struct PartShape {
    kind: Primitive,
    center: Vec3,
    /// Horizontal half-size.
    radius: f64,
    half_height: f64,
    /// Sector offset for the subpart split.
    phase: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Uniform point on the surface of a primitive, relative to its center.
fn sample_surface(shape: &PartShape, rng: &mut ChaCha8Rng) -> Vec3 {
    let (r, h) = (shape.radius, shape.half_height);
    match shape.kind {
        Primitive::Sphere => loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v * (r / n);
            }
        },
        Primitive::Box => {
            let side = 4.0 * (2.0 * r) * (2.0 * h);
            let cap = 2.0 * (2.0 * r) * (2.0 * r);
            let a = rng.gen_range(-r..r);
            let b = rng.gen_range(-1.0..1.0);
            if rng.gen::<f64>() * (side + cap) < cap {
                let y = if rng.gen::<bool>() { h } else { -h };
                Vec3::new(a, y, b * r)
            } else {
                let y = b * h;
                match rng.gen_range(0..4) {
                    0 => Vec3::new(r, y, a),
                    1 => Vec3::new(-r, y, a),
                    2 => Vec3::new(a, y, r),
                    _ => Vec3::new(a, y, -r),
                }
            }
        }
        Primitive::Cylinder => {
            let side = 2.0 * PI * r * 2.0 * h;
            let cap = 2.0 * PI * r * r;
            let theta = rng.gen_range(0.0..2.0 * PI);
            if rng.gen::<f64>() * (side + cap) < cap {
                let rho = r * rng.gen::<f64>().sqrt();
                let y = if rng.gen::<bool>() { h } else { -h };
                Vec3::new(rho * theta.cos(), y, rho * theta.sin())
            } else {
                Vec3::new(r * theta.cos(), rng.gen_range(-h..h), r * theta.sin())
            }
        }
    }
}

fn place_objects(spec: &HierSceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64, f64)>> {
    const GAP: f64 = 0.2;
    const TRIES: usize = 2000;
    let arena = 0.4 + 0.55 * (spec.objects as f64).sqrt();
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(spec.objects);
    for o in 0..spec.objects {
        let radius = rng.gen_range(0.45..0.75);
        let mut ok = false;
        for _ in 0..TRIES {
            let rho = arena * rng.gen::<f64>().sqrt();
            let th = rng.gen_range(0.0..2.0 * PI);
            let (x, z) = (rho * th.cos(), rho * th.sin());
            if placed
                .iter()
                .all(|&(px, pz, pr)| ((px - x).powi(2) + (pz - z).powi(2)).sqrt() >= pr + radius + GAP)
            {
                placed.push((x, z, radius));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::invalid(format!(
                "could not place object {o} without overlap after {TRIES} tries"
            )));
        }
    }
    Ok(placed)
}

fn ring_cameras(spec: &HierSceneSpec, points: &[Vec3], rng: &mut ChaCha8Rng) -> Result<Vec<Camera>> {
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let reach = points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
    let fov = spec.fov_deg.to_radians();
    let dist = 1.05 * reach / (0.5 * fov).sin();
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..spec.views)
        .map(|k| {
            let az = phase + 2.0 * PI * k as f64 / spec.views as f64;
            let el: f64 = if k % 2 == 0 { 0.3 } else { 0.55 };
            let eye = center + Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * dist;
            Camera::look_at(eye, center, Vec3::y(), fov, spec.width, spec.height)
        })
        .collect()
}

/// Builds the scene: objects on the ground plane, each a vertical stack of
/// primitive parts, each part cut into azimuthal subpart sectors.
pub fn generate_scene(spec: &HierSceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0));
    let footprints = place_objects(spec, &mut rng)?;
    let (np, ns) = (spec.parts_per_object, spec.subparts_per_part);

    let mut shapes = Vec::with_capacity(spec.objects * np);
    for &(x, z, radius) in &footprints {
        let mut base = 0.0;
        for _ in 0..np {
            let kind = *spec.primitives.choose(&mut rng).expect("nonempty primitives");
            let r = radius * rng.gen_range(0.6..1.0);
            let half_height = match kind {
                Primitive::Sphere => r,
                _ => rng.gen_range(0.25..0.45),
            };
            shapes.push(PartShape {
                kind,
                center: Vec3::new(x, base + half_height, z),
                radius: r,
                half_height,
                phase: rng.gen_range(0.0..2.0 * PI),
            });
            base += 2.0 * half_height;
        }
    }

    let hue0 = rng.gen::<f64>();
    let total = shapes.len() * spec.points_per_part;
    let mut points = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    let mut paths = Vec::with_capacity(total);
    for (pg, shape) in shapes.iter().enumerate() {
        let object = (pg / np) as u32;
        let hue = hue0 + 0.618_034 * pg as f64;
        for _ in 0..spec.points_per_part {
            let local = sample_surface(shape, &mut rng);
            let az = (local.z.atan2(local.x) - shape.phase).rem_euclid(2.0 * PI);
            let s = ((az / (2.0 * PI) * ns as f64) as usize).min(ns - 1);
            let value = 0.95 - 0.35 * s as f64 / ns.max(2) as f64;
            points.push(shape.center + local);
            colors.push(hsv(hue, 0.7, value));
            paths.push(HierPath {
                object,
                part: pg as u32,
                subpart: (pg * ns + s) as u32,
            });
        }
    }
    let features: Vec<f64> = (0..total).map(|_| 1.0).collect();
    let geometry = SurfaceField::new(points, colors, features, 1, 8)?;

    let cameras = ring_cameras(spec, &geometry.points, &mut rng)?;
    let renders = par::map_slice(&cameras, |cam| render_surface(&geometry, cam, spec.point_radius));
    let mut labels = Vec::with_capacity(cameras.len());
    let mut hit_maps = Vec::with_capacity(cameras.len());
    let mut rgb = Vec::with_capacity(cameras.len());
    for view in renders {
        let hits = view.hit_index.clone().expect("surface render has a hit map");
        let pick = |f: fn(&HierPath) -> u32| -> Vec<u32> {
            hits.iter()
                .map(|&h| if h == NO_HIT { NO_LABEL } else { f(&paths[h as usize]) })
                .collect()
        };
        labels.push(LabelMaps {
            width: view.width,
            height: view.height,
            object: pick(|p| p.object),
            part: pick(|p| p.part),
            subpart: pick(|p| p.subpart),
        });
        rgb.push(view.colors);
        hit_maps.push(hits);
    }
    Ok(SynthScene {
        spec: spec.clone(),
        geometry,
        paths,
        cameras,
        labels,
        hit_maps,
        rgb,
    })
}
