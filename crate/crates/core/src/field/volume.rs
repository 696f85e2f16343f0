//! Explicit voxel feature field rendered by alpha compositing.
//!
//! Along a ray, samples `i = 1..N` at distances `t_i` get density `σ_i`,
//! opacity `α_i = 1 − exp(−σ_i δ_i)` with `δ_i = t_{i+1} − t_i` (the last
//! interval ends at the box exit), and weight `w_i = T_i α_i` where
//! `T_i = Π_{j<i} (1 − α_j)`. Features, colors and depth are `Σ w_i x_i` and
//! the ray opacity is `Σ w_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::{Camera, Ray, Vec3};
use super::RenderedView;
use crate::error::{Error, Result};
use crate::par;

/// Number of fixed-size partial gradient buffers. Fixed so that the merge
/// order, and hence the result, does not depend on the thread count.
const GRAD_PARTITIONS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    pub resolution: usize,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub dim: usize,
    /// Unconstrained density; `σ = softplus(raw)` at read time.
    pub density_raw: Vec<f64>,
    /// `R³ × dim`, node-major.
    pub features: Vec<f64>,
    /// `R³ × 3`, node-major.
    pub colors: Vec<f64>,
    generation: u64,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl VoxelField {
    pub fn new(resolution: usize, bounds_min: Vec3, bounds_max: Vec3, dim: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid("voxel resolution must be at least 2"));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        let ext = bounds_max - bounds_min;
        if !ext.iter().all(|&e| e.is_finite() && e > 0.0) {
            return Err(Error::invalid("degenerate voxel bounds"));
        }
        let nodes = resolution.pow(3);
        Ok(Self {
            resolution,
            bounds_min,
            bounds_max,
            dim,
            density_raw: vec![0.0; nodes],
            features: vec![0.0; nodes * dim],
            colors: vec![0.0; nodes * 3],
            generation: 0,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = (self.bounds_max - self.bounds_min) / (self.resolution - 1) as f64;
        self.bounds_min + Vec3::new(i as f64 * s.x, j as f64 * s.y, k as f64 * s.z)
    }

    /// Stamp that changes whenever parameters are modified through
    /// [`VoxelField::touch`]; forward caches record it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Marks the parameters as modified, invalidating outstanding caches.
    pub fn touch(&mut self) {
        self.generation += 1;
    }

    /// The eight trilinear corners and weights for a position, clamped to
    /// the bounds.
    pub fn corners(&self, p: &Vec3) -> ([u32; 8], [f64; 8]) {
        let r = self.resolution;
        let ext = self.bounds_max - self.bounds_min;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let g = ((p[a] - self.bounds_min[a]) / ext[a] * (r - 1) as f64).clamp(0.0, (r - 1) as f64);
            let i0 = (g.floor() as usize).min(r - 2);
            base[a] = i0;
            frac[a] = g - i0 as f64;
        }
        let mut idx = [0u32; 8];
        let mut wts = [0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            idx[c] = self.node_index(base[0] + dx, base[1] + dy, base[2] + dz) as u32;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            wts[c] = wx * wy * wz;
        }
        (idx, wts)
    }

    /// Entry and exit distances of a ray through the bounding box.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / ray.dir[a];
            let mut ta = (self.bounds_min[a] - ray.origin[a]) * inv;
            let mut tb = (self.bounds_max[a] - ray.origin[a]) * inv;
            if ta.is_nan() || tb.is_nan() {
                // ray parallel to the slab, origin on its boundary plane
                continue;
            }
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// How sample positions are placed inside each stratum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// Stratum midpoints.
    Midpoint,
    /// Uniform jitter; ray `r` uses the stream seeded by `seed` and `r`.
    Stratified { seed: u64 },
}

#[derive(Clone, Debug)]
struct SampleCache {
    corners: [u32; 8],
    weights: [f64; 8],
    raw: f64,
    delta: f64,
    alpha: f64,
    trans: f64,
    z: f64,
}

/// Forward state needed by [`backprop_volume`].
#[derive(Clone, Debug)]
pub struct VolumeCache {
    generation: u64,
    resolution: usize,
    dim: usize,
    rays: Vec<Vec<SampleCache>>,
}

impl VolumeCache {
    pub fn num_rays(&self) -> usize {
        self.rays.len()
    }
}

/// Per-ray outputs of [`render_rays`].
#[derive(Clone, Debug, PartialEq)]
pub struct RayOutputs {
    pub dim: usize,
    /// `rays × dim`.
    pub features: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    /// Transmittance left after the last sample, per ray.
    pub residual_transmittance: Vec<f64>,
}

/// Cotangents of a scalar objective with respect to [`RayOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct RayCotangents {
    pub features: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RayCotangents {
    pub fn zeros(rays: usize, dim: usize) -> Self {
        Self {
            features: vec![0.0; rays * dim],
            colors: vec![[0.0; 3]; rays],
            depth: vec![0.0; rays],
            opacity: vec![0.0; rays],
        }
    }
}

/// Gradients with respect to the voxel parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrads {
    pub density_raw: Vec<f64>,
    pub features: Vec<f64>,
    pub colors: Vec<f64>,
}

impl VoxelGrads {
    pub fn zeros(field: &VoxelField) -> Self {
        let n = field.num_nodes();
        Self {
            density_raw: vec![0.0; n],
            features: vec![0.0; n * field.dim],
            colors: vec![0.0; n * 3],
        }
    }

    fn add(&mut self, other: &VoxelGrads) {
        for (a, b) in self.density_raw.iter_mut().zip(&other.density_raw) {
            *a += b;
        }
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            *a += b;
        }
        for (a, b) in self.colors.iter_mut().zip(&other.colors) {
            *a += b;
        }
    }
}

fn sample_offsets(sampling: Sampling, ray_index: usize, n: usize) -> Vec<f64> {
    match sampling {
        Sampling::Midpoint => vec![0.5; n],
        Sampling::Stratified { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ray_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (0..n).map(|_| rng.gen::<f64>()).collect()
        }
    }
}

/// Composites `rays` through the field with `samples_per_ray` samples each.
pub fn render_rays(
    field: &VoxelField,
    rays: &[Ray],
    samples_per_ray: usize,
    sampling: Sampling,
) -> Result<(RayOutputs, VolumeCache)> {
    if samples_per_ray < 2 {
        return Err(Error::invalid("samples_per_ray must be at least 2"));
    }
    let d = field.dim;
    let per_ray = par::map_range(rays.len(), |r| {
        let ray = &rays[r];
        let mut feat = vec![0.0; d];
        let mut color = [0.0; 3];
        let (mut depth, mut opacity) = (0.0, 0.0);
        let mut samples = Vec::new();
        let mut trans = 1.0;
        if let Some((t_near, t_far)) = field.intersect(ray) {
            let step = (t_far - t_near) / samples_per_ray as f64;
            let offsets = sample_offsets(sampling, r, samples_per_ray);
            let ts: Vec<f64> = (0..samples_per_ray)
                .map(|i| t_near + (i as f64 + offsets[i]) * step)
                .collect();
            samples.reserve(samples_per_ray);
            for i in 0..samples_per_ray {
                let t = ts[i];
                let delta = if i + 1 < samples_per_ray { ts[i + 1] - t } else { t_far - t };
                let (corners, weights) = field.corners(&(ray.origin + ray.dir * t));
                let raw: f64 = corners
                    .iter()
                    .zip(&weights)
                    .map(|(&c, &w)| w * field.density_raw[c as usize])
                    .sum();
                let alpha = 1.0 - (-softplus(raw) * delta).exp();
                let w = trans * alpha;
                let z = t * ray.depth_scale;
                for (c, &cw) in corners.iter().zip(&weights) {
                    let c = *c as usize;
                    let ww = w * cw;
                    for (o, v) in feat.iter_mut().zip(&field.features[c * d..(c + 1) * d]) {
                        *o += ww * v;
                    }
                    for k in 0..3 {
                        color[k] += ww * field.colors[c * 3 + k];
                    }
                }
                depth += w * z;
                opacity += w;
                samples.push(SampleCache {
                    corners,
                    weights,
                    raw,
                    delta,
                    alpha,
                    trans,
                    z,
                });
                trans *= 1.0 - alpha;
            }
        }
        (feat, color, depth, opacity, trans, samples)
    });

    let mut out = RayOutputs {
        dim: d,
        features: Vec::with_capacity(rays.len() * d),
        colors: Vec::with_capacity(rays.len()),
        depth: Vec::with_capacity(rays.len()),
        opacity: Vec::with_capacity(rays.len()),
        residual_transmittance: Vec::with_capacity(rays.len()),
    };
    let mut cache = VolumeCache {
        generation: field.generation,
        resolution: field.resolution,
        dim: d,
        rays: Vec::with_capacity(rays.len()),
    };
    for (feat, color, depth, opacity, trans, samples) in per_ray {
        out.features.extend_from_slice(&feat);
        out.colors.push(color);
        out.depth.push(depth);
        out.opacity.push(opacity);
        out.residual_transmittance.push(trans);
        cache.rays.push(samples);
    }
    Ok((out, cache))
}

/// Renders a full view through pixel centers with midpoint sampling.
pub fn render_volume(field: &VoxelField, camera: &Camera, samples_per_ray: usize) -> Result<RenderedView> {
    let rays: Vec<Ray> = (0..camera.num_pixels())
        .map(|p| camera.pixel_ray(p % camera.width, p / camera.width))
        .collect();
    let (out, _) = render_rays(field, &rays, samples_per_ray, Sampling::Midpoint)?;
    Ok(RenderedView {
        width: camera.width,
        height: camera.height,
        dim: field.dim,
        features: out.features,
        colors: out.colors,
        depth: out.depth,
        opacity: out.opacity,
        hit_index: None,
    })
}

/// Exact adjoint of [`render_rays`] for the given cotangents.
///
/// For a ray with per-sample values `e_i = g·x_i` (features, colors, depth and
/// the opacity channel's unit), `∂L/∂α_k = T_k (e_k − S_k)` where
/// `S_k = Σ_{i>k} (T_i / T_{k+1}) α_i e_i`, accumulated back to front as
/// `S_{k−1} = α_k e_k + (1 − α_k) S_k`. Then `∂α/∂raw = δ (1 − α) sigmoid(raw)`
/// and everything is spread to the trilinear corners.
pub fn backprop_volume(field: &VoxelField, cache: &VolumeCache, cot: &RayCotangents) -> Result<VoxelGrads> {
    if cache.generation != field.generation || cache.resolution != field.resolution || cache.dim != field.dim {
        return Err(Error::StaleCache(
            "field changed since the forward pass; re-render before backprop".into(),
        ));
    }
    let d = field.dim;
    let n_rays = cache.rays.len();
    if cot.features.len() != n_rays * d
        || cot.colors.len() != n_rays
        || cot.depth.len() != n_rays
        || cot.opacity.len() != n_rays
    {
        return Err(Error::invalid("cotangent shapes do not match the cached rays"));
    }
    let part_len = n_rays.div_ceil(GRAD_PARTITIONS).max(1);
    let parts = par::map_range(GRAD_PARTITIONS, |p| {
        let mut g = VoxelGrads::zeros(field);
        let end = ((p + 1) * part_len).min(n_rays);
        for r in (p * part_len).min(end)..end {
            accumulate_ray(field, &cache.rays[r], cot, r, &mut g);
        }
        g
    });
    let mut total = VoxelGrads::zeros(field);
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

fn accumulate_ray(field: &VoxelField, samples: &[SampleCache], cot: &RayCotangents, r: usize, g: &mut VoxelGrads) {
    let d = field.dim;
    let gf = &cot.features[r * d..(r + 1) * d];
    let gc = cot.colors[r];
    let (gd, go) = (cot.depth[r], cot.opacity[r]);
    if gf.iter().all(|&v| v == 0.0) && gc == [0.0; 3] && gd == 0.0 && go == 0.0 {
        return;
    }
    let values: Vec<f64> = samples
        .iter()
        .map(|s| {
            let mut e = gd * s.z + go;
            for (c, &cw) in s.corners.iter().zip(&s.weights) {
                let c = *c as usize;
                let f: f64 = gf.iter().zip(&field.features[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
                let col: f64 = (0..3).map(|k| gc[k] * field.colors[c * 3 + k]).sum();
                e += cw * (f + col);
            }
            e
        })
        .collect();
    let mut tail = 0.0;
    for (k, s) in samples.iter().enumerate().rev() {
        let w = s.trans * s.alpha;
        let d_alpha = s.trans * (values[k] - tail);
        tail = s.alpha * values[k] + (1.0 - s.alpha) * tail;
        let d_raw = d_alpha * s.delta * (1.0 - s.alpha) * sigmoid(s.raw);
        for (c, &cw) in s.corners.iter().zip(&s.weights) {
            let c = *c as usize;
            g.density_raw[c] += d_raw * cw;
            let ww = w * cw;
            for (o, &v) in g.features[c * d..(c + 1) * d].iter_mut().zip(gf) {
                *o += ww * v;
            }
            for k in 0..3 {
                g.colors[c * 3 + k] += ww * gc[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_field(r: usize, d: usize) -> VoxelField {
        VoxelField::new(r, Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), d).unwrap()
    }

    fn axis_ray(x: f64, y: f64) -> Ray {
        Ray {
            origin: Vec3::new(x, y, -3.0),
            dir: Vec3::z(),
            depth_scale: 1.0,
        }
    }

    #[test]
    fn empty_space_renders_nothing() {
        let mut f = unit_field(4, 2);
        f.density_raw.iter_mut().for_each(|v| *v = -80.0);
        let (out, _) = render_rays(&f, &[axis_ray(0.1, 0.2)], 16, Sampling::Midpoint).unwrap();
        assert!(out.opacity[0] < 1e-30);
        assert!(out.features.iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn saturated_slab_shows_its_color() {
        let mut f = unit_field(4, 1);
        f.density_raw.iter_mut().for_each(|v| *v = 60.0);
        for n in 0..f.num_nodes() {
            f.colors[n * 3..n * 3 + 3].copy_from_slice(&[0.3, 0.6, 0.9]);
        }
        let (out, _) = render_rays(&f, &[axis_ray(0.0, 0.0)], 8, Sampling::Midpoint).unwrap();
        assert!((out.opacity[0] - 1.0).abs() < 1e-3);
        for (k, want) in [0.3, 0.6, 0.9].into_iter().enumerate() {
            assert!((out.colors[0][k] - want).abs() < 1e-3);
        }
    }

    #[test]
    fn missing_the_box_is_transparent() {
        let f = unit_field(3, 1);
        let (out, cache) = render_rays(&f, &[axis_ray(5.0, 0.0)], 4, Sampling::Midpoint).unwrap();
        assert_eq!(out.opacity[0], 0.0);
        assert_eq!(out.residual_transmittance[0], 1.0);
        assert_eq!(cache.rays[0].len(), 0);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(VoxelField::new(4, Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0), 1).is_err());
        assert!(VoxelField::new(1, Vec3::zeros(), Vec3::repeat(1.0), 1).is_err());
        let f = unit_field(3, 1);
        assert!(render_rays(&f, &[axis_ray(0.0, 0.0)], 1, Sampling::Midpoint).is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut f = unit_field(3, 1);
        let (_, cache) = render_rays(&f, &[axis_ray(0.0, 0.0)], 4, Sampling::Midpoint).unwrap();
        f.touch();
        let err = backprop_volume(&f, &cache, &RayCotangents::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut f = unit_field(3, 2);
        f.density_raw.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let (_, cache) = render_rays(&f, &[axis_ray(0.2, -0.3)], 6, Sampling::Midpoint).unwrap();
        let g = backprop_volume(&f, &cache, &RayCotangents::zeros(1, 2)).unwrap();
        assert!(g.density_raw.iter().chain(&g.features).chain(&g.colors).all(|&v| v == 0.0));
    }
}
