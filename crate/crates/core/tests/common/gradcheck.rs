//! Random small instances for each differentiable piece. Every function
//! returns the relative error between the analytic gradient and central
//! finite differences of an independently written scalar objective.

use omnifield::field::surface::{backprop_surface, render_surface, SurfaceField};
use omnifield::field::volume::{backprop_volume, render_rays, RayCotangents, Sampling, VoxelField};
use omnifield::field::{Camera, Ray, Vec3, NO_HIT};
use omnifield::hier2d::HierRep;
use omnifield::losses::{loss_cc, loss_color, loss_hier, loss_norm, loss_opacity, ClusterBatch, DEFAULT_PHI_MIN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{central_differences, random_mask_set, relative_error};

pub const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-8;

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller.
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let v: f64 = rng.gen();
            scale * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

/// Samples spread over `k` patch ids with at least two samples each.
fn sample_patches(rng: &mut ChaCha8Rng, k: u32, extra: usize) -> Vec<u32> {
    let mut out: Vec<u32> = (0..k).flat_map(|p| [p, p]).collect();
    out.extend((0..extra).map(|_| rng.gen_range(0..k)));
    out
}

pub fn cc(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=6);
    let k = rng.gen_range(2..=5);
    let extra = rng.gen_range(0..8);
    let patches = sample_patches(&mut rng, k, extra);
    let feats = gaussian(&mut rng, patches.len() * dim, 0.6);
    let batch = ClusterBatch::new(feats.clone(), dim, patches, DEFAULT_PHI_MIN).unwrap();
    let analytic = loss_cc(&batch).grad;
    let numeric = central_differences(&feats, &all(feats.len()), STEP, |x| loss_cc(&batch.with_features(x.to_vec())).value);
    relative_error(&analytic, &numeric, FLOOR)
}

pub fn hier(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rep = HierRep::build(&random_mask_set(seed ^ 0xA5A5, 12, 6)).unwrap();
    let levels = rep.all_levels();
    let dim = rng.gen_range(2..=6);
    let lambda = [0.0, 0.25, 0.5, 1.0][rng.gen_range(0..4)];
    let extra = rng.gen_range(0..6);
    let patches = sample_patches(&mut rng, rep.num_patches() as u32, extra);
    let feats = gaussian(&mut rng, patches.len() * dim, 0.6);
    let batch = ClusterBatch::new(feats.clone(), dim, patches, DEFAULT_PHI_MIN).unwrap();
    let analytic = loss_hier(&batch, &levels, lambda).unwrap().grad;
    let numeric = central_differences(&feats, &all(feats.len()), STEP, |x| {
        loss_hier(&batch.with_features(x.to_vec()), &levels, lambda).unwrap().value
    });
    relative_error(&analytic, &numeric, FLOOR)
}

pub fn norm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(1..=8);
    let n = rng.gen_range(1..=12);
    let feats = gaussian(&mut rng, n * dim, 0.8);
    let analytic = loss_norm(&feats, dim).grad;
    let numeric = central_differences(&feats, &all(feats.len()), STEP, |x| {
        let rows = x.chunks_exact(dim);
        rows.map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).powi(2)).sum::<f64>() / n as f64
    });
    relative_error(&analytic, &numeric, FLOOR)
}

fn to_rgb(x: &[f64]) -> Vec<[f64; 3]> {
    x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn color(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=16);
    let rendered: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
    let target = to_rgb(&(0..3 * n).map(|_| rng.gen()).collect::<Vec<f64>>());
    let analytic = loss_color(&to_rgb(&rendered), &target).grad;
    let numeric = central_differences(&rendered, &all(rendered.len()), STEP, |x| {
        let sq: f64 = x.iter().zip(target.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum();
        sq / n as f64
    });
    relative_error(&analytic, &numeric, FLOOR)
}

pub fn opacity(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=16);
    // Away from the clamp edges, where the objective is smooth.
    let o: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
    let analytic = loss_opacity(&o).grad;
    let numeric = central_differences(&o, &all(n), STEP, |x| -x.iter().map(|v| v * v.ln()).sum::<f64>() / n as f64);
    relative_error(&analytic, &numeric, FLOOR)
}

/// A ray from outside the unit box towards a random interior point.
pub fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
    let target = Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
    let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        .try_normalize(1e-3)
        .unwrap_or_else(Vec3::z);
    Ray {
        origin: target - 3.0 * dir,
        dir,
        depth_scale: rng.gen_range(0.5..1.0),
    }
}

pub fn random_voxel_field(rng: &mut ChaCha8Rng, res: usize, dim: usize) -> VoxelField {
    let mut f = VoxelField::new(res, Vec3::repeat(-1.0), Vec3::repeat(1.0), dim).unwrap();
    f.density_raw = gaussian(rng, f.num_nodes(), 1.5);
    f.features = gaussian(rng, f.num_nodes() * dim, 1.0);
    f.colors = gaussian(rng, f.num_nodes() * 3, 1.0);
    f
}

/// Parameters of a voxel field laid out as `[density | features | colors]`.
fn flatten(f: &VoxelField) -> Vec<f64> {
    [f.density_raw.as_slice(), &f.features, &f.colors].concat()
}

fn unflatten(f: &mut VoxelField, x: &[f64]) {
    let (n, d) = (f.num_nodes(), f.dim);
    f.density_raw.copy_from_slice(&x[..n]);
    f.features.copy_from_slice(&x[n..n + n * d]);
    f.colors.copy_from_slice(&x[n + n * d..]);
}

pub fn volume(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = rng.gen_range(2..=4);
    let dim = rng.gen_range(1..=3);
    let field = random_voxel_field(&mut rng, res, dim);
    let rays: Vec<Ray> = (0..rng.gen_range(1..=4)).map(|_| random_ray(&mut rng)).collect();
    let spr = rng.gen_range(2..=8);
    let nr = rays.len();
    let cot = RayCotangents {
        features: gaussian(&mut rng, nr * dim, 1.0),
        colors: to_rgb(&gaussian(&mut rng, nr * 3, 1.0)),
        depth: gaussian(&mut rng, nr, 1.0),
        opacity: gaussian(&mut rng, nr, 1.0),
    };
    let objective = |f: &VoxelField| {
        let (out, _) = render_rays(f, &rays, spr, Sampling::Midpoint).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&out.features, &cot.features)
            + dot(out.colors.as_flattened(), cot.colors.as_flattened())
            + dot(&out.depth, &cot.depth)
            + dot(&out.opacity, &cot.opacity)
    };
    let (_, cache) = render_rays(&field, &rays, spr, Sampling::Midpoint).unwrap();
    let g = backprop_volume(&field, &cache, &cot).unwrap();
    let analytic = [g.density_raw, g.features, g.colors].concat();
    let x0 = flatten(&field);
    let mut probe = field.clone();
    let numeric = central_differences(&x0, &all(x0.len()), STEP, |x| {
        unflatten(&mut probe, x);
        objective(&probe)
    });
    relative_error(&analytic, &numeric, FLOOR)
}

pub fn surface(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4..=30);
    let dim = rng.gen_range(1..=4);
    let points: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
        .collect();
    let colors = to_rgb(&(0..3 * n).map(|_| rng.gen()).collect::<Vec<f64>>());
    let feats = gaussian(&mut rng, n * dim, 1.0);
    let field = SurfaceField::new(points, colors.clone(), feats.clone(), dim, 3).unwrap();
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), -Vec3::y(), 0.9, 10, 8).unwrap();
    let view = render_surface(&field, &cam, 0.08);
    let hits = view.hit_index.clone().unwrap();
    assert!(hits.iter().any(|&h| h != NO_HIT), "no point is visible");
    let fcot = gaussian(&mut rng, hits.len() * dim, 1.0);
    let ccot = to_rgb(&gaussian(&mut rng, hits.len() * 3, 1.0));
    let g = backprop_surface(&field, &hits, &fcot, &ccot).unwrap();
    let analytic = [g.features.as_slice(), g.colors.as_flattened()].concat();
    let x0 = [feats.as_slice(), colors.as_flattened()].concat();
    let numeric = central_differences(&x0, &all(x0.len()), STEP, |x| {
        let mut f = field.with_features(x[..n * dim].to_vec(), dim).unwrap();
        f.colors = to_rgb(&x[n * dim..]);
        let v = render_surface(&f, &cam, 0.08);
        let fsum: f64 = v.features.iter().zip(&fcot).map(|(a, b)| a * b).sum();
        let csum: f64 = v.colors.as_flattened().iter().zip(ccot.as_flattened()).map(|(a, b)| a * b).sum();
        fsum + csum
    });
    relative_error(&analytic, &numeric, FLOOR)
}
