//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::gradcheck::{self, random_ray, random_voxel_field};
use common::{oracle_correlation, oracle_levels, oracle_partition, random_mask_set};
use omnifield::evalbench::{hierarchical_benchmark, hierarchy_ordering, instance_benchmark, BenchResult, PropagationConfig};
use omnifield::field::volume::{render_rays, Sampling};
use omnifield::field::{FieldModel, Ray, RenderOptions};
use omnifield::hier2d::{build_correlation, build_partition, hierarchy_levels};
use omnifield::segserver::{Click, SceneEntry, Session};
use omnifield::synthdata::{generate_scene, Dataset, HierSceneSpec};
use omnifield::trainer::{train_scene, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failures += 1;
        }
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn representation_suite() -> (bool, String) {
    let start = Instant::now();
    let mut instances = 0;
    let mut mismatches = 0;
    for seed in 0..240u64 {
        let set = random_mask_set(seed, 64, 8);
        let part = build_partition(&set).unwrap();
        let oracle = oracle_partition(&set);
        let mut ok = part.patch_index_map == oracle.patch_of_pixel && part.pixel_counts == oracle.pixel_counts;
        ok &= oracle
            .memberships
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(m, &b)| part.membership.get(i, m) == b));
        let corr = build_correlation(&part);
        let oc = oracle_correlation(&set, &oracle);
        ok &= (0..oc.len()).all(|i| corr.row(i) == &oc[i][..]);
        for a in 0..oc.len() {
            let lv = hierarchy_levels(&corr, a as u32).unwrap();
            let ol = oracle_levels(&oc, a);
            ok &= lv.levels.len() == ol.len()
                && ol.iter().enumerate().all(|(d, (v, m))| lv.vote_of_level[d] == *v && &lv.levels[d] == m);
        }
        instances += 1;
        mismatches += usize::from(!ok);
    }
    let t = start.elapsed();
    (
        mismatches == 0 && instances >= 200 && t < Duration::from_secs(60),
        format!("{instances} mask sets up to 64x64 with up to 8 masks, {mismatches} mismatches, {:.2}s", t.as_secs_f64()),
    )
}

fn gradient_suite() -> (bool, String) {
    let start = Instant::now();
    let cases: [(&str, fn(u64) -> f64); 7] = [
        ("L_CC", gradcheck::cc),
        ("L_H", gradcheck::hier),
        ("L_norm", gradcheck::norm),
        ("L_c", gradcheck::color),
        ("L_reg", gradcheck::opacity),
        ("volume", gradcheck::volume),
        ("surface", gradcheck::surface),
    ];
    let per_kind = 60;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, f) in cases {
        let worst = (0..per_kind).map(|s| f(1000 + s)).fold(0.0, f64::max);
        ok &= worst < 1e-4;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(120);
    (ok, format!("{per_kind} instances each, worst relative error: {}; {:.2}s", parts.join(", "), t.as_secs_f64()))
}

fn conservation() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut rays_checked = 0;
    for trial in 0..50 {
        let res = rng.gen_range(2..=8);
        let mut f = random_voxel_field(&mut rng, res, 2);
        // Mix of empty, moderate and saturated media.
        let shift = [-20.0, 0.0, 5.0, 40.0][trial % 4];
        f.density_raw.iter_mut().for_each(|v| *v += shift);
        let rays: Vec<Ray> = (0..20).map(|_| random_ray(&mut rng)).collect();
        let n = rng.gen_range(2..=128);
        for sampling in [Sampling::Midpoint, Sampling::Stratified { seed: trial as u64 }] {
            let (out, _) = render_rays(&f, &rays, n, sampling).unwrap();
            for r in 0..rays.len() {
                worst = worst.max((out.opacity[r] + out.residual_transmittance[r] - 1.0).abs());
                rays_checked += 1;
            }
        }
    }
    (worst <= 1e-9, format!("{rays_checked} rays, max |sum T_i a_i + T_(N+1) - 1| = {worst:.2e}"))
}

struct Run {
    field: FieldModel,
    bench: BenchResult,
}

fn train(dataset: &Dataset, lambda: f64, dim: usize) -> Run {
    let start = Instant::now();
    let cfg = TrainConfig { lambda, dim, ..TrainConfig::default() };
    let field = train_scene(dataset, &cfg).unwrap().field;
    let bench = hierarchical_benchmark(&field, dataset, &render_options()).unwrap();
    println!(
        "  trained lambda={lambda} D={dim} ({} iterations, {:.1}s): L1 {:.3} L2 {:.3} avg {:.3}",
        cfg.iterations,
        start.elapsed().as_secs_f64(),
        bench.miou_l1,
        bench.miou_l2,
        bench.miou_avg
    );
    Run { field, bench }
}

fn render_options() -> RenderOptions {
    let cfg = TrainConfig::default();
    RenderOptions { point_radius: cfg.point_radius, samples_per_ray: cfg.samples_per_ray }
}

fn threshold_sweep(dataset: Arc<Dataset>, field: FieldModel) -> (bool, String) {
    let scene = Arc::new(SceneEntry::new("toy", dataset, field, render_options()).unwrap());
    let mut session = Session::new("acceptance", scene);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let views = session.num_views();
    let (mut states, mut comparisons, mut violations) = (0, 0, 0);
    while states < 8 {
        let mut click = || Click { view: rng.gen_range(0..views), x: rng.gen_range(0..64), y: rng.gen_range(0..64) };
        let selected = if states % 2 == 0 {
            session.click(click()).map(|_| ())
        } else {
            let clicks = [click(), click()];
            session.multi_select(&clicks).map(|_| ())
        };
        if selected.is_err() {
            continue;
        }
        states += 1;
        for view in 0..views {
            let masks: Vec<_> = (0..=64).map(|i| session.mask(view, -1.0 + 2.0 * i as f64 / 64.0).unwrap()).collect();
            for w in masks.windows(2) {
                comparisons += 1;
                violations += usize::from(!w[1].is_subset_of(&w[0]));
            }
        }
    }
    (violations == 0, format!("{states} selections x {views} views x 64 steps, {violations} of {comparisons} nesting checks violated"))
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };

    let (ok, d) = representation_suite();
    report.check("representation oracles", ok, d);
    let (ok, d) = gradient_suite();
    report.check("gradient suite", ok, d);
    let (ok, d) = conservation();
    report.check("transmittance conservation", ok, d);

    let start = Instant::now();
    let dataset = Arc::new(Dataset::from_scene(&generate_scene(&HierSceneSpec::default()).unwrap()).unwrap());
    println!(
        "  toy scene: {} views, {} points, {} queries",
        dataset.num_views(),
        dataset.geometry.len(),
        dataset.queries.len()
    );
    let l0 = train(&dataset, 0.0, 16);
    let l5 = train(&dataset, 0.5, 16);
    let l1 = train(&dataset, 1.0, 16);
    let d64 = train(&dataset, 0.5, 64);
    println!("  training and benchmarks took {:.1}s", start.elapsed().as_secs_f64());

    let gain = l5.bench.miou_l2 - l0.bench.miou_l2;
    let drop = l0.bench.miou_l1 - l5.bench.miou_l1;
    report.check(
        "hierarchy trend",
        gain >= 0.05 && drop <= 0.05,
        format!("L2 {:.3} -> {:.3} (gain {gain:+.3}, need >= 0.05); L1 {:.3} -> {:.3} (drop {drop:+.3}, allow <= 0.05)",
            l0.bench.miou_l2, l5.bench.miou_l2, l0.bench.miou_l1, l5.bench.miou_l1),
    );
    report.check(
        "decay ablation",
        l1.bench.miou_l2 > l0.bench.miou_l2 && l1.bench.miou_l1 <= l0.bench.miou_l1 + 0.02,
        format!("L2 at lambda 0/0.5/1: {:.3}/{:.3}/{:.3}; L1: {:.3}/{:.3}/{:.3}",
            l0.bench.miou_l2, l5.bench.miou_l2, l1.bench.miou_l2, l0.bench.miou_l1, l5.bench.miou_l1, l1.bench.miou_l1),
    );
    let gap = (l5.bench.miou_avg - d64.bench.miou_avg).abs();
    report.check(
        "dimension saturation",
        gap <= 0.015,
        format!("avg mIoU D=16 {:.3}, D=64 {:.3}, gap {gap:.3} (allow <= 0.015)", l5.bench.miou_avg, d64.bench.miou_avg),
    );
    let norms: Vec<f64> = [&l0, &l5, &l1, &d64].iter().map(|r| r.field.mean_norm_deviation()).collect();
    let worst_norm = norms.iter().copied().fold(0.0, f64::max);
    report.check(
        "norm regularization",
        worst_norm < 0.05,
        format!("mean |norm - 1| per trained field {norms:.4?}, worst {worst_norm:.4}"),
    );
    let ord = hierarchy_ordering(&l5.field, &dataset, &render_options(), 0.0).unwrap();
    report.check(
        "hierarchy ordering",
        ord.fraction >= 0.9,
        format!("{:.3} of {} (anchor, view) pairs nonincreasing ({:.3} among multi-level pairs)", ord.fraction, ord.pairs.len(), ord.fraction_multilevel),
    );
    let inst = instance_benchmark(&l5.field, &dataset, &render_options(), &PropagationConfig::default(), 12).unwrap();
    let self_ok = !inst.self_checks.is_empty() && inst.self_checks.iter().all(|&(_, fit, own)| fit == own);
    report.check(
        "instance propagation",
        self_ok && inst.miou >= 0.85,
        format!("self round-trip exact for {}/{} objects; cross-view mIoU {:.3} over {} pairs (need >= 0.85)",
            inst.self_checks.iter().filter(|c| c.1 == c.2).count(), inst.self_checks.len(), inst.miou, inst.pairs.len()),
    );
    let (ok, d) = threshold_sweep(dataset.clone(), l5.field.clone());
    report.check("threshold monotonicity", ok, d);

    if report.failures == 0 {
        println!("all acceptance checks passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance check(s) failed", report.failures);
        ExitCode::FAILURE
    }
}
