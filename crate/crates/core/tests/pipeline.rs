mod common;

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use common::{oracle_best_iou, oracle_components};
use omnifield::evalbench::{best_iou_threshold, hierarchical_benchmark, instance_benchmark, PropagationConfig, ScoreMap, ScoreRule};
use omnifield::field::{FieldModel, RenderOptions};
use omnifield::losses::format_loss_log;
use omnifield::mask::Mask;
use omnifield::par;
use omnifield::segserver::{auto_discretize, region_grow, Click, PointGraph, SceneEntry, Session};
use omnifield::synthdata::{generate_scene, Dataset, HierSceneSpec};
use omnifield::trainer::{train_scene, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Trained {
    dataset: Arc<Dataset>,
    config: TrainConfig,
    field: FieldModel,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = Dataset::from_scene(&generate_scene(&HierSceneSpec::default()).unwrap()).unwrap();
        let config = TrainConfig { iterations: 1500, ..TrainConfig::default() };
        let field = train_scene(&dataset, &config).unwrap().field;
        Trained { dataset: Arc::new(dataset), config, field }
    })
}

fn render_options(cfg: &TrainConfig) -> RenderOptions {
    RenderOptions { point_radius: cfg.point_radius, samples_per_ray: cfg.samples_per_ray }
}

fn point_graph(field: &FieldModel) -> PointGraph {
    let s = field.as_surface().expect("surface backend");
    PointGraph::new(&s.features, s.dim, &s.adjacency).unwrap()
}

/// Groups point ids by oracle component root.
fn oracle_groups(graph: &PointGraph, t: f64) -> Vec<Vec<u32>> {
    let units: Vec<f64> = (0..graph.len()).flat_map(|i| graph.unit(i).to_vec()).collect();
    let roots = oracle_components(&units, graph.dim, &graph.adjacency, t);
    let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (i, r) in roots.into_iter().enumerate() {
        groups.entry(r).or_default().push(i as u32);
    }
    groups.into_values().collect()
}

#[test]
fn grown_regions_match_union_find_components() {
    let t = trained();
    let graph = point_graph(&t.field);
    let groups = oracle_groups(&graph, 0.9);
    assert!(groups.len() > 1, "threshold 0.9 should split the trained scene");
    let d = auto_discretize(&graph, 0.9).unwrap();
    assert_eq!(d.component_count(), groups.len());
    for g in &groups {
        let label = d.labels[g[0] as usize];
        assert!(g.iter().all(|&p| d.labels[p as usize] == label));
        assert_eq!(d.sizes[label as usize], g.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let g = groups.choose(&mut rng).unwrap();
        let seed = *g.choose(&mut rng).unwrap();
        assert_eq!(&region_grow(&graph, &[seed], 0.9).unwrap(), g);
    }
}

#[test]
fn growth_ignores_seed_order() {
    let t = trained();
    let graph = point_graph(&t.field);
    let groups = oracle_groups(&graph, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut seeds: Vec<u32> = groups
            .choose_multiple(&mut rng, 2)
            .flat_map(|g| g.choose_multiple(&mut rng, 3).copied().collect::<Vec<_>>())
            .collect();
        let a = region_grow(&graph, &seeds, 0.9).unwrap();
        seeds.shuffle(&mut rng);
        assert_eq!(region_grow(&graph, &seeds, 0.9).unwrap(), a);
    }
}

#[test]
fn session_masks_nest_as_the_threshold_rises() {
    let t = trained();
    let scene = Arc::new(SceneEntry::new("toy", t.dataset.clone(), t.field.clone(), render_options(&t.config)).unwrap());
    let mut session = Session::new("s", scene);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 6 {
        let click = Click { view: rng.gen_range(0..session.num_views()), x: rng.gen_range(0..64), y: rng.gen_range(0..64) };
        if session.click(click).is_err() {
            continue;
        }
        for view in [click.view, (click.view + 5) % session.num_views()] {
            let map = session.score_map(view).unwrap();
            let mut prev: Option<Mask> = None;
            for i in 0..=64 {
                let m = map.threshold(-1.0 + 2.0 * i as f64 / 64.0);
                if let Some(p) = &prev {
                    assert!(m.is_subset_of(p));
                }
                prev = Some(m);
            }
        }
        checked += 1;
    }
}

#[test]
fn self_propagation_reproduces_the_fitted_iou() {
    let t = trained();
    let r = instance_benchmark(&t.field, &t.dataset, &render_options(&t.config), &PropagationConfig::default(), 12).unwrap();
    assert!(!r.self_checks.is_empty());
    for &(o, fit, own) in &r.self_checks {
        assert_eq!(fit, own, "object {o}");
    }
}

#[test]
fn benchmark_ignores_rotations_of_feature_space() {
    let t = trained();
    let opts = render_options(&t.config);
    let base = hierarchical_benchmark(&t.field, &t.dataset, &opts).unwrap();
    let s = t.field.as_surface().unwrap();
    // Reversing and negating coordinates is orthogonal, so every cosine is unchanged.
    let rotated: Vec<f64> = s.features.chunks_exact(s.dim).flat_map(|f| f.iter().rev().map(|v| -v).collect::<Vec<_>>()).collect();
    let field = FieldModel::Surface(s.with_features(rotated, s.dim).unwrap());
    let again = hierarchical_benchmark(&field, &t.dataset, &opts).unwrap();
    assert!((base.miou_l1 - again.miou_l1).abs() < 1e-9);
    assert!((base.miou_l2 - again.miou_l2).abs() < 1e-9);
}

fn small_run(threads: usize) -> String {
    let spec = HierSceneSpec { views: 4, objects: 2, ..HierSceneSpec::default() };
    let dataset = Dataset::from_scene(&generate_scene(&spec).unwrap()).unwrap();
    let cfg = TrainConfig { iterations: 120, rays_per_batch: 512, ..TrainConfig::default() };
    par::with_threads(threads, || format_loss_log(&train_scene(&dataset, &cfg).unwrap().log))
}

#[test]
fn loss_log_is_reproducible() {
    let a = small_run(1);
    assert_eq!(a, small_run(1));
    // Reductions run in a fixed order, so other thread counts agree as well.
    assert_eq!(a, small_run(3));
}

#[test]
fn two_patches_separate() {
    let spec = HierSceneSpec {
        objects: 2,
        parts_per_object: 1,
        subparts_per_part: 1,
        views: 1,
        level_probs: [1.0, 0.0, 0.0],
        dropout: 0.0,
        ..HierSceneSpec::default()
    };
    let dataset = Dataset::from_scene(&generate_scene(&spec).unwrap()).unwrap();
    let rep = dataset.views[0].hierrep.as_ref().unwrap();
    assert_eq!(rep.num_patches(), 2);
    // With two clusters the softmax saturates at the default temperature
    // floor long before the features tighten; a softer floor keeps pulling.
    let cfg = TrainConfig { iterations: 2000, phi_min: 0.2, ..TrainConfig::default() };
    let field = train_scene(&dataset, &cfg).unwrap().field;
    let view = field.render(&dataset.cameras[0], &render_options(&cfg)).unwrap();
    let part = &rep.partition;
    let unit = |p: usize| {
        let f = view.feature(p);
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let means: Vec<Vec<f64>> = (0..2u32)
        .map(|id| {
            let pixels: Vec<usize> = (0..view.num_pixels()).filter(|&p| part.patch_index_map[p] == id && view.covered(p)).collect();
            let mut m = vec![0.0; view.dim];
            for &p in &pixels {
                m.iter_mut().zip(unit(p)).for_each(|(a, b)| *a += b);
            }
            let within = pixels
                .iter()
                .map(|&p| unit(p).iter().zip(&m).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                / (pixels.len() as f64 * m.iter().map(|v| v * v).sum::<f64>().sqrt());
            assert!(within > 0.99, "within-patch cosine {within:.4} for patch {id}");
            let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.iter().map(|v| v / n).collect()
        })
        .collect();
    let between: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| a * b).sum();
    assert!(between < 0.2, "between-patch cosine {between:.4}");
}

fn random_map(rng: &mut ChaCha8Rng) -> (ScoreMap, Mask) {
    let (w, h) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
    let levels = rng.gen_range(2..40);
    let scores: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    let gt = Mask::from_fn(w, h, |x, y| scores[y * w + x] + rng.gen_range(-0.3..0.3) > 0.5);
    (ScoreMap { width: w, height: h, scores, view: 0, query: None, rule: ScoreRule::Cosine }, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn best_threshold_is_exactly_optimal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (map, gt) = random_map(&mut rng);
        let flags: Vec<bool> = (0..gt.len()).map(|i| gt.get_index(i)).collect();
        let (_, best) = oracle_best_iou(&map.scores, &flags);
        let (t, iou) = best_iou_threshold(&map, &gt).unwrap();
        prop_assert!((iou - best).abs() < 1e-12, "{} vs {}", iou, best);
        prop_assert!((map.threshold(t).iou(&gt) - iou).abs() < 1e-12);
    }

    #[test]
    fn thresholded_masks_nest(seed in any::<u64>(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (map, _) = random_map(&mut rng);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(map.threshold(hi).is_subset_of(&map.threshold(lo)));
    }
}

#[test]
fn volume_backend_trains_and_serves() {
    let spec = HierSceneSpec { views: 4, objects: 2, ..HierSceneSpec::default() };
    let dataset = Arc::new(Dataset::from_scene(&generate_scene(&spec).unwrap()).unwrap());
    let cfg = TrainConfig {
        backend: omnifield::trainer::Backend::Volume,
        iterations: 300,
        rays_per_batch: 256,
        samples_per_ray: 24,
        volume_resolution: 16,
        lr_start: 5e-2,
        ..TrainConfig::default()
    };
    let out = train_scene(&dataset, &cfg).unwrap();
    let head: f64 = out.log[..20].iter().map(|r| r.l_color).sum::<f64>() / 20.0;
    let tail: f64 = out.log[out.log.len() - 20..].iter().map(|r| r.l_color).sum::<f64>() / 20.0;
    assert!(out.log.iter().all(|r| r.total.is_finite()));
    assert!(tail < 0.5 * head, "color loss {head:.4} -> {tail:.4}");
    assert!(matches!(out.field, FieldModel::Volume(_)));

    let scene = Arc::new(SceneEntry::new("vol", dataset, out.field, render_options(&cfg)).unwrap());
    let mut session = Session::new("v", scene);
    let view = session.render(0).unwrap();
    let covered = (0..view.num_pixels()).max_by(|&a, &b| view.opacity[a].total_cmp(&view.opacity[b])).unwrap();
    let click = Click { view: 0, x: covered % view.width, y: covered / view.width };
    let (_, map) = session.click(click).unwrap();
    assert!(map.threshold(0.5).get(click.x, click.y));
    assert!(!session.grow(0.9).unwrap().is_empty());
}
