//! The `omnifield` command: dataset generation, hierarchy building, training,
//! evaluation, ablations and the segmentation server.

pub mod server;
pub mod settings;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use omnifield::error::{Error, Result};
use omnifield::evalbench::{
    ablation_sweep, bench_records, bench_table, cosine_score_map, hierarchical_benchmark, instance_benchmark,
    overlay_tp_fp_fn, render_all, PropagationConfig, Sweep,
};
use omnifield::field::{load_field, RenderOptions};
use omnifield::losses::{format_loss_log, LossRecord};
use omnifield::segserver::{SceneEntry, SegService};
use omnifield::synthdata::{build_hierreps, encode_png, export_dataset, generate_scene, load_dataset, HierSceneSpec};
use omnifield::trainer::{train_scene_with, TrainConfig, TrainHooks};
use omnifield::util::write_atomic;

use settings::{read_table, resolve, FlagTable, Resolved};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an engine error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        e if e.is_not_found() => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "omnifield", version, about = "Hierarchical 3D segmentation feature fields from multi-view 2D masks")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 or absent uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with the subcommand's keys (scene spec for `gen`, training
    /// keys for `train` and the ablations, render keys for `eval` and `serve`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path: dataset directory, checkpoint file or report directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only warnings and errors on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene and write it as a dataset directory.
    #[command(after_help = config_keys::<HierSceneSpec>("Scene spec keys"))]
    Gen(GenArgs),
    /// Build the per-view hierarchy files of a dataset (skips up-to-date ones).
    Hierrep(HierrepArgs),
    /// Train a feature field and write its checkpoint plus loss log.
    #[command(after_help = config_keys::<TrainConfig>("Training keys"))]
    Train(TrainArgs),
    /// Evaluate a checkpoint or run an ablation sweep.
    #[command(after_help = config_keys::<TrainConfig>("Training keys (render keys: point_radius, samples_per_ray)"))]
    Eval(EvalArgs),
    /// Serve the interactive segmentation API.
    #[command(after_help = config_keys::<TrainConfig>("Training keys (render keys: point_radius, samples_per_ray)"))]
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Scene spec (TOML); same as --config.
    pub spec: Option<PathBuf>,
    /// Scene name (key `name`).
    #[arg(long)]
    pub name: Option<String>,
    /// Number of camera views (key `views`).
    #[arg(long)]
    pub views: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HierrepArgs {
    /// Dataset directory; defaults to $OMNIFIELD_DATA.
    pub dataset: Option<PathBuf>,
    /// Rebuild even up-to-date files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory; defaults to $OMNIFIELD_DATA.
    pub dataset: Option<PathBuf>,
    /// Optimization steps (key `iterations`).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Pixels sampled per step (key `rays_per_batch`).
    #[arg(long)]
    pub rays_per_batch: Option<usize>,
    /// Per-level decay in [0, 1] (key `lambda`).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Feature dimension (key `dim`).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Initial learning rate (key `lr_start`).
    #[arg(long)]
    pub lr_start: Option<f64>,
    /// Final learning rate (key `lr_end`).
    #[arg(long)]
    pub lr_end: Option<f64>,
    /// surface or volume (key `backend`).
    #[arg(long)]
    pub backend: Option<String>,
    /// Steps between intermediate checkpoints, 0 for final only (key `checkpoint_every`).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Steps between progress lines.
    #[arg(long, default_value_t = 100)]
    pub progress_every: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    Hier,
    Instance,
    AblateLambda,
    AblateDim,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub which: EvalKind,
    /// Dataset directory; defaults to $OMNIFIELD_DATA.
    pub dataset: Option<PathBuf>,
    /// Trained field (required for hier and instance).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sweep values for the ablations, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Write TP/FP/FN overlay images for hier queries.
    #[arg(long)]
    pub overlays: bool,
    /// Training steps per ablation run (key `iterations`).
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Dataset directory; defaults to $OMNIFIELD_DATA.
    pub dataset: Option<PathBuf>,
    /// Trained field to serve.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TCP port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Bind address.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

/// Help footer listing every config file key with its default.
fn config_keys<T: serde::Serialize + Default>(title: &str) -> String {
    let body = toml::to_string(&T::default()).unwrap_or_default();
    let lines: String = body.lines().map(|l| format!("  {l}\n")).collect();
    format!("{title} for --config, with defaults:\n{lines}")
}

/// Dataset directory from the argument or `OMNIFIELD_DATA`. A relative
/// argument that does not exist is also tried under `OMNIFIELD_DATA`.
pub fn dataset_root(arg: Option<&Path>) -> Result<PathBuf> {
    let env = std::env::var_os("OMNIFIELD_DATA").map(PathBuf::from);
    match (arg, env) {
        (Some(p), Some(root)) if p.is_relative() && !p.exists() && root.join(p).exists() => Ok(root.join(p)),
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(root)) => Ok(root),
        (None, None) => Err(Error::Config("no dataset given and OMNIFIELD_DATA is unset".into())),
    }
}

fn out_path(global: &Global, what: &str) -> Result<PathBuf> {
    global
        .out
        .clone()
        .ok_or_else(|| Error::Config(format!("--out is required ({what})")))
}

fn config_table(global: &Global) -> Result<Option<toml::Table>> {
    global.config.as_deref().map(read_table).transpose()
}

fn announce<T>(r: &Resolved<T>, title: &str, quiet: bool) {
    if !quiet {
        eprint!("{}", r.report(title));
    }
}

/// Effective training configuration: default < config file < flags.
pub fn train_settings(global: &Global, overrides: &FlagTable) -> Result<Resolved<TrainConfig>> {
    let mut flags = FlagTable(overrides.0.clone());
    flags.set("seed", global.seed.map(|s| s as i64));
    let r: Resolved<TrainConfig> = resolve(config_table(global)?, flags.0)?;
    r.value.validate()?;
    Ok(r)
}

fn render_options(c: &TrainConfig) -> RenderOptions {
    RenderOptions {
        point_radius: c.point_radius,
        samples_per_ray: c.samples_per_ray,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.global.threads.unwrap_or(0);
    let global = cli.global.clone();
    omnifield::par::with_threads(threads, move || dispatch(&global, cli.command))
}

fn dispatch(global: &Global, command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(global, a),
        Command::Hierrep(a) => cmd_hierrep(global, a),
        Command::Train(a) => cmd_train(global, a),
        Command::Eval(a) => cmd_eval(global, a),
        Command::Serve(a) => cmd_serve(global, a),
    }
}

pub fn cmd_gen(global: &Global, a: GenArgs) -> Result<()> {
    let file = match a.spec.as_deref().or(global.config.as_deref()) {
        Some(p) => Some(read_table(p)?),
        None => None,
    };
    let mut flags = FlagTable::default();
    flags
        .set("seed", global.seed.map(|s| s as i64))
        .set_str("name", a.name.as_deref())
        .set("views", a.views.map(|v| v as i64));
    let r: Resolved<HierSceneSpec> = resolve(file, flags.0)?;
    announce(&r, "scene spec", global.quiet);
    let out = out_path(global, "dataset directory")?;
    let scene = generate_scene(&r.value)?;
    let m = export_dataset(&scene, &out)?;
    if !global.quiet {
        println!("wrote {} views, {} points, {} queries to {}", m.views, m.points, m.queries, out.display());
    }
    Ok(())
}

pub fn cmd_hierrep(global: &Global, a: HierrepArgs) -> Result<()> {
    let root = dataset_root(a.dataset.as_deref())?;
    let r = build_hierreps(&root, a.force)?;
    if !global.quiet {
        println!(
            "built {} views, {} up to date, {} without masks",
            r.built.len(),
            r.up_to_date.len(),
            r.empty.len()
        );
    }
    Ok(())
}

pub fn cmd_train(global: &Global, a: TrainArgs) -> Result<()> {
    let mut flags = FlagTable::default();
    flags
        .set("iterations", a.iterations.map(|v| v as i64))
        .set("rays_per_batch", a.rays_per_batch.map(|v| v as i64))
        .set("lambda", a.lambda)
        .set("dim", a.dim.map(|v| v as i64))
        .set("lr_start", a.lr_start)
        .set("lr_end", a.lr_end)
        .set_str("backend", a.backend.as_deref())
        .set("checkpoint_every", a.checkpoint_every.map(|v| v as i64));
    let r = train_settings(global, &flags)?;
    announce(&r, "train config", global.quiet);
    let out = out_path(global, "checkpoint file")?;
    let root = dataset_root(a.dataset.as_deref())?;
    let dataset = load_dataset(&root)?;
    let config = r.value;
    let quiet = global.quiet;
    let every = a.progress_every.max(1);
    let total = config.iterations;
    let mut progress = |rec: &LossRecord| {
        let step = rec.step as usize + 1;
        if !quiet && (step % every == 0 || step == total) {
            eprintln!("step {step}/{total} loss {:.6} l_h {:.6} lr {:.2e}", rec.total, rec.l_h, rec.lr);
        }
    };
    let hooks = TrainHooks {
        checkpoint: Some(out.clone()),
        on_step: Some(&mut progress),
    };
    let outcome = train_scene_with(&dataset, &config, hooks)?;
    let log_path = out.with_extension("log");
    write_atomic(&log_path, format_loss_log(&outcome.log).as_bytes())?;
    if !quiet {
        println!(
            "wrote {} and {} (mean |norm - 1| = {:.4})",
            out.display(),
            log_path.display(),
            outcome.field.mean_norm_deviation()
        );
    }
    Ok(())
}

fn write_report(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    write_atomic(&dir.join(name), text.as_bytes())
}

pub fn cmd_eval(global: &Global, a: EvalArgs) -> Result<()> {
    let mut flags = FlagTable::default();
    flags.set("iterations", a.iterations.map(|v| v as i64));
    let r = train_settings(global, &flags)?;
    announce(&r, "eval config", global.quiet);
    let root = dataset_root(a.dataset.as_deref())?;
    let dataset = load_dataset(&root)?;
    let opts = render_options(&r.value);
    let checkpoint = || {
        a.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{:?} needs --checkpoint", a.which)))
            .and_then(load_field)
    };
    match a.which {
        EvalKind::Hier => {
            let field = checkpoint()?;
            let res = hierarchical_benchmark(&field, &dataset, &opts)?;
            print!("{}", bench_table(&res));
            if let Some(dir) = &global.out {
                write_report(dir, "hier.jsonl", &bench_records(&res))?;
                if a.overlays {
                    let overlay_dir = dir.join("overlays");
                    std::fs::create_dir_all(&overlay_dir).map_err(|e| Error::Io {
                        path: overlay_dir.clone(),
                        source: e,
                    })?;
                    let renders = render_all(&field, &dataset, &opts)?;
                    for (i, (q, qr)) in dataset.queries.iter().zip(&res.queries).enumerate() {
                        let labels = dataset.labels(q.view)?;
                        let (g1, g2) = q.masks(labels)?;
                        let view = &renders[q.view];
                        let Ok(map) = cosine_score_map(view, q.view, q.x, q.y) else { continue };
                        for (lvl, gt, t) in [("l1", &g1, qr.threshold_l1), ("l2", &g2, qr.threshold_l2)] {
                            let img = overlay_tp_fp_fn(&dataset.views[q.view].rgb, &map.threshold(t), gt);
                            let png = encode_png(view.width, view.height, &img)?;
                            write_atomic(&overlay_dir.join(format!("q{i:03}_v{}_{lvl}.png", q.view)), &png)?;
                        }
                    }
                }
            }
        }
        EvalKind::Instance => {
            let field = checkpoint()?;
            let res = instance_benchmark(&field, &dataset, &opts, &PropagationConfig::default(), dataset.spec.as_ref().map_or(12, |s| s.min_query_area))?;
            println!("{:>6} {:>5} {:>5} {:>7}", "object", "ref", "view", "IoU");
            for p in &res.pairs {
                println!("{:>6} {:>5} {:>5} {:>7.3}", p.object, p.reference_view, p.target_view, p.iou);
            }
            for (o, fit, own) in &res.self_checks {
                println!("object {o}: reference fit IoU {fit:.3}, self-propagation IoU {own:.3}");
            }
            println!("instance mIoU {:.3} over {} pairs", res.miou, res.pairs.len());
            if let Some(dir) = &global.out {
                let text = serde_json::to_string(&res).map_err(|e| Error::Config(e.to_string()))?;
                write_report(dir, "instance.json", &format!("{text}\n"))?;
            }
        }
        EvalKind::AblateLambda | EvalKind::AblateDim => {
            let parse_err = |v: &str| Error::Config(format!("bad sweep value {v:?}"));
            let sweep = if a.which == EvalKind::AblateLambda {
                let vals = if a.values.is_empty() {
                    vec![0.0, 0.25, 0.5, 0.75, 1.0]
                } else {
                    a.values.iter().map(|v| v.trim().parse().map_err(|_| parse_err(v))).collect::<Result<_>>()?
                };
                Sweep::Lambda(vals)
            } else {
                let vals = if a.values.is_empty() {
                    vec![4, 8, 16, 32, 64]
                } else {
                    a.values.iter().map(|v| v.trim().parse().map_err(|_| parse_err(v))).collect::<Result<_>>()?
                };
                Sweep::Dim(vals)
            };
            let table = ablation_sweep(&dataset, &r.value, &sweep)?;
            print!("{}", table.to_text());
            if let Some(dir) = &global.out {
                let name = if a.which == EvalKind::AblateLambda { "ablate_lambda.jsonl" } else { "ablate_dim.jsonl" };
                write_report(dir, name, &table.to_records())?;
            }
        }
    }
    Ok(())
}

pub fn cmd_serve(global: &Global, a: ServeArgs) -> Result<()> {
    let r = train_settings(global, &FlagTable::default())?;
    announce(&r, "render config", global.quiet);
    let root = dataset_root(a.dataset.as_deref())?;
    let dataset = Arc::new(load_dataset(&root)?);
    let field = load_field(&a.checkpoint)?;
    let id = dataset.name.clone();
    let scene = SceneEntry::new(id, dataset, field, render_options(&r.value)).map_err(|e| Error::Config(e.to_string()))?;
    let mut service = SegService::new();
    service.add_scene(scene);
    let export_root = global.out.clone().unwrap_or_else(|| PathBuf::from("segments"));
    let state = Arc::new(server::AppState { service, export_root });
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: PathBuf::from("<runtime>"),
        source: e,
    })?;
    rt.block_on(server::serve(state, addr)).map_err(|e| Error::Io {
        path: PathBuf::from(addr.to_string()),
        source: e,
    })
}
