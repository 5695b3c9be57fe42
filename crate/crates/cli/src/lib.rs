//! Command implementations behind the `inpaint` binary.
//!
//! Each command resolves its configuration the same way: start from the
//! defaults, layer the `--config` file on top, then apply any flags that
//! were actually given. Artifacts land in the configured output directory
//! with fixed names, so a given `(config, seed)` pair always produces the
//! same byte-identical file set.
//!
//! Diagnostics go to stderr, gated by `INPAINT_LOG` (`quiet`, `info`,
//! `debug`; anything else means `info`). Artifact files are the real
//! output; stdout stays silent except for the selftest report.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use inpaint_core::config::RunConfig;
use inpaint_core::diffusion::{format_trace, DiffusionMode, MapSnapshot};
use inpaint_core::dump::write_map;
use inpaint_core::error::Error;
use inpaint_core::image::{read_mask, read_pnm, write_pnm};
use inpaint_core::model::{run_pipeline, Model, PipelineOptions};
use inpaint_core::selftest;
use inpaint_core::snapshot::save_model;
use inpaint_core::tensor::Graph;
use inpaint_core::train::{format_curve, train_toy};
use inpaint_core::Result;

// ── Logging ─────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

pub fn log_level() -> LogLevel {
    match std::env::var("INPAINT_LOG").as_deref() {
        Ok("quiet") => LogLevel::Quiet,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

fn info(msg: &str) {
    if log_level() >= LogLevel::Info {
        eprintln!("{msg}");
    }
}

fn debug(msg: &str) {
    if log_level() >= LogLevel::Debug {
        eprintln!("{msg}");
    }
}

// ── Argument surface ────────────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "inpaint",
    about = "Reference-guided transformer inpainting at desk scale",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inpaint one image and write the result set.
    Inpaint(Overrides),
    /// Train on the built-in synthetic dataset; write the loss curve and a
    /// weight snapshot.
    TrainToy(Overrides),
    /// Run the pipeline and dump every attention map as text.
    DumpAttn(Overrides),
    /// Run the built-in invariant suites.
    Selftest(SelftestArgs),
}

/// Flags shared by the pipeline commands. Every flag overrides its
/// counterpart from the `--config` file; a flag that is not given leaves
/// the file (or default) value untouched.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Configuration file, one `key = value` per line.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input image (binary PPM).
    #[arg(long)]
    pub image: Option<String>,
    /// Mask image (binary PGM; 0 = hole, 255 = known).
    #[arg(long)]
    pub mask: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long)]
    pub out: Option<String>,
    /// Seed for every random draw.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Direct/bridge mixing weight in [0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Skip the reference self-attention encoder (ablation).
    #[arg(long)]
    pub no_tte: bool,
    /// Disable the bridge attention path (ablation).
    #[arg(long)]
    pub no_bridge: bool,
    /// Rebuild attention maps from scratch every selection step.
    #[arg(long)]
    pub exact_diffusion: bool,
    /// Mask-ratio threshold for the neighbor-averaging shortcut.
    #[arg(long)]
    pub avg_threshold: Option<f64>,
    /// Optimizer steps for train-toy.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate for train-toy (sets both parameter groups).
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct SelftestArgs {
    /// Inject a drifting-evaluation fault into the gradient suite; the
    /// suite must then fail (negative test of the test machinery).
    #[arg(long)]
    pub corrupt_gradients: bool,
}

/// Defaults, then the config file, then the flags that were given.
pub fn resolve_config(ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &ov.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &ov.image {
        cfg.image = v.clone();
    }
    if let Some(v) = &ov.mask {
        cfg.mask = v.clone();
    }
    if let Some(v) = &ov.out {
        cfg.out = v.clone();
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.lambda {
        cfg.lambda = v;
    }
    if ov.no_tte {
        cfg.no_tte = true;
    }
    if ov.no_bridge {
        cfg.no_bridge = true;
    }
    if ov.exact_diffusion {
        cfg.diffusion = DiffusionMode::Exact;
    }
    if let Some(v) = ov.avg_threshold {
        cfg.avg_threshold = v;
    }
    if let Some(v) = ov.steps {
        cfg.steps = v;
    }
    if let Some(v) = ov.lr {
        // The toy override pins both groups to one rate so that --lr 0
        // freezes the whole model.
        cfg.lr = v;
        cfg.lr_backbone = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ── Commands ────────────────────────────────────────────────────────────────

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn load_inputs(cfg: &RunConfig) -> Result<(inpaint_core::image::Image, inpaint_core::image::Mask)> {
    if cfg.image.is_empty() {
        return Err(Error::Config {
            field: "image".into(),
            detail: "no input image path given".into(),
        });
    }
    if cfg.mask.is_empty() {
        return Err(Error::Config {
            field: "mask".into(),
            detail: "no mask path given".into(),
        });
    }
    let img = read_pnm(Path::new(&cfg.image))?;
    let mask = read_mask(Path::new(&cfg.mask))?;
    Ok((img, mask))
}

/// Inpaint `cfg.image` under `cfg.mask`. Writes `out_small.ppm` (decoder
/// resolution), `out_full.ppm` (x4 upsample), `trace.txt` (selection
/// steps), and `cost.txt` (attention bookkeeping counters).
pub fn cmd_inpaint(cfg: &RunConfig) -> Result<()> {
    let (img, mask) = load_inputs(cfg)?;
    debug(&format!(
        "image {}x{}, {} masked pixels",
        img.height(),
        img.width(),
        mask.masked_count()
    ));
    let model = Model::new(cfg)?;
    let g = Graph::new();
    let opts = PipelineOptions::from_config(cfg);
    let run = run_pipeline(&g, &model, &img, &mask, &opts)?;
    let dir = out_dir(cfg)?;
    write_pnm(&run.out_small, &dir.join("out_small.ppm"))?;
    write_pnm(&run.out_full, &dir.join("out_full.ppm"))?;
    write_text(&dir.join("trace.txt"), &format_trace(&run.trace))?;
    write_text(&dir.join("cost.txt"), &format!("{}\n", run.cost))?;
    info(&format!(
        "inpainted {} patches in {} steps; {}",
        run.trace.len(),
        run.trace.len(),
        run.cost
    ));
    info(&format!("wrote {}", dir.display()));
    Ok(())
}

/// Train on the synthetic dataset. Writes `loss_curve.txt` and
/// `snapshot.bin`.
pub fn cmd_train_toy(cfg: &RunConfig) -> Result<()> {
    info(&format!(
        "training {} steps at lr {} / {}",
        cfg.steps, cfg.lr, cfg.lr_backbone
    ));
    let (model, curve) = train_toy(cfg)?;
    let dir = out_dir(cfg)?;
    write_text(&dir.join("loss_curve.txt"), &format_curve(&curve))?;
    save_model(&dir.join("snapshot.bin"), &model)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        info(&format!(
            "loss {} -> {} over {} steps",
            first.loss,
            last.loss,
            curve.len()
        ));
    }
    info(&format!("wrote {}", dir.display()));
    Ok(())
}

/// Run the pipeline with record collection and write every attention map:
/// encoder heads, coarse-fill rows, the matching scores at selection start,
/// and the per-step selection distributions.
pub fn cmd_dump_attn(cfg: &RunConfig) -> Result<()> {
    let (img, mask) = load_inputs(cfg)?;
    let model = Model::new(cfg)?;
    let g = Graph::new();
    let mut opts = PipelineOptions::from_config(cfg);
    opts.collect_records = true;
    let run = run_pipeline(&g, &model, &img, &mask, &opts)?;
    let records = run.records.expect("collection requested");
    let dir = out_dir(cfg)?;
    let mut written = 0usize;
    for (l, heads) in records.encoder_attn.iter().enumerate() {
        for (h, map) in heads.iter().enumerate() {
            write_map(&dir, &format!("encoder_l{l}_h{h}"), map)?;
            written += 1;
        }
    }
    for rec in &records.cfa {
        let map = MapSnapshot {
            rows: 1,
            cols: rec.attention.len(),
            values: rec.attention.clone(),
        };
        write_map(&dir, &format!("cfa_patch{}", rec.patch), &map)?;
        written += 1;
    }
    write_map(&dir, "sel_direct", &records.sel_direct)?;
    written += 1;
    if let Some(bridge) = &records.sel_bridge {
        write_map(&dir, "sel_bridge", bridge)?;
        written += 1;
    }
    // Selection distributions: one row per step over the initial candidate
    // list (the first step's distribution covers every candidate), zero for
    // candidates already promoted by that step.
    let cand_order: Vec<usize> = run
        .trace
        .first()
        .map(|s| s.distribution.iter().map(|(c, _)| *c).collect())
        .unwrap_or_default();
    let mut values = Vec::with_capacity(run.trace.len() * cand_order.len());
    for step in &run.trace {
        for &cand in &cand_order {
            let p = step
                .distribution
                .iter()
                .find(|(c, _)| *c == cand)
                .map_or(0.0, |(_, p)| *p);
            values.push(p);
        }
    }
    let probs = MapSnapshot {
        rows: run.trace.len(),
        cols: cand_order.len(),
        values,
    };
    write_map(&dir, "diffusion_probs", &probs)?;
    written += 1;
    info(&format!("wrote {written} maps to {}", dir.display()));
    Ok(())
}

/// Run the invariant suites; the report goes to stdout. Returns an error —
/// and therefore a nonzero exit — if any suite fails.
pub fn cmd_selftest(args: &SelftestArgs) -> Result<()> {
    let results = selftest::run_all(args.corrupt_gradients);
    print!("{}", selftest::format_report(&results));
    if selftest::all_passed(&results) {
        Ok(())
    } else {
        Err(Error::Eval {
            detail: format!(
                "{} of {} suites failed",
                results.iter().filter(|r| !r.passed).count(),
                results.len()
            ),
        })
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Inpaint(ov) => cmd_inpaint(&resolve_config(ov)?),
        Command::TrainToy(ov) => cmd_train_toy(&resolve_config(ov)?),
        Command::DumpAttn(ov) => cmd_dump_attn(&resolve_config(ov)?),
        Command::Selftest(args) => cmd_selftest(args),
    }
}
