//! Run configuration: flat `key = value` text, one entry per line.
//!
//! Lines whose first non-blank character is `#` are comments; blank lines
//! are skipped. Values never contain comments. Unknown keys are rejected
//! outright — a typo in a config file must fail loudly, not silently fall
//! back to a default. When a key repeats, the last occurrence wins, which
//! is also what lets command-line flags override file values: they are
//! applied as later assignments.
//!
//! `to_text` emits every field in a canonical order, so
//! `parse(to_text(c)) == c` for any valid configuration.

use std::fmt::Write as _;

use crate::diffusion::{DiffusionMode, ScoreStrategy};
use crate::encoder::FfnKind;
use crate::error::Error;
use crate::loss::{LossWeights, Reduction};
use crate::Result;

/// Positional-embedding flavor for both encoder and decoder streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosChoice {
    Learned,
    Sinusoidal,
}

impl PosChoice {
    fn parse(s: &str) -> Result<PosChoice> {
        match s {
            "learned" => Ok(PosChoice::Learned),
            "sinusoidal" => Ok(PosChoice::Sinusoidal),
            other => Err(Error::Config {
                field: "pos".into(),
                detail: format!("unknown embedding {other:?} (expected learned|sinusoidal)"),
            }),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            PosChoice::Learned => "learned",
            PosChoice::Sinusoidal => "sinusoidal",
        }
    }
}

fn parse_ffn(s: &str) -> Result<FfnKind> {
    match s {
        "relu" => Ok(FfnKind::Relu),
        "gelu" => Ok(FfnKind::Gelu),
        other => Err(Error::Config {
            field: "ffn".into(),
            detail: format!("unknown nonlinearity {other:?} (expected relu|gelu)"),
        }),
    }
}

fn ffn_name(k: FfnKind) -> &'static str {
    match k {
        FfnKind::Relu => "relu",
        FfnKind::Gelu => "gelu",
    }
}

fn parse_reduction(s: &str) -> Result<Reduction> {
    match s {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        other => Err(Error::Config {
            field: "reduction".into(),
            detail: format!("unknown reduction {other:?} (expected mean|sum)"),
        }),
    }
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Input image path (PPM). Empty means "not set".
    pub image: String,
    /// Mask path (PGM, strictly 0/255). Empty means "not set".
    pub mask: String,
    /// Output directory for artifacts.
    pub out: String,
    pub height: usize,
    pub width: usize,
    /// Patch edge at the decoder resolution.
    pub patch: usize,
    /// Reference (encoder) width.
    pub d_e: usize,
    /// Decoder width.
    pub d_d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Stride-2 stages in the reference backbone (1..=4).
    pub backbone_stages: usize,
    pub ffn: FfnKind,
    pub pos: PosChoice,
    /// Direct/bridge mixing weight.
    pub lambda: f64,
    /// Skip encoder self-attention: references are the raw projected
    /// features plus positional embeddings.
    pub no_tte: bool,
    /// Disable the bridge reconstruction path entirely.
    pub no_bridge: bool,
    pub diffusion: DiffusionMode,
    pub score_strategy: ScoreStrategy,
    /// Mask-ratio threshold for the neighbor-averaging shortcut; 0 disables.
    pub avg_threshold: f64,
    pub seed: u64,
    pub w_rec: f64,
    pub w_prec: f64,
    pub w_style: f64,
    pub reduction: Reduction,
    /// Training-only knobs.
    pub steps: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image: String::new(),
            mask: String::new(),
            out: "out".into(),
            height: 64,
            width: 64,
            patch: 4,
            d_e: 64,
            d_d: 64,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            backbone_stages: 4,
            ffn: FfnKind::Relu,
            pos: PosChoice::Learned,
            lambda: 0.5,
            no_tte: false,
            no_bridge: false,
            diffusion: DiffusionMode::Incremental,
            score_strategy: ScoreStrategy::SoftmaxMass,
            avg_threshold: 0.0,
            seed: 42,
            w_rec: 10.0,
            w_prec: 0.1,
            w_style: 250.0,
            reduction: Reduction::Mean,
            steps: 200,
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            batch: 4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        field: field.into(),
        detail: format!("cannot parse {value:?}"),
    })
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config {
            field: field.into(),
            detail: format!("expected true|false, got {other:?}"),
        }),
    }
}

impl RunConfig {
    /// Assign one key. Both the file parser and command-line overrides feed
    /// through here, so they accept identical spellings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image" => self.image = value.into(),
            "mask" => self.mask = value.into(),
            "out" => self.out = value.into(),
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "d_e" => self.d_e = parse_num(key, value)?,
            "d_d" => self.d_d = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "enc_layers" => self.enc_layers = parse_num(key, value)?,
            "dec_layers" => self.dec_layers = parse_num(key, value)?,
            "backbone_stages" => self.backbone_stages = parse_num(key, value)?,
            "ffn" => self.ffn = parse_ffn(value)?,
            "pos" => self.pos = PosChoice::parse(value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "no_tte" => self.no_tte = parse_bool(key, value)?,
            "no_bridge" => self.no_bridge = parse_bool(key, value)?,
            "diffusion" => self.diffusion = DiffusionMode::parse(value)?,
            "score_strategy" => self.score_strategy = ScoreStrategy::parse(value)?,
            "avg_threshold" => self.avg_threshold = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "w_rec" => self.w_rec = parse_num(key, value)?,
            "w_prec" => self.w_prec = parse_num(key, value)?,
            "w_style" => self.w_style = parse_num(key, value)?,
            "reduction" => self.reduction = parse_reduction(value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_backbone" => self.lr_backbone = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            other => {
                return Err(Error::Config {
                    field: other.into(),
                    detail: "unknown configuration key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                field: format!("line {}", lineno + 1),
                detail: format!("expected \"key = value\", got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical textual form; `parse(to_text(c)) == c` for valid configs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image", self.image.clone());
        kv("mask", self.mask.clone());
        kv("out", self.out.clone());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("patch", self.patch.to_string());
        kv("d_e", self.d_e.to_string());
        kv("d_d", self.d_d.to_string());
        kv("heads", self.heads.to_string());
        kv("enc_layers", self.enc_layers.to_string());
        kv("dec_layers", self.dec_layers.to_string());
        kv("backbone_stages", self.backbone_stages.to_string());
        kv("ffn", ffn_name(self.ffn).into());
        kv("pos", self.pos.name().into());
        kv("lambda", self.lambda.to_string());
        kv("no_tte", self.no_tte.to_string());
        kv("no_bridge", self.no_bridge.to_string());
        kv("diffusion", self.diffusion.name().into());
        kv("score_strategy", self.score_strategy.name().into());
        kv("avg_threshold", self.avg_threshold.to_string());
        kv("seed", self.seed.to_string());
        kv("w_rec", self.w_rec.to_string());
        kv("w_prec", self.w_prec.to_string());
        kv("w_style", self.w_style.to_string());
        kv("reduction", reduction_name(self.reduction).into());
        kv("steps", self.steps.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_backbone", self.lr_backbone.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch", self.batch.to_string());
        s
    }

    // ── Derived geometry ───────────────────────────────────────────────

    /// Decoder working resolution (input downsampled by 4).
    pub fn decoder_extent(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Patch grid at the decoder resolution.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.height / 4 / self.patch, self.width / 4 / self.patch)
    }

    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.patch_grid();
        gh * gw
    }

    /// Texture-reference grid produced by the backbone.
    pub fn ref_grid(&self) -> (usize, usize) {
        (
            self.height >> self.backbone_stages,
            self.width >> self.backbone_stages,
        )
    }

    pub fn n_refs(&self) -> usize {
        let (rh, rw) = self.ref_grid();
        rh * rw
    }

    /// Pixel values per patch (RGB).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Stage count for the frozen perceptual stack: as deep as the decoder
    /// resolution allows, capped at 3.
    pub fn phi_stages(&self) -> usize {
        let (dh, dw) = self.decoder_extent();
        (dh.trailing_zeros().min(dw.trailing_zeros()).min(3)) as usize
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            rec: self.w_rec,
            prec: self.w_prec,
            style: self.w_style,
        }
    }

    /// Check every structural constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, detail: String| {
            Err(Error::Config {
                field: field.into(),
                detail,
            })
        };
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 4 != 0 {
                return err(name, format!("{v} must be a positive multiple of 4"));
            }
            if v % (1 << self.backbone_stages) != 0 {
                return err(
                    name,
                    format!(
                        "{v} not divisible by 2^backbone_stages = {}",
                        1 << self.backbone_stages
                    ),
                );
            }
            if (v / 4) % self.patch != 0 {
                return err(
                    name,
                    format!(
                        "decoder extent {} not divisible by patch {}",
                        v / 4,
                        self.patch
                    ),
                );
            }
            if (v / 4) % 2 != 0 {
                return err(
                    name,
                    format!(
                        "decoder extent {} too small for the perceptual stack",
                        v / 4
                    ),
                );
            }
        }
        if self.patch == 0 {
            return err("patch", "must be at least 1".into());
        }
        if self.heads == 0 {
            return err("heads", "must be at least 1".into());
        }
        if self.d_e == 0 || !self.d_e.is_multiple_of(self.heads) {
            return err(
                "d_e",
                format!(
                    "{} must be a positive multiple of heads {}",
                    self.d_e, self.heads
                ),
            );
        }
        if self.d_d == 0 {
            return err("d_d", "must be at least 1".into());
        }
        if self.enc_layers == 0 {
            return err("enc_layers", "must be at least 1".into());
        }
        if self.dec_layers == 0 {
            return err("dec_layers", "must be at least 1".into());
        }
        if !(1..=4).contains(&self.backbone_stages) {
            return err(
                "backbone_stages",
                format!("{} outside 1..=4", self.backbone_stages),
            );
        }
        if !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            return err("lambda", format!("{} outside [0, 1]", self.lambda));
        }
        if self.no_bridge && self.lambda == 0.0 {
            return err(
                "lambda",
                "0 with no_bridge leaves no reconstruction path".into(),
            );
        }
        if !(self.avg_threshold.is_finite() && (0.0..=1.0).contains(&self.avg_threshold)) {
            return err(
                "avg_threshold",
                format!("{} outside [0, 1]", self.avg_threshold),
            );
        }
        for (name, w) in [
            ("w_rec", self.w_rec),
            ("w_prec", self.w_prec),
            ("w_style", self.w_style),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return err(name, format!("{w} is not a nonnegative finite weight"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_backbone", self.lr_backbone),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(name, format!("{v} must be nonnegative and finite"));
            }
        }
        if self.steps == 0 {
            return err("steps", "must be at least 1".into());
        }
        if self.batch == 0 {
            return err("batch", "must be at least 1".into());
        }
        Ok(())
    }
}
