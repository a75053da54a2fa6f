//! Flat `key=value` configuration shared by every pipeline stage.
//!
//! Lines may carry `#` comments. Unknown keys and duplicate keys are errors.
//! [`Config::canonical`] renders every key in a fixed order; the
//! architecture subset of that text is hashed into the checkpoint
//! fingerprint.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    // architecture
    pub sub_volume: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub dim_layers: usize,
    pub dim_heads: Vec<usize>,
    pub dim_fuse: FuseMode,
    pub use_dim: bool,
    pub enc_stages: usize,
    pub enc_window: usize,
    pub enc_depth: usize,
    pub enc_heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    pub ln_eps: f64,
    pub n_classes: usize,

    // optimisation
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,

    // objectives
    pub jsd_sign: f64,
    pub tau: f64,
    pub kde_samples: usize,
    pub seg_ce_weight: f64,
    pub seg_dice_weight: f64,

    // augmentation
    pub cutout_min: f64,
    pub cutout_max: f64,
    pub cutout_count: usize,

    // fine-tuning bookkeeping
    pub steps_per_epoch: usize,

    // synthetic data
    pub phantom_noise: f64,
    pub phantom_bias: bool,
}

impl Default for Config {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            sub_volume: 16,
            patch: 2,
            embed_dim: 8,
            dim_layers: 4,
            dim_heads: vec![1, 2, 4, 8],
            dim_fuse: FuseMode::Mean,
            use_dim: true,
            enc_stages: 2,
            enc_window: 2,
            enc_depth: 2,
            enc_heads: vec![2, 4],
            mlp_ratio: 2,
            proj_dim: 32,
            ln_eps: 1e-5,
            n_classes: 3,
            lr: 4e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 500,
            total_steps: 500,
            batch_size: 2,
            seed: 0,
            mode: Mode::Pretrain,
            jsd_sign: -1.0,
            tau: 0.1,
            kde_samples: 64,
            seg_ce_weight: 1.0,
            seg_dice_weight: 1.0,
            cutout_min: 0.1,
            cutout_max: 0.3,
            cutout_count: 3,
            steps_per_epoch: 50,
            phantom_noise: 0.05,
            phantom_bias: true,
        }
    }
}

/// Keys that determine parameter shapes. Only these enter the fingerprint,
/// so a pre-training checkpoint stays loadable under a fine-tuning config.
const ARCH_KEYS: &[&str] = &[
    "sub_volume",
    "patch",
    "embed_dim",
    "dim_layers",
    "dim_heads",
    "dim_fuse",
    "use_dim",
    "enc_stages",
    "enc_window",
    "enc_depth",
    "enc_heads",
    "mlp_ratio",
    "proj_dim",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Paper-scale preset: 96^3 sub-volumes, C = 48, fusion heads 3/6/12/24,
    /// four encoder stages. Too large for desk runs; kept for reference.
    pub fn paper_scale() -> Self {
        Self {
            sub_volume: 96,
            patch: 2,
            embed_dim: 48,
            dim_heads: vec![3, 6, 12, 24],
            enc_stages: 4,
            enc_window: 6,
            enc_heads: vec![3, 6, 12, 24],
            mlp_ratio: 4,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "sub_volume" => self.sub_volume = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "dim_layers" => self.dim_layers = parse(key, v)?,
            "dim_heads" => self.dim_heads = parse_list(key, v)?,
            "dim_fuse" => {
                self.dim_fuse = match v {
                    "mean" => FuseMode::Mean,
                    "sum" => FuseMode::Sum,
                    _ => return Err(Error::Config(format!("dim_fuse: expected mean|sum, got {v:?}"))),
                }
            }
            "use_dim" => self.use_dim = parse_bool(key, v)?,
            "enc_stages" => self.enc_stages = parse(key, v)?,
            "enc_window" => self.enc_window = parse(key, v)?,
            "enc_depth" => self.enc_depth = parse(key, v)?,
            "enc_heads" => self.enc_heads = parse_list(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "proj_dim" => self.proj_dim = parse(key, v)?,
            "ln_eps" => self.ln_eps = parse(key, v)?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => {
                self.mode = match v {
                    "pretrain" => Mode::Pretrain,
                    "finetune" => Mode::Finetune,
                    _ => return Err(Error::Config(format!("mode: expected pretrain|finetune, got {v:?}"))),
                }
            }
            "jsd_sign" => self.jsd_sign = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "kde_samples" => self.kde_samples = parse(key, v)?,
            "seg_ce_weight" => self.seg_ce_weight = parse(key, v)?,
            "seg_dice_weight" => self.seg_dice_weight = parse(key, v)?,
            "cutout_min" => self.cutout_min = parse(key, v)?,
            "cutout_max" => self.cutout_max = parse(key, v)?,
            "cutout_count" => self.cutout_count = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "phantom_noise" => self.phantom_noise = parse(key, v)?,
            "phantom_bias" => self.phantom_bias = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let fuse = match self.dim_fuse {
            FuseMode::Mean => "mean",
            FuseMode::Sum => "sum",
        };
        let mode = match self.mode {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
        };
        vec![
            ("sub_volume", self.sub_volume.to_string()),
            ("patch", self.patch.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("dim_layers", self.dim_layers.to_string()),
            ("dim_heads", join(&self.dim_heads)),
            ("dim_fuse", fuse.to_string()),
            ("use_dim", self.use_dim.to_string()),
            ("enc_stages", self.enc_stages.to_string()),
            ("enc_window", self.enc_window.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("enc_heads", join(&self.enc_heads)),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("ln_eps", format!("{:e}", self.ln_eps)),
            ("n_classes", self.n_classes.to_string()),
            ("lr", format!("{:e}", self.lr)),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", format!("{:e}", self.adam_eps)),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", mode.to_string()),
            ("jsd_sign", self.jsd_sign.to_string()),
            ("tau", self.tau.to_string()),
            ("kde_samples", self.kde_samples.to_string()),
            ("seg_ce_weight", self.seg_ce_weight.to_string()),
            ("seg_dice_weight", self.seg_dice_weight.to_string()),
            ("cutout_min", self.cutout_min.to_string()),
            ("cutout_max", self.cutout_max.to_string()),
            ("cutout_count", self.cutout_count.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("phantom_noise", self.phantom_noise.to_string()),
            ("phantom_bias", self.phantom_bias.to_string()),
        ]
    }

    /// Every key, one `key=value` line each, in a fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// SHA-256 over the canonical architecture lines.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries() {
            if ARCH_KEYS.contains(&k) {
                hasher.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Token grid extent per axis at the patch level.
    pub fn grid_extent(&self) -> usize {
        self.sub_volume / self.patch
    }

    /// Fusion-module width at layer `l`: `C * 2^l`.
    pub fn dim_width(&self, l: usize) -> usize {
        self.embed_dim << l
    }

    /// Encoder width at stage `i`: `C * 2^i`.
    pub fn enc_width(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Warm-up length actually used: at desk scale (fewer than 2500 total
    /// steps) it shrinks to `min(warmup_steps, total_steps / 5)`.
    pub fn effective_warmup(&self) -> usize {
        if self.total_steps < 2500 {
            self.warmup_steps.min(self.total_steps / 5)
        } else {
            self.warmup_steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.sub_volume == 0 || !self.sub_volume.is_multiple_of(self.patch) {
            return fail(format!("sub_volume {} not divisible by patch {}", self.sub_volume, self.patch));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.dim_heads.len() != self.dim_layers {
            return fail(format!("dim_heads lists {} entries for {} layers", self.dim_heads.len(), self.dim_layers));
        }
        for (l, &h) in self.dim_heads.iter().enumerate() {
            if h == 0 || !self.dim_width(l).is_multiple_of(h) {
                return fail(format!("fusion layer {l}: width {} not divisible by {h} heads", self.dim_width(l)));
            }
        }
        if self.enc_stages == 0 || self.enc_heads.len() != self.enc_stages {
            return fail(format!("enc_heads lists {} entries for {} stages", self.enc_heads.len(), self.enc_stages));
        }
        let mut extent = self.grid_extent();
        for i in 0..self.enc_stages {
            if i > 0 {
                if !extent.is_multiple_of(2) {
                    return fail(format!("stage {i}: extent {extent} cannot be merged"));
                }
                extent /= 2;
            }
            let w = self.enc_window.min(extent);
            if w == 0 || !extent.is_multiple_of(w) {
                return fail(format!("stage {i}: extent {extent} not divisible by window {}", self.enc_window));
            }
            let h = self.enc_heads[i];
            if h == 0 || !self.enc_width(i).is_multiple_of(h) {
                return fail(format!("stage {i}: width {} not divisible by {h} heads", self.enc_width(i)));
            }
        }
        if self.n_classes == 0 {
            return fail("n_classes must be at least 1".into());
        }
        if self.lr <= 0.0 {
            return fail("lr must be positive".into());
        }
        if self.jsd_sign != 1.0 && self.jsd_sign != -1.0 {
            return fail(format!("jsd_sign must be +1 or -1, got {}", self.jsd_sign));
        }
        if self.tau <= 0.0 {
            return fail("tau must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cutout_min)
            || !(0.0..=1.0).contains(&self.cutout_max)
            || self.cutout_min > self.cutout_max
        {
            return fail("cutout bounds must satisfy 0 <= min <= max <= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.kde_samples < 2 {
            return fail("kde_samples must be at least 2".into());
        }
        if self.effective_warmup() > self.total_steps {
            return fail("warmup exceeds total_steps".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        Config::paper_scale().validate().unwrap();
    }

    #[test]
    fn canonical_round_trips() {
        let mut cfg = Config::default();
        cfg.set("tau", "0.2").unwrap();
        cfg.set("dim_fuse", "sum").unwrap();
        let again = Config::parse_str(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = Config::parse_str("# header\nseed = 7 # trailing\n\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(matches!(Config::parse_str("colour=blue"), Err(Error::Config(_))));
        assert!(Config::parse_str("seed=1\nseed=2").is_err());
        assert!(Config::parse_str("just text").is_err());
    }

    #[test]
    fn fingerprint_ignores_training_keys() {
        let a = Config::default();
        let mut b = a.clone();
        b.lr = 1e-3;
        b.mode = Mode::Finetune;
        b.n_classes = 5;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.embed_dim = 16;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn desk_warmup_scaling() {
        let mut c = Config { total_steps: 200, ..Config::default() };
        assert_eq!(c.effective_warmup(), 40);
        c.total_steps = 5000;
        assert_eq!(c.effective_warmup(), 500);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = Config { dim_heads: vec![3, 2, 4, 8], ..Config::default() };
        assert!(c.validate().is_err());
    }
}
