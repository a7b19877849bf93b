//! Training configuration as a `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown keys are errors. Lists are comma separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::ElasticSpec;
use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::kernels::LossWeights;
use crate::nn::{BackboneSpec, Init};
use crate::optim::{initial_lr_for, LrSchedule};
use crate::shuffle::ShuffleFactors;

/// An explicit learning rate, or the table rate for the configured
/// shuffle factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSetting {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub in_channels: usize,
    pub classes: usize,
    pub patch: [usize; 3],
    pub factors: ShuffleFactors,
    pub hdc_features: usize,
    pub widths: Vec<usize>,
    pub pool: [usize; 3],
    pub convs_per_level: usize,
    pub kernel: usize,
    pub hdc_kernel: usize,
    pub duc_kernel: usize,
    pub skip_connections: bool,
    pub activation: Activation,
    pub init: Init,
    pub lr: LrSetting,
    pub lr_period: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub dice_eps: f64,
    pub augment_count: usize,
    pub elastic_sigma: f64,
    pub elastic_grid: [usize; 3],
    pub val_every: u64,
    /// `None` means half the patch.
    pub val_stride: Option<[usize; 3]>,
    /// Stop once the mean foreground validation Dice reaches this value;
    /// 0 disables early stopping.
    pub stop_dice: f64,
    pub train_manifest: PathBuf,
    /// Empty means no validation.
    pub val_manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let b = BackboneSpec::default();
        TrainConfig {
            seed: 0,
            in_channels: b.in_channels,
            classes: b.classes,
            patch: [32, 32, 32],
            factors: ShuffleFactors::new(2, 2, 2).expect("positive"),
            hdc_features: b.hdc_features,
            widths: b.widths,
            pool: b.pool,
            convs_per_level: b.convs_per_level,
            kernel: b.kernel,
            hdc_kernel: b.hdc_kernel,
            duc_kernel: b.duc_kernel,
            skip_connections: b.skip_connections,
            activation: b.activation,
            init: Init::default(),
            lr: LrSetting::Auto,
            lr_period: 3000,
            momentum: 0.9,
            weight_decay: 0.005,
            batch_size: 1,
            iterations: 1000,
            lambda_ce: 1.0,
            lambda_dice: 1.0,
            dice_eps: LossWeights::default().dice_eps,
            augment_count: 4,
            elastic_sigma: ElasticSpec::default().sigma,
            elastic_grid: ElasticSpec::default().grid,
            val_every: 100,
            val_stride: None,
            stop_dice: 0.0,
            train_manifest: PathBuf::from("data/train.tsv"),
            val_manifest: PathBuf::new(),
            out_dir: PathBuf::from("run"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "in_channels",
    "classes",
    "patch",
    "factors",
    "hdc_features",
    "widths",
    "pool",
    "convs_per_level",
    "kernel",
    "hdc_kernel",
    "duc_kernel",
    "skip_connections",
    "activation",
    "init",
    "lr",
    "lr_period",
    "momentum",
    "weight_decay",
    "batch_size",
    "iterations",
    "lambda_ce",
    "lambda_dice",
    "dice_eps",
    "augment_count",
    "elastic_sigma",
    "elastic_grid",
    "val_every",
    "val_stride",
    "stop_dice",
    "train_manifest",
    "val_manifest",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let l = parse_list(key, v)?;
    l.try_into().map_err(|_| Error::Config(format!("'{key}' needs three comma-separated values, got '{v}'")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one key. Keys may use `-` in place of `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "seed" => self.seed = parse(k, v)?,
            "in_channels" => self.in_channels = parse(k, v)?,
            "classes" => self.classes = parse(k, v)?,
            "patch" => self.patch = parse_triple(k, v)?,
            "factors" => self.factors = v.parse()?,
            "hdc_features" => self.hdc_features = parse(k, v)?,
            "widths" => self.widths = parse_list(k, v)?,
            "pool" => self.pool = parse_triple(k, v)?,
            "convs_per_level" => self.convs_per_level = parse(k, v)?,
            "kernel" => self.kernel = parse(k, v)?,
            "hdc_kernel" => self.hdc_kernel = parse(k, v)?,
            "duc_kernel" => self.duc_kernel = parse(k, v)?,
            "skip_connections" => self.skip_connections = parse(k, v)?,
            "activation" => self.activation = v.parse()?,
            "init" => self.init = v.parse()?,
            "lr" => self.lr = if v == "auto" { LrSetting::Auto } else { LrSetting::Fixed(parse(k, v)?) },
            "lr_period" => self.lr_period = parse(k, v)?,
            "momentum" => self.momentum = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "iterations" => self.iterations = parse(k, v)?,
            "lambda_ce" => self.lambda_ce = parse(k, v)?,
            "lambda_dice" => self.lambda_dice = parse(k, v)?,
            "dice_eps" => self.dice_eps = parse(k, v)?,
            "augment_count" => self.augment_count = parse(k, v)?,
            "elastic_sigma" => self.elastic_sigma = parse(k, v)?,
            "elastic_grid" => self.elastic_grid = parse_triple(k, v)?,
            "val_every" => self.val_every = parse(k, v)?,
            "val_stride" => self.val_stride = if v == "auto" { None } else { Some(parse_triple(k, v)?) },
            "stop_dice" => self.stop_dice = parse(k, v)?,
            "train_manifest" => self.train_manifest = PathBuf::from(v),
            "val_manifest" => self.val_manifest = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "in_channels" => self.in_channels.to_string(),
            "classes" => self.classes.to_string(),
            "patch" => join(&self.patch),
            "factors" => self.factors.to_string(),
            "hdc_features" => self.hdc_features.to_string(),
            "widths" => join(&self.widths),
            "pool" => join(&self.pool),
            "convs_per_level" => self.convs_per_level.to_string(),
            "kernel" => self.kernel.to_string(),
            "hdc_kernel" => self.hdc_kernel.to_string(),
            "duc_kernel" => self.duc_kernel.to_string(),
            "skip_connections" => self.skip_connections.to_string(),
            "activation" => self.activation.to_string(),
            "init" => self.init.to_string(),
            "lr" => match self.lr {
                LrSetting::Auto => "auto".into(),
                LrSetting::Fixed(v) => v.to_string(),
            },
            "lr_period" => self.lr_period.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "iterations" => self.iterations.to_string(),
            "lambda_ce" => self.lambda_ce.to_string(),
            "lambda_dice" => self.lambda_dice.to_string(),
            "dice_eps" => self.dice_eps.to_string(),
            "augment_count" => self.augment_count.to_string(),
            "elastic_sigma" => self.elastic_sigma.to_string(),
            "elastic_grid" => join(&self.elastic_grid),
            "val_every" => self.val_every.to_string(),
            "val_stride" => self.val_stride.map_or_else(|| "auto".into(), |s| join(&s)),
            "stop_dice" => self.stop_dice.to_string(),
            "train_manifest" => self.train_manifest.display().to_string(),
            "val_manifest" => self.val_manifest.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected '--key value', got '{flag}'")))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            let value = it.next().ok_or_else(|| Error::Config(format!("missing value for '--{key}'")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            in_channels: self.in_channels,
            classes: self.classes,
            factors: self.factors,
            hdc_features: self.hdc_features,
            widths: self.widths.clone(),
            pool: self.pool,
            convs_per_level: self.convs_per_level,
            kernel: self.kernel,
            hdc_kernel: self.hdc_kernel,
            duc_kernel: self.duc_kernel,
            skip_connections: self.skip_connections,
            activation: self.activation,
        }
    }

    pub fn initial_lr(&self) -> Result<f64> {
        match self.lr {
            LrSetting::Fixed(v) => Ok(v),
            LrSetting::Auto => initial_lr_for(self.factors).ok_or_else(|| {
                Error::Config(format!("no tabulated learning rate for factors {}; set 'lr' explicitly", self.factors))
            }),
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.initial_lr()?, self.lr_period)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { ce: self.lambda_ce, dice: self.lambda_dice, dice_eps: self.dice_eps }
    }

    pub fn elastic(&self) -> ElasticSpec {
        ElasticSpec { grid: self.elastic_grid, sigma: self.elastic_sigma }
    }

    pub fn validation_stride(&self) -> [usize; 3] {
        self.val_stride.unwrap_or_else(|| crate::inference::default_stride(self.patch))
    }

    /// Everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let b = self.backbone();
        b.validate()?;
        b.check_patch(self.patch)?;
        self.schedule()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        if self.elastic_grid.iter().any(|&g| g < 2) {
            return Err(Error::Config(format!("elastic_grid needs at least 2 points per axis, got {:?}", self.elastic_grid)));
        }
        for (k, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_ce", self.lambda_ce),
            ("lambda_dice", self.lambda_dice),
            ("elastic_sigma", self.elastic_sigma),
            ("stop_dice", self.stop_dice),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("'{k}' must be a non-negative number, got {v}")));
            }
        }
        if !(self.dice_eps.is_finite() && self.dice_eps > 0.0) {
            return Err(Error::Config(format!("dice_eps must be positive, got {}", self.dice_eps)));
        }
        if self.val_stride.is_some_and(|s| s.contains(&0)) {
            return Err(Error::Config("val_stride must be positive".into()));
        }
        Ok(())
    }
}
