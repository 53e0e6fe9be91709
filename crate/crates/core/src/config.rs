//! Run configuration: a sectioned `key = value` text format with strict
//! schema validation, canonical fingerprinting, and layered seed
//! resolution (flag over environment over file).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::metrics::SnnMode;
use crate::models::ArchSpec;
use crate::optim::LrSchedule;
use crate::scalar::Scalar;
use crate::spiking::{LifConfig, Surrogate};

pub const SEED_ENV: &str = "RATEKD_SEED";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchPreset {
    ResnetMini,
    Convnet3,
    Resnet18,
}

impl ArchPreset {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet-mini" => Ok(ArchPreset::ResnetMini),
            "convnet3" => Ok(ArchPreset::Convnet3),
            "resnet18" => Ok(ArchPreset::Resnet18),
            other => Err(Error::Config(format!(
                "unknown arch.preset '{other}' (resnet-mini | convnet3 | resnet18)"
            ))),
        }
    }

    fn canon(&self) -> &'static str {
        match self {
            ArchPreset::ResnetMini => "resnet-mini",
            ArchPreset::Convnet3 => "convnet3",
            ArchPreset::Resnet18 => "resnet18",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!(
                "unknown data.dataset '{other}' (mnist | cifar10)"
            ))),
        }
    }

    pub fn canon(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// (in_channels, (H, W), classes) of the raw images.
    pub fn image_profile(self) -> (usize, (usize, usize), usize) {
        match self {
            DatasetKind::Mnist => (1, (28, 28), 10),
            DatasetKind::Cifar10 => (3, (32, 32), 10),
        }
    }

    /// Per-channel normalization constants.
    pub fn normalization(self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DatasetKind::Mnist => (vec![0.1307], vec![0.3081]),
            DatasetKind::Cifar10 => (
                vec![0.4914, 0.4822, 0.4465],
                vec![0.2470, 0.2435, 0.2616],
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Direct,
    Poisson,
}

impl Encoding {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Encoding::Direct),
            "poisson" => Ok(Encoding::Poisson),
            other => Err(Error::Config(format!(
                "unknown data.encoding '{other}' (direct | poisson)"
            ))),
        }
    }

    fn canon(self) -> &'static str {
        match self {
            Encoding::Direct => "direct",
            Encoding::Poisson => "poisson",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaSchedule {
    Fixed,
    /// Linear 0 → α over the run.
    Increase,
    /// Linear α → 0 over the run.
    Decrease,
}

impl AlphaSchedule {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(AlphaSchedule::Fixed),
            "increase" => Ok(AlphaSchedule::Increase),
            "decrease" => Ok(AlphaSchedule::Decrease),
            other => Err(Error::Config(format!(
                "unknown distill.alpha_schedule '{other}' (fixed | increase | decrease)"
            ))),
        }
    }

    fn canon(self) -> &'static str {
        match self {
            AlphaSchedule::Fixed => "fixed",
            AlphaSchedule::Increase => "increase",
            AlphaSchedule::Decrease => "decrease",
        }
    }

    /// Mixing weight at a given epoch of a `total`-epoch run.
    pub fn at(self, base: f64, epoch: usize, total: usize) -> f64 {
        let frac = if total <= 1 {
            1.0
        } else {
            epoch as f64 / (total - 1) as f64
        };
        match self {
            AlphaSchedule::Fixed => base,
            AlphaSchedule::Increase => base * frac,
            AlphaSchedule::Decrease => base * (1.0 - frac),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaScheme {
    /// 1/n_b for every tapped block.
    Uniform,
    /// 1/2^(n−k) for tap k of n stages.
    Decay,
    /// All zero (ablation switch).
    Zero,
}

impl BetaScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BetaScheme::Uniform),
            "decay" => Ok(BetaScheme::Decay),
            "zero" => Ok(BetaScheme::Zero),
            other => Err(Error::Config(format!(
                "unknown distill.beta '{other}' (uniform | decay | zero)"
            ))),
        }
    }

    fn canon(self) -> &'static str {
        match self {
            BetaScheme::Uniform => "uniform",
            BetaScheme::Decay => "decay",
            BetaScheme::Zero => "zero",
        }
    }

    /// Block-loss weights for the given taps within an `n_stages` backbone.
    pub fn weights(self, taps: &[usize], n_stages: usize) -> Vec<f64> {
        match self {
            BetaScheme::Uniform => {
                let w = if n_stages == 0 { 0.0 } else { 1.0 / n_stages as f64 };
                vec![w; taps.len()]
            }
            BetaScheme::Decay => taps
                .iter()
                .map(|&k| 0.5f64.powi(n_stages.saturating_sub(k) as i32))
                .collect(),
            BetaScheme::Zero => vec![0.0; taps.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    Rectangular,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch_preset: ArchPreset,
    pub stem_stride: usize,

    pub lambda: f64,
    pub v_th: f64,
    pub surrogate: SurrogateKind,
    pub surrogate_width: f64,
    pub surrogate_steepness: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub timesteps: usize,
    pub mode: SnnMode,
    pub lr_schedule: LrSchedule,

    pub alpha: f64,
    pub alpha_schedule: AlphaSchedule,
    pub beta: BetaScheme,
    /// Empty means every interior tap of the architecture.
    pub taps: Vec<usize>,
    pub teacher: String,

    pub dataset: DatasetKind,
    pub data_dir: String,
    pub encoding: Encoding,
    pub augment: AugmentPolicy,
    pub train_limit: usize,
    pub eval_limit: usize,

    pub out_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch_preset: ArchPreset::ResnetMini,
            stem_stride: 1,
            lambda: 0.5,
            v_th: 1.0,
            surrogate: SurrogateKind::Rectangular,
            surrogate_width: 1.0,
            surrogate_steepness: 4.0,
            epochs: 5,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            timesteps: 4,
            mode: SnnMode::Rate,
            lr_schedule: LrSchedule::Cosine,
            alpha: 0.5,
            alpha_schedule: AlphaSchedule::Fixed,
            beta: BetaScheme::Uniform,
            taps: Vec::new(),
            teacher: String::new(),
            dataset: DatasetKind::Mnist,
            data_dir: "data/mnist".into(),
            encoding: Encoding::Direct,
            augment: AugmentPolicy::None,
            train_limit: 0,
            eval_limit: 0,
            out_dir: "runs".into(),
            seed: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::Config(format!("{section}.{key} = '{v}' is not a valid value"))
    })
}

impl RunConfig {
    /// Parse a config file. Unknown sections or keys fail immediately.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                match name {
                    "arch" | "neuron" | "train" | "distill" | "data" | "output" => {
                        section = name.to_string();
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key '{key}' before any [section]",
                    lineno + 1
                )));
            }
            cfg.apply(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        match (section, key) {
            ("arch", "preset") => self.arch_preset = ArchPreset::parse(v)?,
            ("arch", "stem_stride") => self.stem_stride = parse_num(section, key, v)?,
            ("neuron", "lambda") => self.lambda = parse_num(section, key, v)?,
            ("neuron", "v_th") => self.v_th = parse_num(section, key, v)?,
            ("neuron", "surrogate") => {
                self.surrogate = match v {
                    "rectangular" => SurrogateKind::Rectangular,
                    "sigmoid" => SurrogateKind::Sigmoid,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown neuron.surrogate '{other}' (rectangular | sigmoid)"
                        )))
                    }
                }
            }
            ("neuron", "width") => self.surrogate_width = parse_num(section, key, v)?,
            ("neuron", "steepness") => self.surrogate_steepness = parse_num(section, key, v)?,
            ("train", "epochs") => self.epochs = parse_num(section, key, v)?,
            ("train", "batch_size") => self.batch_size = parse_num(section, key, v)?,
            ("train", "lr") => self.lr = parse_num(section, key, v)?,
            ("train", "momentum") => self.momentum = parse_num(section, key, v)?,
            ("train", "weight_decay") => self.weight_decay = parse_num(section, key, v)?,
            ("train", "timesteps") => self.timesteps = parse_num(section, key, v)?,
            ("train", "mode") => self.mode = v.parse()?,
            ("train", "lr_schedule") => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    other => match other.strip_prefix("step:") {
                        Some(m) => LrSchedule::Step {
                            milestone: parse_num(section, key, m)?,
                        },
                        None => {
                            return Err(Error::Config(format!(
                                "unknown train.lr_schedule '{other}' (constant | cosine | step:N)"
                            )))
                        }
                    },
                }
            }
            ("distill", "alpha") => self.alpha = parse_num(section, key, v)?,
            ("distill", "alpha_schedule") => self.alpha_schedule = AlphaSchedule::parse(v)?,
            ("distill", "beta") => self.beta = BetaScheme::parse(v)?,
            ("distill", "taps") => {
                self.taps = if v == "interior" {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|t| parse_num(section, key, t.trim()))
                        .collect::<Result<_>>()?
                }
            }
            ("distill", "teacher") => self.teacher = v.to_string(),
            ("data", "dataset") => self.dataset = DatasetKind::parse(v)?,
            ("data", "dir") => self.data_dir = v.to_string(),
            ("data", "encoding") => self.encoding = Encoding::parse(v)?,
            ("data", "augment") => {
                self.augment = match v {
                    "none" => AugmentPolicy::None,
                    "crop-flip" => AugmentPolicy::CropFlip,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown data.augment '{other}' (none | crop-flip)"
                        )))
                    }
                }
            }
            ("data", "train_limit") => self.train_limit = parse_num(section, key, v)?,
            ("data", "eval_limit") => self.eval_limit = parse_num(section, key, v)?,
            ("output", "dir") => self.out_dir = v.to_string(),
            ("output", "seed") => self.seed = parse_num(section, key, v)?,
            (s, k) => {
                return Err(Error::Config(format!("unknown key {s}.{k}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("train.timesteps must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "distill.alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.stem_stride == 0 || self.stem_stride > 2 {
            return Err(Error::Config(format!(
                "arch.stem_stride {} outside 1..=2",
                self.stem_stride
            )));
        }
        Ok(())
    }

    /// Instantiate the architecture for this run's dataset.
    pub fn arch(&self) -> ArchSpec {
        let (c, hw, classes) = self.dataset.image_profile();
        let mut spec = match self.arch_preset {
            ArchPreset::ResnetMini => ArchSpec::resnet_mini(c, hw, classes, self.stem_stride),
            ArchPreset::Convnet3 => ArchSpec::convnet3(c, hw, classes),
            ArchPreset::Resnet18 => ArchSpec::resnet18(c, hw, classes),
        };
        if let ArchPreset::Convnet3 | ArchPreset::Resnet18 = self.arch_preset {
            spec.stem_stride = self.stem_stride;
        }
        spec
    }

    /// Neuron configuration at the requested precision.
    pub fn lif<F: Scalar>(&self) -> Result<LifConfig<F>> {
        let surrogate = match self.surrogate {
            SurrogateKind::Rectangular => Surrogate::Rectangular {
                width: self.surrogate_width,
            },
            SurrogateKind::Sigmoid => Surrogate::SigmoidDerivative {
                steepness: self.surrogate_steepness,
            },
        };
        LifConfig::new(F::from_f64(self.lambda), F::from_f64(self.v_th), surrogate)
    }

    /// Connector tap indices: the configured list, or every interior tap.
    pub fn tap_list(&self, arch: &ArchSpec) -> Vec<usize> {
        if self.taps.is_empty() {
            arch.interior_taps()
        } else {
            self.taps.clone()
        }
    }

    /// Canonical text rendering: every resolved field, one sorted
    /// `section.key = value` line each.
    pub fn canonical(&self) -> String {
        let sched = match self.lr_schedule {
            LrSchedule::Constant => "constant".to_string(),
            LrSchedule::Cosine => "cosine".to_string(),
            LrSchedule::Step { milestone } => format!("step:{milestone}"),
        };
        let taps = if self.taps.is_empty() {
            "interior".to_string()
        } else {
            self.taps
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let surrogate = match self.surrogate {
            SurrogateKind::Rectangular => "rectangular",
            SurrogateKind::Sigmoid => "sigmoid",
        };
        let augment = match self.augment {
            AugmentPolicy::None => "none",
            AugmentPolicy::CropFlip => "crop-flip",
        };
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        fields.insert("arch.preset", self.arch_preset.canon().into());
        fields.insert("arch.stem_stride", self.stem_stride.to_string());
        fields.insert("neuron.lambda", format!("{:?}", self.lambda));
        fields.insert("neuron.v_th", format!("{:?}", self.v_th));
        fields.insert("neuron.surrogate", surrogate.into());
        fields.insert("neuron.width", format!("{:?}", self.surrogate_width));
        fields.insert("neuron.steepness", format!("{:?}", self.surrogate_steepness));
        fields.insert("train.epochs", self.epochs.to_string());
        fields.insert("train.batch_size", self.batch_size.to_string());
        fields.insert("train.lr", format!("{:?}", self.lr));
        fields.insert("train.momentum", format!("{:?}", self.momentum));
        fields.insert("train.weight_decay", format!("{:?}", self.weight_decay));
        fields.insert("train.timesteps", self.timesteps.to_string());
        fields.insert("train.mode", self.mode.as_str().into());
        fields.insert("train.lr_schedule", sched);
        fields.insert("distill.alpha", format!("{:?}", self.alpha));
        fields.insert("distill.alpha_schedule", self.alpha_schedule.canon().into());
        fields.insert("distill.beta", self.beta.canon().into());
        fields.insert("distill.taps", taps);
        fields.insert("distill.teacher", self.teacher.clone());
        fields.insert("data.dataset", self.dataset.canon().into());
        fields.insert("data.dir", self.data_dir.clone());
        fields.insert("data.encoding", self.encoding.canon().into());
        fields.insert("data.augment", augment.into());
        fields.insert("data.train_limit", self.train_limit.to_string());
        fields.insert("data.eval_limit", self.eval_limit.to_string());
        fields.insert("output.dir", self.out_dir.clone());
        fields.insert("output.seed", self.seed.to_string());
        let mut out = String::new();
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical rendering.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.finalize().into()
    }
}

/// Layered seed: an explicit flag beats the environment variable, which
/// beats the config file.
pub fn resolve_seed(config_seed: u64, env_value: Option<&str>, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = env_value {
        return v.trim().parse().map_err(|_| {
            Error::Config(format!("{SEED_ENV} = '{v}' is not an unsigned integer"))
        });
    }
    Ok(config_seed)
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
