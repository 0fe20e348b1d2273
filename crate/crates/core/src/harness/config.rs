//! Flat `key = value` experiment configuration.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::datagen::PartitionSpec;
use crate::fltrain::{KHatBudget, ModelKind};
use crate::scheduler::PolicySpec;
use crate::wireless::Fading;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("key `{key}` given twice")]
    Duplicate { key: String },
    #[error("key `{key}`: cannot use {value:?} ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("key `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// Gaussian class clusters: `synthetic(n, dims, classes[, mean_std])`.
    Synthetic { n: usize, dims: usize, classes: usize, mean_std: f64 },
    /// Noisy linear targets: `regression(n, dims, noise_std)`.
    Regression { n: usize, dims: usize, noise_std: f64 },
    /// IDX image and label files: `idx(images, labels)`.
    Idx { images: PathBuf, labels: PathBuf },
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Synthetic { n, dims, classes, mean_std } => {
                write!(f, "synthetic({n}, {dims}, {classes}, {mean_std})")
            }
            DataSpec::Regression { n, dims, noise_std } => write!(f, "regression({n}, {dims}, {noise_std})"),
            DataSpec::Idx { images, labels } => write!(f, "idx({}, {})", images.display(), labels.display()),
        }
    }
}

impl FromStr for DataSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (name, rest) = s.split_once('(').ok_or("expected name(args)")?;
        let args: Vec<&str> =
            rest.strip_suffix(')').ok_or("missing closing parenthesis")?.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<usize, String> {
            args.get(i).ok_or("too few arguments")?.parse().map_err(|e| format!("{e}"))
        };
        let real = |i: usize| -> Result<f64, String> {
            args.get(i).ok_or("too few arguments")?.parse().map_err(|e| format!("{e}"))
        };
        match (name.trim().to_ascii_lowercase().as_str(), args.len()) {
            ("synthetic", 3) => Ok(DataSpec::Synthetic { n: num(0)?, dims: num(1)?, classes: num(2)?, mean_std: 1.0 }),
            ("synthetic", 4) => {
                Ok(DataSpec::Synthetic { n: num(0)?, dims: num(1)?, classes: num(2)?, mean_std: real(3)? })
            }
            ("regression", 3) => Ok(DataSpec::Regression { n: num(0)?, dims: num(1)?, noise_std: real(2)? }),
            ("idx", 2) => Ok(DataSpec::Idx { images: args[0].into(), labels: args[1].into() }),
            _ => Err("expected synthetic(n, dims, classes[, mean_std]), regression(n, dims, noise_std) or idx(images, labels)".into()),
        }
    }
}

/// Size of one model upload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSize {
    /// 32 bits per model parameter.
    Auto,
    Bits(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub devices: usize,
    pub radius_m: f64,
    pub bandwidth_hz: f64,
    pub n0_dbm_per_mhz: f64,
    pub p_dbm: f64,
    pub alpha: f64,
    pub model_size: ModelSize,
    pub budget_s: f64,
    pub tau: u32,
    pub eta: f64,
    pub batch_size: usize,
    pub phi: f64,
    pub epsilon_alloc: f64,
    pub a_ms_per_sample: f64,
    /// Samples per millisecond; `None` means `1/a`.
    pub mu: Option<f64>,
    pub model: ModelKind,
    pub data: DataSpec,
    /// Rows held out for reporting accuracy.
    pub test_size: usize,
    pub partition: PartitionSpec,
    pub policy: PolicySpec,
    pub error_rel_std: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub max_rounds: Option<usize>,
    pub k_hat_budget: KHatBudget,
    pub fading: Fading,
    pub min_dist_m: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            devices: 20,
            radius_m: 600.0,
            bandwidth_hz: 20e6,
            n0_dbm_per_mhz: -114.0,
            p_dbm: 10.0,
            alpha: 3.76,
            model_size: ModelSize::Auto,
            budget_s: 60.0,
            tau: 5,
            eta: 0.01,
            batch_size: 128,
            phi: 0.05,
            epsilon_alloc: 1e-4,
            a_ms_per_sample: 0.5,
            mu: None,
            model: ModelKind::Mlp { hidden: 64 },
            data: DataSpec::Synthetic { n: 2000, dims: 20, classes: 10, mean_std: 1.0 },
            test_size: 1000,
            partition: PartitionSpec::Shards(2),
            policy: PolicySpec::Fc,
            error_rel_std: 0.0,
            trials: 5,
            master_seed: 1,
            max_rounds: None,
            k_hat_budget: KHatBudget::Full,
            fading: Fading::None,
            min_dist_m: 1.0,
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "M",
    "R_m",
    "B_hz",
    "N0_dbm_per_mhz",
    "P_dbm",
    "alpha",
    "S_bits",
    "T_s",
    "tau",
    "eta",
    "batch_size",
    "phi",
    "epsilon_alloc",
    "a_ms_per_sample",
    "mu",
    "model",
    "data",
    "test_size",
    "partition",
    "policy",
    "error_rel_std",
    "trials",
    "master_seed",
    "max_rounds",
    "k_hat_budget",
    "fading",
    "min_dist_m",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl ExperimentConfig {
    /// Parses a whole file, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: n + 1, text: raw.to_string() })?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate { key: key.into() });
            }
            cfg.set(key, value.trim())?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value. Call [`Self::validate`] afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::Value { key: key.into(), value: value.into(), reason: reason.into() };
        match key {
            "M" => self.devices = parse_value(key, value)?,
            "R_m" => self.radius_m = parse_value(key, value)?,
            "B_hz" => self.bandwidth_hz = parse_value(key, value)?,
            "N0_dbm_per_mhz" => self.n0_dbm_per_mhz = parse_value(key, value)?,
            "P_dbm" => self.p_dbm = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "S_bits" => {
                self.model_size = if value.eq_ignore_ascii_case("auto") {
                    ModelSize::Auto
                } else {
                    ModelSize::Bits(parse_value(key, value)?)
                }
            }
            "T_s" => self.budget_s = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "phi" => self.phi = parse_value(key, value)?,
            "epsilon_alloc" => self.epsilon_alloc = parse_value(key, value)?,
            "a_ms_per_sample" => self.a_ms_per_sample = parse_value(key, value)?,
            "mu" => self.mu = if value.eq_ignore_ascii_case("auto") { None } else { Some(parse_value(key, value)?) },
            "model" => self.model = parse_value(key, value)?,
            "data" => self.data = parse_value(key, value)?,
            "test_size" => self.test_size = parse_value(key, value)?,
            "partition" => self.partition = parse_value(key, value)?,
            "policy" => self.policy = parse_value(key, value)?,
            "error_rel_std" => self.error_rel_std = parse_value(key, value)?,
            "trials" => self.trials = parse_value(key, value)?,
            "master_seed" => self.master_seed = parse_value(key, value)?,
            "max_rounds" => {
                self.max_rounds = if value.eq_ignore_ascii_case("none") { None } else { Some(parse_value(key, value)?) }
            }
            "k_hat_budget" => {
                self.k_hat_budget = match value.to_ascii_lowercase().as_str() {
                    "full" => KHatBudget::Full,
                    "remaining" => KHatBudget::Remaining,
                    _ => return Err(bad("expected full or remaining")),
                }
            }
            "fading" => {
                self.fading = match value.to_ascii_lowercase().as_str() {
                    "none" => Fading::None,
                    "rayleigh" => Fading::Rayleigh,
                    _ => return Err(bad("expected none or rayleigh")),
                }
            }
            "min_dist_m" => self.min_dist_m = parse_value(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &'static str, reason: String| Err(ConfigError::Invalid { key, reason });
        let positive = [
            ("R_m", self.radius_m),
            ("B_hz", self.bandwidth_hz),
            ("T_s", self.budget_s),
            ("phi", self.phi),
            ("a_ms_per_sample", self.a_ms_per_sample),
            ("min_dist_m", self.min_dist_m),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || v.is_nan() {
                return invalid(key, format!("must be positive, got {v}"));
            }
            if v.is_infinite() && key != "T_s" {
                return invalid(key, "must be finite".into());
            }
        }
        for (key, v) in [("N0_dbm_per_mhz", self.n0_dbm_per_mhz), ("P_dbm", self.p_dbm)] {
            if !v.is_finite() {
                return invalid(key, format!("must be finite, got {v}"));
            }
        }
        if !(self.alpha > 2.0 && self.alpha.is_finite()) {
            return invalid("alpha", format!("must exceed 2, got {}", self.alpha));
        }
        if self.radius_m <= self.min_dist_m {
            return invalid("R_m", format!("must exceed min_dist_m = {}", self.min_dist_m));
        }
        if self.devices == 0 {
            return invalid("M", "must be at least 1".into());
        }
        if let ModelSize::Bits(b) = self.model_size {
            if !(b > 0.0 && b.is_finite()) {
                return invalid("S_bits", format!("must be positive, got {b}"));
            }
        }
        if self.tau == 0 {
            return invalid("tau", "must be at least 1".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return invalid("eta", format!("must be nonnegative, got {}", self.eta));
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be at least 1".into());
        }
        if !(self.epsilon_alloc > 0.0 && self.epsilon_alloc < 1.0) {
            return invalid("epsilon_alloc", format!("must lie in (0, 1), got {}", self.epsilon_alloc));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return invalid("mu", format!("must be positive, got {mu}"));
            }
        }
        if !(self.error_rel_std >= 0.0 && self.error_rel_std.is_finite()) {
            return invalid("error_rel_std", format!("must be nonnegative, got {}", self.error_rel_std));
        }
        if self.trials == 0 {
            return invalid("trials", "must be at least 1".into());
        }
        if self.budget_s.is_infinite() && self.max_rounds.is_none() {
            return invalid("max_rounds", "required when T_s = inf".into());
        }
        if let Err(e) = self.policy.validate(self.devices) {
            return invalid("policy", e.to_string());
        }
        let classification = !matches!(self.data, DataSpec::Regression { .. });
        if classification == matches!(self.model, ModelKind::LinearRegression) {
            return invalid("model", format!("{} does not fit data {}", self.model, self.data));
        }
        if let DataSpec::Synthetic { n, dims, classes, mean_std } = self.data {
            if n == 0 || dims == 0 || classes == 0 || !(mean_std >= 0.0) {
                return invalid("data", "synthetic sizes must be positive".into());
            }
        }
        if let DataSpec::Regression { n, dims, noise_std } = self.data {
            if n == 0 || dims == 0 || !(noise_std >= 0.0) {
                return invalid("data", "regression sizes must be positive".into());
            }
        }
        Ok(())
    }

    /// The configuration in the same format [`Self::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "M" => self.devices.to_string(),
                "R_m" => self.radius_m.to_string(),
                "B_hz" => self.bandwidth_hz.to_string(),
                "N0_dbm_per_mhz" => self.n0_dbm_per_mhz.to_string(),
                "P_dbm" => self.p_dbm.to_string(),
                "alpha" => self.alpha.to_string(),
                "S_bits" => match self.model_size {
                    ModelSize::Auto => "auto".into(),
                    ModelSize::Bits(b) => b.to_string(),
                },
                "T_s" => self.budget_s.to_string(),
                "tau" => self.tau.to_string(),
                "eta" => self.eta.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "phi" => self.phi.to_string(),
                "epsilon_alloc" => self.epsilon_alloc.to_string(),
                "a_ms_per_sample" => self.a_ms_per_sample.to_string(),
                "mu" => self.mu.map_or("auto".into(), |m| m.to_string()),
                "model" => self.model.to_string(),
                "data" => self.data.to_string(),
                "test_size" => self.test_size.to_string(),
                "partition" => self.partition.to_string(),
                "policy" => self.policy.to_string(),
                "error_rel_std" => self.error_rel_std.to_string(),
                "trials" => self.trials.to_string(),
                "master_seed" => self.master_seed.to_string(),
                "max_rounds" => self.max_rounds.map_or("none".into(), |m| m.to_string()),
                "k_hat_budget" => match self.k_hat_budget {
                    KHatBudget::Full => "full".into(),
                    KHatBudget::Remaining => "remaining".into(),
                },
                "fading" => match self.fading {
                    Fading::None => "none".into(),
                    Fading::Rayleigh => "rayleigh".into(),
                },
                "min_dist_m" => self.min_dist_m.to_string(),
                _ => unreachable!("every key is listed"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}
