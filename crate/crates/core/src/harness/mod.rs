//! Experiment orchestration: builds trials from an [`ExperimentConfig`], runs
//! them in parallel, and writes CSV metrics.
//!
//! `history.csv` has one row per completed round with the columns in
//! [`HISTORY_COLUMNS`]; `summary.csv` has one row per trial with
//! [`SUMMARY_COLUMNS`]; `sweep.csv` has one row per swept value with
//! [`SWEEP_COLUMNS`]. Absent values (no accuracy for regression, no objective
//! for policies that do not evaluate it) are empty fields.

mod config;
mod seed;

pub use config::{ConfigError, DataSpec, ExperimentConfig, ModelSize, KEYS};
pub use seed::{seed_streams, Component};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::datagen::{self, DataError, Dataset};
use crate::fltrain::{
    self, Environment, InitialEstimates, Model, TrainError, TrainingConfig, TrainingHistory, TrainingStreams,
};
use crate::scheduler::PolicySpec;
use crate::wireless::{dbm_per_mhz_to_w_per_hz, dbm_to_watts, CellConfig, DeviceProfile, RadioConfig};

/// Environment variable capping the number of trials run at once.
pub const THREADS_ENV: &str = "FEDSCHED_THREADS";

pub const HISTORY_COLUMNS: [&str; 14] = [
    "trial",
    "round",
    "policy",
    "n_scheduled",
    "t_star_s",
    "cumulative_s",
    "K_hat",
    "C_value",
    "global_loss",
    "true_global_loss",
    "test_accuracy",
    "rho_hat",
    "beta_hat",
    "delta_hat",
];

pub const SUMMARY_COLUMNS: [&str; 8] =
    ["trial", "policy", "rounds", "best_accuracy", "best_loss", "mean_n_scheduled", "mean_t_star_s", "elapsed_s"];

pub const SWEEP_COLUMNS: [&str; 8] = [
    "key",
    "value",
    "trials",
    "mean_best_accuracy",
    "std_best_accuracy",
    "mean_n_scheduled",
    "mean_rounds",
    "mean_best_loss",
];

/// Keys accepted by [`sweep`].
pub const SWEEP_KEYS: [&str; 5] = ["phi", "R_m", "policy", "error_rel_std", "fixed_n"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trial {trial}: {source}")]
    Data {
        trial: usize,
        #[source]
        source: DataError,
    },
    #[error("trial {trial}: {source}")]
    Train {
        trial: usize,
        #[source]
        source: TrainError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// One finished trial.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub policy: PolicySpec,
    pub history: TrainingHistory,
}

impl TrialOutcome {
    pub fn rounds(&self) -> usize {
        self.history.records.len()
    }

    pub fn mean_n_scheduled(&self) -> f64 {
        mean(self.history.records.iter().map(|r| r.scheduled.len() as f64))
    }

    pub fn mean_t_star_s(&self) -> f64 {
        mean(self.history.records.iter().map(|r| r.t_star_s))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Sample mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values.iter().copied());
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (m, var.sqrt())
}

/// Everything a trial needs besides its random streams.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub model: Model,
    pub locals: Vec<Dataset>,
    pub test: Option<Dataset>,
    pub profiles: Vec<DeviceProfile>,
    pub radio: RadioConfig,
    pub cell: CellConfig,
}

fn load_data(cfg: &ExperimentConfig, rng: &mut ChaCha12Rng) -> Result<(Dataset, Option<Dataset>), DataError> {
    let split = |all: Dataset| {
        if cfg.test_size == 0 {
            (all, None)
        } else {
            let (train, test) = all.split_tail(cfg.test_size);
            (train, Some(test))
        }
    };
    match &cfg.data {
        DataSpec::Synthetic { n, dims, classes, mean_std } => {
            // One draw so train and test share class means.
            let all = datagen::synth_classification_scaled(rng, n + cfg.test_size, *dims, *classes, *mean_std)?;
            Ok(split(all))
        }
        DataSpec::Regression { n, dims, noise_std } => {
            let scale = 1.0 / (*dims as f64).sqrt();
            let w_true: Vec<f64> = (0..*dims)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect();
            let all = datagen::synth_regression(rng, n + cfg.test_size, &w_true, *noise_std)?;
            Ok(split(all))
        }
        DataSpec::Idx { images, labels } => {
            let all = datagen::load_idx_dataset(images, labels)?;
            if cfg.test_size >= all.len() {
                return Err(DataError::Config(format!(
                    "test_size {} leaves no training rows out of {}",
                    cfg.test_size,
                    all.len()
                )));
            }
            Ok(split(all))
        }
    }
}

/// Builds data, devices, and radio parameters of one trial.
pub fn build_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialSetup, HarnessError> {
    let mut data_rng = seed_streams(cfg.master_seed, trial as u64, Component::Data);
    let data_err = |source| HarnessError::Data { trial, source };
    let (train, test) = load_data(cfg, &mut data_rng).map_err(data_err)?;
    let parts = datagen::partition(&train, cfg.devices, cfg.partition, &mut data_rng).map_err(data_err)?;
    let locals = parts.datasets(&train);

    let classes = train.num_classes().unwrap_or(1);
    let model = Model::new(cfg.model, train.dims, classes).map_err(|source| HarnessError::Train { trial, source })?;
    let model_size_bits = match cfg.model_size {
        ModelSize::Auto => 32.0 * model.parameter_count() as f64,
        ModelSize::Bits(b) => b,
    };
    let radio = RadioConfig {
        bandwidth_hz: cfg.bandwidth_hz,
        noise_density_w_per_hz: dbm_per_mhz_to_w_per_hz(cfg.n0_dbm_per_mhz),
        model_size_bits,
        path_loss_exponent: cfg.alpha,
    };
    let rate_param = cfg.mu.unwrap_or(1.0 / cfg.a_ms_per_sample);
    let profiles = locals
        .iter()
        .enumerate()
        .map(|(id, d)| DeviceProfile {
            id,
            dataset_size: d.len(),
            batch_size: cfg.batch_size.min(d.len()),
            shift_ms_per_sample: cfg.a_ms_per_sample,
            rate_param,
            tx_power_w: dbm_to_watts(cfg.p_dbm),
        })
        .collect();
    let cell = CellConfig {
        radius_m: cfg.radius_m,
        min_dist_m: cfg.min_dist_m,
        fading: cfg.fading,
        error_rel_std: cfg.error_rel_std,
    };
    Ok(TrialSetup { model, locals, test, profiles, radio, cell })
}

pub fn training_config(cfg: &ExperimentConfig) -> TrainingConfig {
    TrainingConfig {
        eta: cfg.eta,
        tau: cfg.tau,
        phi: cfg.phi,
        epsilon_alloc: cfg.epsilon_alloc,
        budget_s: cfg.budget_s,
        max_rounds: cfg.max_rounds,
        k_hat_budget: cfg.k_hat_budget,
        initial: InitialEstimates::default(),
    }
}

/// Runs trial number `trial` (zero-based) to completion.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialOutcome, HarnessError> {
    let setup = build_trial(cfg, trial)?;
    let stream = |c| seed_streams(cfg.master_seed, trial as u64, c);
    let w0 = setup.model.init(&mut stream(Component::Init));
    let mut streams = TrainingStreams {
        placement: stream(Component::Placement),
        channel: stream(Component::Channel),
        compute: stream(Component::Compute),
        estimation: stream(Component::Estimation),
        policy: stream(Component::Policy),
        sgd: stream(Component::Sgd),
    };
    let env = Environment {
        model: &setup.model,
        locals: &setup.locals,
        test: setup.test.as_ref(),
        profiles: &setup.profiles,
        radio: &setup.radio,
        cell: &setup.cell,
    };
    let history = fltrain::run_training(&env, &training_config(cfg), cfg.policy, w0, &mut streams)
        .map_err(|source| HarnessError::Train { trial, source })?;
    Ok(TrialOutcome { trial, policy: cfg.policy, history })
}

fn thread_pool() -> Result<rayon::ThreadPool, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| HarnessError::Pool(e.to_string()))
}

/// Runs every trial of `cfg`, returning outcomes in trial order.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<TrialOutcome>, HarnessError> {
    cfg.validate()?;
    let pool = thread_pool()?;
    pool.install(|| (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn finite(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn history_csv(outcomes: &[TrialOutcome]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_COLUMNS)?;
    for o in outcomes {
        let policy = o.policy.to_string();
        for r in &o.history.records {
            w.write_record([
                o.trial.to_string(),
                r.round.to_string(),
                policy.clone(),
                r.scheduled.len().to_string(),
                r.t_star_s.to_string(),
                r.cumulative_s.to_string(),
                r.k_hat.to_string(),
                opt(r.c_value),
                r.global_loss.to_string(),
                r.true_global_loss.to_string(),
                opt(r.test_accuracy),
                r.rho_hat.to_string(),
                r.beta_hat.to_string(),
                r.delta_hat.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))
}

pub fn summary_csv(outcomes: &[TrialOutcome]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS)?;
    for o in outcomes {
        w.write_record([
            o.trial.to_string(),
            o.policy.to_string(),
            o.rounds().to_string(),
            opt(o.history.best_accuracy()),
            finite(o.history.best_loss),
            finite(o.mean_n_scheduled()),
            finite(o.mean_t_star_s()),
            o.history.elapsed_s.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))
}

/// Writes each `(name, bytes)` pair under `dir` through a temporary file and
/// a rename, so readers never see a half-written file.
pub fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), HarnessError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut staged = Vec::new();
    for (name, bytes) in files {
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, bytes) {
            for (t, _) in &staged {
                let _ = fs::remove_file(t);
            }
            return Err(io_err(&tmp)(e));
        }
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, dest) in &staged {
        fs::rename(tmp, dest).map_err(io_err(dest))?;
    }
    Ok(())
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    Ok(ExperimentConfig::parse(&text)?)
}

/// Runs all trials and writes `history.csv` and `summary.csv` into `out_dir`.
/// Nothing is written if any trial fails.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<TrialOutcome>, HarnessError> {
    let outcomes = run_trials(cfg)?;
    write_outputs(out_dir, &[("history.csv", history_csv(&outcomes)?), ("summary.csv", summary_csv(&outcomes)?)])?;
    Ok(outcomes)
}

/// Aggregate of one swept value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub trials: usize,
    pub mean_best_accuracy: Option<f64>,
    pub std_best_accuracy: Option<f64>,
    pub mean_n_scheduled: f64,
    pub mean_rounds: f64,
    pub mean_best_loss: f64,
}

impl SweepPoint {
    pub fn from_outcomes(value: String, outcomes: &[TrialOutcome]) -> Self {
        let acc: Option<Vec<f64>> = outcomes.iter().map(|o| o.history.best_accuracy()).collect();
        let (mean_acc, std_acc) = match acc {
            Some(a) if !a.is_empty() => {
                let (m, s) = mean_std(&a);
                (Some(m), Some(s))
            }
            _ => (None, None),
        };
        SweepPoint {
            value,
            trials: outcomes.len(),
            mean_best_accuracy: mean_acc,
            std_best_accuracy: std_acc,
            mean_n_scheduled: mean(outcomes.iter().map(TrialOutcome::mean_n_scheduled)),
            mean_rounds: mean(outcomes.iter().map(|o| o.rounds() as f64)),
            mean_best_loss: mean(outcomes.iter().map(|o| o.history.best_loss)),
        }
    }
}

/// `cfg` with `key` set to `value`. `fixed_n` selects the `FixedN(n)` policy.
pub fn with_sweep_value(cfg: &ExperimentConfig, key: &str, value: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut out = cfg.clone();
    match key {
        "phi" | "R_m" | "policy" | "error_rel_std" => out.set(key, value)?,
        "fixed_n" => {
            let n: usize = value.trim().parse().map_err(|e: std::num::ParseIntError| ConfigError::Value {
                key: key.into(),
                value: value.into(),
                reason: e.to_string(),
            })?;
            out.policy = PolicySpec::FixedN(n);
        }
        _ => {
            return Err(ConfigError::Value {
                key: "sweep key".into(),
                value: key.into(),
                reason: format!("expected one of {}", SWEEP_KEYS.join(", ")),
            }
            .into())
        }
    }
    out.validate()?;
    Ok(out)
}

pub fn sweep_csv(key: &str, points: &[SweepPoint]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS)?;
    for p in points {
        w.write_record([
            key.to_string(),
            p.value.clone(),
            p.trials.to_string(),
            opt(p.mean_best_accuracy),
            opt(p.std_best_accuracy),
            finite(p.mean_n_scheduled),
            p.mean_rounds.to_string(),
            finite(p.mean_best_loss),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))
}

/// Runs every value of `key` over `cfg.trials` seeds and writes `sweep.csv`.
/// All values are validated before any training starts.
pub fn sweep(
    cfg: &ExperimentConfig,
    key: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<SweepPoint>, HarnessError> {
    let configs: Vec<ExperimentConfig> =
        values.iter().map(|v| with_sweep_value(cfg, key, v)).collect::<Result<_, _>>()?;
    let mut points = Vec::with_capacity(values.len());
    for (value, c) in values.iter().zip(&configs) {
        points.push(SweepPoint::from_outcomes(value.trim().to_string(), &run_trials(c)?));
    }
    write_outputs(out_dir, &[("sweep.csv", sweep_csv(key, &points)?)])?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig { devices: 4, ..Default::default() };
        cfg.data = DataSpec::Synthetic { n: 200, dims: 5, classes: 4, mean_std: 1.0 };
        cfg.test_size = 40;
        cfg.partition = datagen::PartitionSpec::Iid;
        cfg.model = fltrain::ModelKind::LogisticRegression;
        cfg.budget_s = 2.0;
        cfg.trials = 2;
        cfg
    }

    #[test]
    fn builds_devices_from_config() {
        let cfg = small();
        let s = build_trial(&cfg, 0).unwrap();
        assert_eq!(s.locals.len(), 4);
        assert!(s.locals.iter().all(|d| d.len() == 50));
        assert_eq!(s.test.as_ref().unwrap().len(), 40);
        assert_eq!(s.radio.model_size_bits, 32.0 * (4 * 5 + 4) as f64);
        let p = &s.profiles[3];
        assert_eq!((p.id, p.dataset_size, p.rate_param), (3, 50, 2.0));
        assert!((p.tx_power_w - 0.01).abs() < 1e-15);
    }

    #[test]
    fn runs_trials_in_order_within_budget() {
        let cfg = small();
        let outcomes = run_trials(&cfg).unwrap();
        assert_eq!(outcomes.iter().map(|o| o.trial).collect::<Vec<_>>(), vec![0, 1]);
        for o in &outcomes {
            assert!(o.rounds() > 0);
            assert!(o.history.elapsed_s <= cfg.budget_s);
            let cum: Vec<f64> = o.history.records.iter().map(|r| r.cumulative_s).collect();
            assert!(cum.windows(2).all(|w| w[0] < w[1]));
        }
        assert_ne!(outcomes[0].history.final_model, outcomes[1].history.final_model);
    }

    #[test]
    fn history_has_one_row_per_round() {
        let cfg = small();
        let outcomes = run_trials(&cfg).unwrap();
        let text = String::from_utf8(history_csv(&outcomes).unwrap()).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], HISTORY_COLUMNS.join(","));
        assert_eq!(rows.len() - 1, outcomes.iter().map(TrialOutcome::rounds).sum::<usize>());
        let summary = String::from_utf8(summary_csv(&outcomes).unwrap()).unwrap();
        assert_eq!(summary.lines().count(), 3);
    }

    #[test]
    fn sweep_values_are_checked_up_front() {
        let cfg = small();
        assert!(with_sweep_value(&cfg, "fixed_n", "5").is_err());
        assert!(with_sweep_value(&cfg, "phi", "-1").is_err());
        assert!(with_sweep_value(&cfg, "tau", "2").is_err());
        let c = with_sweep_value(&cfg, "fixed_n", "3").unwrap();
        assert_eq!(c.policy, PolicySpec::FixedN(3));
        let c = with_sweep_value(&cfg, "R_m", "300").unwrap();
        assert_eq!(c.radius_m, 300.0);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn failed_writes_leave_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("out");
        fs::write(&blocker, b"file, not a directory").unwrap();
        assert!(write_outputs(&blocker, &[("a.csv", b"x".to_vec())]).is_err());
        write_outputs(dir.path(), &[("a.csv", b"1".to_vec()), ("b.csv", b"2".to_vec())]).unwrap();
        let mut names: Vec<String> =
            fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["a.csv", "b.csv", "out"]);
    }
}
