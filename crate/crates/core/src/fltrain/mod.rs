//! Federated training under a wall-clock budget.
//!
//! Each round the controller samples the wireless state, picks devices with a
//! [`PolicySpec`], and charges the realized round latency against the budget.
//! Scheduled devices run `τ` mini-batch SGD steps from the broadcast model and
//! the server averages the results weighted by local dataset size. Scheduled
//! devices also refresh the Lipschitz, smoothness, and gradient-divergence
//! estimates that feed the convergence objective.

mod model;

pub use model::{Model, ModelKind, DEFAULT_HIDDEN};

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::bound::{weighted_mean, BoundError, BoundParams};
use crate::datagen::Dataset;
use crate::scheduler::{realized_latency, schedule, PolicySpec, ScheduleContext, ScheduleError};
use crate::wireless::{sample_round, CellConfig, DeviceProfile, RadioConfig, RoundStreams, View};

/// Steps shorter than this leave the `ρ̂`/`β̂` estimates untouched.
pub const MIN_STEP_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("device {0} has no local data")]
    EmptyDataset(usize),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `τ` SGD steps of size `η` from `w0`, each on `batch` rows drawn without
/// replacement.
pub fn local_update<R: Rng + ?Sized>(
    w0: &[f64],
    data: &Dataset,
    model: &Model,
    eta: f64,
    tau: u32,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<f64>, TrainError> {
    let n = data.len();
    if n == 0 {
        return Err(TrainError::Config("local dataset is empty".into()));
    }
    if batch == 0 || batch > n {
        return Err(TrainError::Config(format!("batch size {batch} must lie in 1..={n}")));
    }
    let mut w = w0.to_vec();
    for _ in 0..tau {
        let grad = if batch == n {
            model.loss_grad(&w, data, None).1
        } else {
            let rows = index::sample(rng, n, batch).into_vec();
            model.loss_grad(&w, data, Some(&rows)).1
        };
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= eta * gi;
        }
    }
    Ok(w)
}

/// `Σ D_i·w_i / Σ D_i`.
pub fn aggregate(locals: &[Vec<f64>], sizes: &[usize]) -> Vec<f64> {
    assert!(!locals.is_empty() && locals.len() == sizes.len());
    let total: f64 = sizes.iter().map(|&d| d as f64).sum();
    let mut w = vec![0.0; locals[0].len()];
    for (local, &d) in locals.iter().zip(sizes) {
        let weight = d as f64 / total;
        for (wi, li) in w.iter_mut().zip(local) {
            *wi += weight * li;
        }
    }
    w
}

/// `(|F_i(a) − F_i(b)|/‖a − b‖, ‖∇F_i(a) − ∇F_i(b)‖/‖a − b‖)` on the full
/// local dataset, or `None` if the two points coincide.
pub fn estimate_rho_beta(w_prev: &[f64], w_i: &[f64], model: &Model, data: &Dataset) -> Option<(f64, f64)> {
    let step = norm(&diff(w_prev, w_i));
    if step < MIN_STEP_NORM {
        return None;
    }
    let (f_prev, g_prev) = model.loss_grad(w_prev, data, None);
    let (f_i, g_i) = model.loss_grad(w_i, data, None);
    Some(((f_prev - f_i).abs() / step, norm(&diff(&g_prev, &g_i)) / step))
}

/// Reconstructs the average local gradient from the model a device returns:
/// `(w_prev − w_i)/(τη)`.
pub fn server_grad_estimate(w_prev: &[f64], w_i: &[f64], tau: u32, eta: f64) -> Vec<f64> {
    let scale = 1.0 / (f64::from(tau) * eta);
    w_prev.iter().zip(w_i).map(|(a, b)| (a - b) * scale).collect()
}

/// Distance of each gradient estimate from their dataset-weighted mean.
pub fn update_delta(grads: &[Vec<f64>], sizes: &[usize]) -> Vec<f64> {
    let mean = aggregate(grads, sizes);
    grads.iter().map(|g| norm(&diff(g, &mean))).collect()
}

/// Latest per-device estimates of the loss regularity constants.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub rho_i: Vec<f64>,
    pub beta_i: Vec<f64>,
    pub delta_i: Vec<f64>,
    pub last_updated_round: Vec<Option<usize>>,
}

impl EstimatorState {
    pub fn new(devices: usize, init: InitialEstimates) -> Self {
        Self {
            rho_i: vec![init.rho; devices],
            beta_i: vec![init.beta; devices],
            delta_i: vec![init.delta; devices],
            last_updated_round: vec![None; devices],
        }
    }

    /// Dataset-weighted means `(ρ̂, β̂, δ̂)`.
    pub fn means(&self, sizes: &[usize]) -> (f64, f64, f64) {
        (weighted_mean(&self.rho_i, sizes), weighted_mean(&self.beta_i, sizes), weighted_mean(&self.delta_i, sizes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialEstimates {
    pub rho: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for InitialEstimates {
    fn default() -> Self {
        Self { rho: 1.5, beta: 12.0, delta: 2.0 }
    }
}

/// Which budget enters `K̂ = ⌊T/t*⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KHatBudget {
    /// The full budget `T`, every round.
    #[default]
    Full,
    /// What is left of `T` at the start of the round.
    Remaining,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub eta: f64,
    pub tau: u32,
    pub phi: f64,
    pub epsilon_alloc: f64,
    /// `T` in seconds; `f64::INFINITY` disables the stopping rule.
    pub budget_s: f64,
    /// Hard cap on completed rounds.
    pub max_rounds: Option<usize>,
    pub k_hat_budget: KHatBudget,
    pub initial: InitialEstimates,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be nonnegative, got {}", self.eta));
        }
        if self.tau == 0 {
            return bad("tau must be at least 1".into());
        }
        if !(self.phi > 0.0) {
            return bad(format!("phi must be positive, got {}", self.phi));
        }
        if !(self.epsilon_alloc > 0.0 && self.epsilon_alloc < 1.0) {
            return bad(format!("epsilon_alloc must lie in (0, 1), got {}", self.epsilon_alloc));
        }
        if !(self.budget_s > 0.0) {
            return bad(format!("budget must be positive, got {}", self.budget_s));
        }
        if self.budget_s.is_infinite() && self.max_rounds.is_none() {
            return bad("an unlimited budget needs max_rounds".into());
        }
        Ok(())
    }
}

/// Everything a run reads but does not own.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub model: &'a Model,
    pub locals: &'a [Dataset],
    /// Used for the reported accuracy; the union of local data when absent.
    pub test: Option<&'a Dataset>,
    pub profiles: &'a [DeviceProfile],
    pub radio: &'a RadioConfig,
    pub cell: &'a CellConfig,
}

/// Independent random streams of one run.
#[derive(Debug)]
pub struct TrainingStreams<R> {
    pub placement: R,
    pub channel: R,
    pub compute: R,
    pub estimation: R,
    pub policy: R,
    pub sgd: R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub scheduled: Vec<usize>,
    /// Latency the round really took.
    pub t_star_s: f64,
    /// Latency the controller planned from its observations.
    pub planned_t_star_s: f64,
    pub cumulative_s: f64,
    pub k_hat: u64,
    pub c_value: Option<f64>,
    /// Scheduled-weighted loss of the model broadcast this round.
    pub global_loss: f64,
    /// All-device training loss of the aggregated model.
    pub true_global_loss: f64,
    pub test_accuracy: Option<f64>,
    pub rho_hat: f64,
    pub beta_hat: f64,
    pub delta_hat: f64,
    pub threshold_violated: bool,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<RoundRecord>,
    pub final_model: Vec<f64>,
    /// Model with the lowest observed loss; the initial model if none was
    /// scored.
    pub best_model: Vec<f64>,
    pub best_loss: f64,
    pub elapsed_s: f64,
    /// Latency of the round that would have overrun the budget.
    pub aborted_round_s: Option<f64>,
    pub estimators: EstimatorState,
}

impl TrainingHistory {
    pub fn best_accuracy(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.test_accuracy).reduce(f64::max)
    }
}

/// All-device training loss `Σ D_i F_i(w) / Σ D_i`.
pub fn global_loss(model: &Model, w: &[f64], locals: &[Dataset]) -> f64 {
    let losses: Vec<f64> = locals.iter().map(|d| model.loss(w, d, None)).collect();
    let sizes: Vec<usize> = locals.iter().map(Dataset::len).collect();
    weighted_mean(&losses, &sizes)
}

fn union_accuracy(model: &Model, w: &[f64], locals: &[Dataset]) -> Option<f64> {
    let mut correct = 0.0;
    let mut total = 0usize;
    for d in locals {
        correct += model.accuracy(w, d)? * d.len() as f64;
        total += d.len();
    }
    Some(correct / total as f64)
}

/// Runs rounds until the budget or `max_rounds` is reached.
pub fn run_training<R: Rng>(
    env: &Environment<'_>,
    cfg: &TrainingConfig,
    policy: PolicySpec,
    w0: Vec<f64>,
    streams: &mut TrainingStreams<R>,
) -> Result<TrainingHistory, TrainError> {
    cfg.validate()?;
    let m = env.profiles.len();
    if env.locals.len() != m {
        return Err(TrainError::Config(format!("{} datasets for {m} devices", env.locals.len())));
    }
    if let Some((i, _)) = env.locals.iter().enumerate().find(|(_, d)| d.is_empty()) {
        return Err(TrainError::EmptyDataset(i));
    }
    for d in env.locals.iter().chain(env.test) {
        env.model.check_data(d)?;
    }
    if w0.len() != env.model.parameter_count() {
        return Err(TrainError::Config("initial model has the wrong length".into()));
    }
    policy.validate(m)?;
    let sizes: Vec<usize> = env.locals.iter().map(Dataset::len).collect();

    let mut estimators = EstimatorState::new(m, cfg.initial);
    let mut w = w0;
    let mut best_model = w.clone();
    let mut best_loss = f64::INFINITY;
    let mut elapsed = 0.0;
    let mut records = Vec::new();
    let mut aborted_round_s = None;

    for k in 1.. {
        if cfg.max_rounds.is_some_and(|cap| records.len() >= cap) {
            break;
        }
        let round = sample_round(
            k,
            env.profiles,
            env.radio,
            env.cell,
            cfg.tau as usize,
            RoundStreams {
                placement: &mut streams.placement,
                channel: &mut streams.channel,
                compute: &mut streams.compute,
                estimation: &mut streams.estimation,
            },
        );
        let (rho, beta, _) = estimators.means(&sizes);
        let bound = BoundParams::new(
            rho,
            beta,
            estimators.delta_i.clone(),
            cfg.eta.max(f64::MIN_POSITIVE),
            cfg.tau,
            cfg.phi,
            sizes.clone(),
        )?;
        let links = round.links(&(0..m).collect::<Vec<_>>(), env.profiles, View::Observed);
        let k_budget = match cfg.k_hat_budget {
            KHatBudget::Full => cfg.budget_s,
            KHatBudget::Remaining => cfg.budget_s - elapsed,
        };
        let ctx = ScheduleContext { links: &links, radio: env.radio, epsilon: cfg.epsilon_alloc, budget_s: k_budget };
        let decision = schedule(&ctx, policy, Some(&bound), &mut streams.policy)?;
        let t_round = realized_latency(&decision, &round, env.profiles, env.radio);
        if elapsed + t_round > cfg.budget_s {
            aborted_round_s = Some(t_round);
            break;
        }
        elapsed += t_round;

        let mut scheduled = decision.scheduled.clone();
        scheduled.sort_unstable();
        let mut locals = Vec::with_capacity(scheduled.len());
        let mut uploaded_losses = Vec::with_capacity(scheduled.len());
        let mut grads = Vec::with_capacity(scheduled.len());
        for &i in &scheduled {
            let data = &env.locals[i];
            let batch = env.profiles[i].batch_size.min(data.len());
            let w_i = local_update(&w, data, env.model, cfg.eta, cfg.tau, batch, &mut streams.sgd)?;
            if let Some((r, b)) = estimate_rho_beta(&w, &w_i, env.model, data) {
                estimators.rho_i[i] = r;
                estimators.beta_i[i] = b;
            }
            uploaded_losses.push(env.model.loss(&w, data, None));
            if cfg.eta > 0.0 {
                grads.push(server_grad_estimate(&w, &w_i, cfg.tau, cfg.eta));
            }
            locals.push(w_i);
        }
        let local_sizes: Vec<usize> = scheduled.iter().map(|&i| sizes[i]).collect();
        let w_next = aggregate(&locals, &local_sizes);
        if !grads.is_empty() {
            for (&i, d) in scheduled.iter().zip(update_delta(&grads, &local_sizes)) {
                estimators.delta_i[i] = d;
            }
        }
        for &i in &scheduled {
            estimators.last_updated_round[i] = Some(k);
        }

        // the loss reported by the devices belongs to the broadcast model
        let observed_loss = weighted_mean(&uploaded_losses, &local_sizes);
        if observed_loss < best_loss {
            best_loss = observed_loss;
            best_model.clone_from(&w);
        }
        w = w_next;

        let (rho_hat, beta_hat, delta_hat) = estimators.means(&sizes);
        let test_accuracy = match env.test {
            Some(t) => env.model.accuracy(&w, t),
            None => union_accuracy(env.model, &w, env.locals),
        };
        records.push(RoundRecord {
            round: k,
            scheduled: decision.scheduled.clone(),
            t_star_s: t_round,
            planned_t_star_s: decision.allocation.t_star_s,
            cumulative_s: elapsed,
            k_hat: decision.k_hat,
            c_value: decision.c_value,
            global_loss: observed_loss,
            true_global_loss: global_loss(env.model, &w, env.locals),
            test_accuracy,
            rho_hat,
            beta_hat,
            delta_hat,
            threshold_violated: decision.threshold_violated,
            budget_exhausted: decision.budget_exhausted,
        });
    }

    Ok(TrainingHistory {
        records,
        final_model: w,
        best_model,
        best_loss,
        elapsed_s: elapsed,
        aborted_round_s,
        estimators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_classification, synth_regression, Targets};
    use crate::wireless::dbm_per_mhz_to_w_per_hz;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn linear() -> Model {
        Model::new(ModelKind::LinearRegression, 3, 1).unwrap()
    }

    fn regression(n: usize, seed: u64) -> Dataset {
        synth_regression(&mut rng(seed), n, &[0.5, -1.0, 0.25], 0.1).unwrap()
    }

    #[test]
    fn zero_step_size_keeps_model() {
        let d = regression(20, 1);
        let w0 = vec![0.3, 0.1, -0.2];
        assert_eq!(local_update(&w0, &d, &linear(), 0.0, 5, 4, &mut rng(0)).unwrap(), w0);
    }

    #[test]
    fn one_full_batch_step_is_gradient_descent() {
        let d = regression(20, 1);
        let w0 = vec![0.3, 0.1, -0.2];
        let (_, g) = linear().loss_grad(&w0, &d, None);
        let w1 = local_update(&w0, &d, &linear(), 0.1, 1, 20, &mut rng(0)).unwrap();
        for i in 0..3 {
            assert_eq!(w1[i], w0[i] - 0.1 * g[i]);
        }
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let d = regression(50, 2);
        let model = linear();
        let mut w = vec![2.0, 2.0, 2.0];
        let mut last = model.loss(&w, &d, None);
        for _ in 0..5 {
            w = local_update(&w, &d, &model, 0.05, 1, 50, &mut rng(0)).unwrap();
            let now = model.loss(&w, &d, None);
            assert!(now <= last);
            last = now;
        }
    }

    #[test]
    fn local_update_errors() {
        let d = regression(5, 1);
        let empty = d.subset(&[]);
        assert!(local_update(&[0.0; 3], &empty, &linear(), 0.1, 1, 1, &mut rng(0)).is_err());
        assert!(local_update(&[0.0; 3], &d, &linear(), 0.1, 1, 6, &mut rng(0)).is_err());
    }

    #[test]
    fn sgd_is_deterministic() {
        let d = regression(40, 3);
        let a = local_update(&[0.0; 3], &d, &linear(), 0.1, 5, 8, &mut rng(7)).unwrap();
        let b = local_update(&[0.0; 3], &d, &linear(), 0.1, 5, 8, &mut rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_examples() {
        let a = vec![1.0, 2.0];
        let b = vec![5.0, -2.0];
        assert_eq!(aggregate(std::slice::from_ref(&a), &[7]), a);
        assert_eq!(aggregate(&[a.clone(), b.clone()], &[2, 2]), vec![3.0, 0.0]);
        assert_eq!(aggregate(&[a, b], &[1, 3]), vec![4.0, -1.0]);
    }

    fn quadratic_data() -> (Model, Dataset) {
        // identity rows with zero targets: F(w) = ‖w‖²/6
        let data = Dataset {
            features: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            dims: 3,
            targets: Targets::Values(vec![0.0; 3]),
        };
        (linear(), data)
    }

    #[test]
    fn smoothness_of_quadratic() {
        let (model, data) = quadratic_data();
        // Hessian I/3
        let (_, beta) = estimate_rho_beta(&[1.0, 2.0, 3.0], &[0.0, -1.0, 4.0], &model, &data).unwrap();
        assert!((beta - 1.0 / 3.0).abs() < 1e-15);
        assert!(estimate_rho_beta(&[1.0; 3], &[1.0; 3], &model, &data).is_none());
    }

    #[test]
    fn rho_is_secant_slope() {
        let (model, data) = quadratic_data();
        let (rho, _) = estimate_rho_beta(&[3.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &model, &data).unwrap();
        // (9 − 1)/6 over distance 2
        assert!((rho - 8.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn server_gradient_inverts_one_step() {
        let d = regression(20, 4);
        let w0 = vec![0.3, 0.1, -0.2];
        let (_, g) = linear().loss_grad(&w0, &d, None);
        let w1 = local_update(&w0, &d, &linear(), 0.1, 1, 20, &mut rng(0)).unwrap();
        let est = server_grad_estimate(&w0, &w1, 1, 0.1);
        for i in 0..3 {
            assert!((est[i] - g[i]).abs() < 1e-12);
        }
        assert_eq!(server_grad_estimate(&w0, &w0, 5, 0.1), vec![0.0; 3]);
    }

    #[test]
    fn server_gradient_averages_iterates() {
        let d = regression(30, 5);
        let model = linear();
        let mut w = vec![1.0, 1.0, 1.0];
        let w0 = w.clone();
        let mut sum = [0.0; 3];
        for _ in 0..5 {
            let (_, g) = model.loss_grad(&w, &d, None);
            for i in 0..3 {
                sum[i] += g[i] / 5.0;
                w[i] -= 0.01 * g[i];
            }
        }
        let est = server_grad_estimate(&w0, &w, 5, 0.01);
        for i in 0..3 {
            assert!((est[i] - sum[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn divergence_examples() {
        assert_eq!(update_delta(&[vec![1.0, 2.0]], &[5]), vec![0.0]);
        assert_eq!(update_delta(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[5, 9]), vec![0.0, 0.0]);
        let d = update_delta(&[vec![3.0, 4.0], vec![-3.0, -4.0]], &[2, 2]);
        assert_eq!(d, vec![5.0, 5.0]);
    }

    fn radio() -> RadioConfig {
        RadioConfig {
            bandwidth_hz: 20e6,
            noise_density_w_per_hz: dbm_per_mhz_to_w_per_hz(-114.0),
            model_size_bits: 1e5,
            path_loss_exponent: 3.76,
        }
    }

    fn profiles(m: usize, d: usize) -> Vec<DeviceProfile> {
        (0..m)
            .map(|id| DeviceProfile {
                id,
                dataset_size: d,
                batch_size: d,
                shift_ms_per_sample: 0.5,
                rate_param: 2.0,
                tx_power_w: 0.01,
            })
            .collect()
    }

    fn streams(seed: u64) -> TrainingStreams<ChaCha12Rng> {
        TrainingStreams {
            placement: rng(seed),
            channel: rng(seed + 1),
            compute: rng(seed + 2),
            estimation: rng(seed + 3),
            policy: rng(seed + 4),
            sgd: rng(seed + 5),
        }
    }

    fn cfg(budget: f64, max_rounds: Option<usize>) -> TrainingConfig {
        TrainingConfig {
            eta: 0.01,
            tau: 5,
            phi: 0.05,
            epsilon_alloc: 1e-4,
            budget_s: budget,
            max_rounds,
            k_hat_budget: KHatBudget::Full,
            initial: InitialEstimates::default(),
        }
    }

    fn classification_env() -> (Model, Vec<Dataset>, Vec<DeviceProfile>) {
        let data = synth_classification(&mut rng(11), 400, 5, 4).unwrap();
        let p = crate::datagen::partition(&data, 4, crate::datagen::PartitionSpec::Iid, &mut rng(12)).unwrap();
        let model = Model::new(ModelKind::LogisticRegression, 5, 4).unwrap();
        (model, p.datasets(&data), profiles(4, 100))
    }

    #[test]
    fn tiny_budget_completes_no_round() {
        let (model, locals, profiles) = classification_env();
        let cell = CellConfig::default();
        let r = radio();
        let env =
            Environment { model: &model, locals: &locals, test: None, profiles: &profiles, radio: &r, cell: &cell };
        let w0 = model.init(&mut rng(0));
        let h = run_training(&env, &cfg(1e-3, None), PolicySpec::Fc, w0.clone(), &mut streams(1)).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(h.best_model, w0);
        assert_eq!(h.elapsed_s, 0.0);
        assert!(h.aborted_round_s.unwrap() > 1e-3);
    }

    #[test]
    fn accounting_and_best_model_tracking() {
        let (model, locals, profiles) = classification_env();
        let cell = CellConfig::default();
        let r = radio();
        let env =
            Environment { model: &model, locals: &locals, test: None, profiles: &profiles, radio: &r, cell: &cell };
        let w0 = model.init(&mut rng(0));
        let budget = 8.0;
        let h = run_training(&env, &cfg(budget, None), PolicySpec::Fc, w0, &mut streams(2)).unwrap();
        assert!(!h.records.is_empty());
        let sum: f64 = h.records.iter().map(|r| r.t_star_s).sum();
        assert!((sum - h.elapsed_s).abs() < 1e-9);
        assert!(h.elapsed_s <= budget);
        assert!(h.elapsed_s + h.aborted_round_s.unwrap() > budget);
        assert!(h.records.windows(2).all(|w| w[1].cumulative_s > w[0].cumulative_s));
        let min = h.records.iter().map(|r| r.global_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_loss, min);
        for (i, rec) in h.records.iter().enumerate() {
            assert_eq!(rec.round, i + 1);
            assert!(rec.test_accuracy.is_some());
            assert!(rec.planned_t_star_s > 0.0);
        }
    }

    #[test]
    fn unscheduled_devices_keep_initial_estimates() {
        let (model, locals, profiles) = classification_env();
        let cell = CellConfig::default();
        let r = radio();
        let env =
            Environment { model: &model, locals: &locals, test: None, profiles: &profiles, radio: &r, cell: &cell };
        let h = run_training(
            &env,
            &cfg(f64::INFINITY, Some(3)),
            PolicySpec::ProportionalFair(1),
            model.init(&mut rng(0)),
            &mut streams(3),
        )
        .unwrap();
        let init = InitialEstimates::default();
        for i in 0..4 {
            if h.estimators.last_updated_round[i].is_none() {
                assert_eq!(h.estimators.delta_i[i], init.delta);
                assert_eq!(h.estimators.rho_i[i], init.rho);
            } else {
                // a lone scheduled device matches its own mean
                assert_eq!(h.estimators.delta_i[i], 0.0);
            }
        }
        assert_eq!(h.records.len(), 3);
    }

    #[test]
    fn global_loss_is_weighted_mean_of_locals() {
        let d = regression(30, 6);
        let model = linear();
        let parts = [d.subset(&(0..10).collect::<Vec<_>>()), d.subset(&(10..30).collect::<Vec<_>>())];
        let w = [0.1, 0.2, 0.3];
        let want = model.loss(&w, &d, None);
        assert!((global_loss(&model, &w, &parts) - want).abs() < 1e-14);
    }

    fn central_diff(model: &Model, w: &[f64], data: &Dataset) -> Vec<f64> {
        let h = 1e-5;
        (0..w.len())
            .map(|i| {
                let mut p = w.to_vec();
                let mut q = w.to_vec();
                p[i] += h;
                q[i] -= h;
                (model.loss(&p, data, None) - model.loss(&q, data, None)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(seed in any::<u64>(), which in 0usize..4) {
            let kind = [
                ModelKind::LinearRegression,
                ModelKind::SquaredSvm { lambda: 0.1 },
                ModelKind::LogisticRegression,
                ModelKind::Mlp { hidden: 6 },
            ][which];
            let (model, data) = match kind {
                ModelKind::LinearRegression => (Model::new(kind, 3, 1).unwrap(), regression(12, seed)),
                _ => (
                    Model::new(kind, 3, 3).unwrap(),
                    synth_classification(&mut rng(seed), 12, 3, 3).unwrap(),
                ),
            };
            let mut r = rng(seed ^ 0xabc);
            let w: Vec<f64> = (0..model.parameter_count()).map(|_| r.random_range(-1.0..1.0)).collect();
            let (_, g) = model.loss_grad(&w, &data, None);
            let fd = central_diff(&model, &w, &data);
            let err = norm(&diff(&g, &fd));
            prop_assert!(err <= 1e-5 * norm(&g).max(1e-3), "kind {kind} err {err}");
        }

        #[test]
        fn aggregate_is_exact_weighted_mean(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            da in 1usize..50,
            db in 1usize..50,
        ) {
            let w = aggregate(&[a.clone(), b.clone()], &[da, db]);
            prop_assert_eq!(w.len(), 4);
            for i in 0..4 {
                let want = (a[i] * da as f64 + b[i] * db as f64) / (da + db) as f64;
                prop_assert!((w[i] - want).abs() < 1e-12);
            }
        }
    }
}
