//! Per-round device selection.
//!
//! [`PolicySpec::Fc`] grows the scheduled set greedily, each time adding the
//! device whose inclusion yields the smallest optimal round latency, and stops
//! as soon as the convergence objective `C` would increase. The remaining
//! policies are the fixed-size and threshold baselines.
//!
//! Every policy decides on the controller's view of the round (observed
//! channel gains and computation times). The time the round really takes is
//! obtained afterwards with [`realized_latency`].

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::allocator::{allocate, equal_split_latency, AllocError, AllocationResult};
use crate::bound::{objective_c, BoundError, BoundParams};
use crate::wireless::{finish_time, DeviceProfile, LinkState, RadioConfig, RoundState, View};

/// Thresholds used by the `-l`/`-h` shorthands of the threshold baselines.
pub const LOW_THRESHOLD_S: f64 = 0.4;
pub const HIGH_THRESHOLD_S: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("no devices to schedule")]
    NoDevices,
}

/// Device scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicySpec {
    /// Greedy latency order, stopping when the convergence objective rises.
    Fc,
    /// Greedy latency order, stopping at exactly `n` devices.
    FixedN(usize),
    /// Uniformly random `n`-subset.
    Random(usize),
    /// The `n` devices with the strongest observed channels.
    ProportionalFair(usize),
    /// Equal bandwidth split, adding fastest devices until the threshold.
    ClientSelection(f64),
    /// Optimal allocation, adding fastest devices until the threshold.
    AsManyAsPossible(f64),
}

impl PolicySpec {
    pub fn validate(&self, num_devices: usize) -> Result<(), ScheduleError> {
        match *self {
            PolicySpec::Fc => Ok(()),
            PolicySpec::FixedN(n) | PolicySpec::Random(n) | PolicySpec::ProportionalFair(n) => {
                if (1..=num_devices).contains(&n) {
                    Ok(())
                } else {
                    Err(ScheduleError::Policy(format!("{self}: n must lie in 1..={num_devices}")))
                }
            }
            PolicySpec::ClientSelection(t) | PolicySpec::AsManyAsPossible(t) => {
                if t > 0.0 && t.is_finite() {
                    Ok(())
                } else {
                    Err(ScheduleError::Policy(format!("{self}: threshold must be positive")))
                }
            }
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Fc => write!(f, "FC"),
            PolicySpec::FixedN(n) => write!(f, "FixedN({n})"),
            PolicySpec::Random(n) => write!(f, "RD({n})"),
            PolicySpec::ProportionalFair(n) => write!(f, "PF({n})"),
            PolicySpec::ClientSelection(t) => write!(f, "CS({t})"),
            PolicySpec::AsManyAsPossible(t) => write!(f, "AS({t})"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = ScheduleError;

    /// Accepts `FC`, `FixedN(n)`, `RD(n)`, `PF(n)`, `CS(secs)`, `AS(secs)` and
    /// the shorthands `CS-l`, `CS-h`, `AS-l`, `AS-h`. Names are
    /// case-insensitive.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScheduleError::Policy(format!("cannot parse policy {s:?}"));
        let trimmed = s.trim();
        let lower = trimmed.to_ascii_lowercase();
        match lower.as_str() {
            "fc" => return Ok(PolicySpec::Fc),
            "cs-l" => return Ok(PolicySpec::ClientSelection(LOW_THRESHOLD_S)),
            "cs-h" => return Ok(PolicySpec::ClientSelection(HIGH_THRESHOLD_S)),
            "as-l" => return Ok(PolicySpec::AsManyAsPossible(LOW_THRESHOLD_S)),
            "as-h" => return Ok(PolicySpec::AsManyAsPossible(HIGH_THRESHOLD_S)),
            _ => {}
        }
        let (name, rest) = lower.split_once('(').ok_or_else(bad)?;
        let arg = rest.strip_suffix(')').ok_or_else(bad)?.trim();
        let count = || arg.parse::<usize>().map_err(|_| bad());
        let secs = || arg.parse::<f64>().map_err(|_| bad());
        let spec = match name.trim() {
            "fixedn" | "fixed" => PolicySpec::FixedN(count()?),
            "rd" => PolicySpec::Random(count()?),
            "pf" => PolicySpec::ProportionalFair(count()?),
            "cs" => PolicySpec::ClientSelection(secs()?),
            "as" => PolicySpec::AsManyAsPossible(secs()?),
            _ => return Err(bad()),
        };
        Ok(spec)
    }
}

/// Per-step record of a greedy run, in selection order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GreedyTrace {
    /// `t*` of the scheduled prefix after each addition.
    pub t_star_s: Vec<f64>,
    /// Objective of each accepted prefix, when a bound was supplied.
    pub c_values: Vec<f64>,
    /// The candidate that stopped the search and the objective it would have
    /// produced.
    pub rejected: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    /// Device ids, in the order they were selected.
    pub scheduled: Vec<usize>,
    /// Bandwidth shares aligned with `scheduled`; `t_star_s` is the latency
    /// the controller expects from its observations.
    pub allocation: AllocationResult,
    /// `⌊T/t*⌋`, at least 1.
    pub k_hat: u64,
    pub c_value: Option<f64>,
    /// No single device could meet the threshold; the fastest one was taken.
    pub threshold_violated: bool,
    /// `t* > T`, so `k_hat` was clamped up to 1.
    pub budget_exhausted: bool,
    pub trace: Option<GreedyTrace>,
}

/// Inputs shared by every policy.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleContext<'a> {
    /// Observed link state of every device, indexed by device id.
    pub links: &'a [LinkState],
    pub radio: &'a RadioConfig,
    /// Precision of the bandwidth search.
    pub epsilon: f64,
    /// Time budget used for `K̂`. May be infinite.
    pub budget_s: f64,
}

/// `(⌊T/t*⌋ clamped to ≥ 1, whether the clamp fired)`.
pub fn k_hat(budget_s: f64, t_star_s: f64) -> (u64, bool) {
    let k = (budget_s / t_star_s).floor();
    if k < 1.0 {
        (1, true)
    } else {
        // saturating for an infinite budget
        (k as u64, false)
    }
}

fn alloc_for(ctx: &ScheduleContext<'_>, ids: &[usize]) -> Result<AllocationResult, AllocError> {
    let links: Vec<LinkState> = ids.iter().map(|&i| ctx.links[i]).collect();
    allocate(&links, ctx.radio, ctx.epsilon)
}

/// Index of the smallest key; the first one wins ties.
fn argmin_by_key<T>(items: impl IntoIterator<Item = (T, f64)>) -> Option<(T, f64)> {
    let mut best: Option<(T, f64)> = None;
    for (item, key) in items {
        if best.as_ref().is_none_or(|(_, k)| key < *k) {
            best = Some((item, key));
        }
    }
    best
}

/// Best device to add to `current` by optimal-allocation latency.
fn next_by_latency(
    ctx: &ScheduleContext<'_>,
    current: &[usize],
    candidates: &[usize],
) -> Result<Option<(usize, AllocationResult)>, AllocError> {
    let mut trial = current.to_vec();
    trial.push(usize::MAX);
    let mut evaluated = Vec::with_capacity(candidates.len());
    for &c in candidates {
        *trial.last_mut().expect("pushed") = c;
        let alloc = alloc_for(ctx, &trial)?;
        let t = alloc.t_star_s;
        evaluated.push(((c, alloc), t));
    }
    Ok(argmin_by_key(evaluated).map(|(best, _)| best))
}

enum Stop {
    Objective,
    Count(usize),
    Threshold(f64),
}

/// Greedy growth in latency order. Candidates are kept in ascending id order so
/// ties go to the lowest id.
fn greedy(
    ctx: &ScheduleContext<'_>,
    stop: Stop,
    bound: Option<&BoundParams>,
) -> Result<ScheduleDecision, ScheduleError> {
    let m = ctx.links.len();
    if m == 0 {
        return Err(ScheduleError::NoDevices);
    }
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut scheduled = Vec::new();
    let mut trace = GreedyTrace::default();

    let (first, mut alloc) = next_by_latency(ctx, &scheduled, &remaining)?.expect("m > 0");
    let mut threshold_violated = false;
    if let Stop::Threshold(th) = stop {
        threshold_violated = alloc.t_star_s > th;
    }
    remaining.retain(|&i| i != first);
    scheduled.push(first);
    trace.t_star_s.push(alloc.t_star_s);
    let objective = |t: f64, n: usize| -> Result<Option<f64>, ScheduleError> {
        bound.map(|p| objective_c(k_hat(ctx.budget_s, t).0, n, p)).transpose().map_err(Into::into)
    };
    let mut c = objective(alloc.t_star_s, 1)?;
    trace.c_values.extend(c);

    while !remaining.is_empty() && !threshold_violated {
        if let Stop::Count(n) = stop {
            if scheduled.len() >= n {
                break;
            }
        }
        let (x, next_alloc) = next_by_latency(ctx, &scheduled, &remaining)?.expect("nonempty");
        let c_next = objective(next_alloc.t_star_s, scheduled.len() + 1)?;
        let accept = match stop {
            Stop::Objective => c_next <= c,
            Stop::Count(_) => true,
            Stop::Threshold(th) => next_alloc.t_star_s <= th,
        };
        if !accept {
            trace.rejected = Some((x, c_next.unwrap_or(f64::NAN)));
            break;
        }
        remaining.retain(|&i| i != x);
        scheduled.push(x);
        alloc = next_alloc;
        c = c_next;
        trace.t_star_s.push(alloc.t_star_s);
        trace.c_values.extend(c);
    }

    let (k, budget_exhausted) = k_hat(ctx.budget_s, alloc.t_star_s);
    Ok(ScheduleDecision {
        scheduled,
        allocation: alloc,
        k_hat: k,
        c_value: c,
        threshold_violated,
        budget_exhausted,
        trace: Some(trace),
    })
}

/// The greedy policy that minimizes the convergence objective.
pub fn schedule_fc(ctx: &ScheduleContext<'_>, p: &BoundParams) -> Result<ScheduleDecision, ScheduleError> {
    if p.num_devices() != ctx.links.len() {
        return Err(ScheduleError::Policy(format!(
            "bound covers {} devices, round has {}",
            p.num_devices(),
            ctx.links.len()
        )));
    }
    greedy(ctx, Stop::Objective, Some(p))
}

/// Fixed-size policies. `bound` only fills in `c_value`.
pub fn schedule_fixed<R: Rng + ?Sized>(
    ctx: &ScheduleContext<'_>,
    policy: PolicySpec,
    bound: Option<&BoundParams>,
    rng: &mut R,
) -> Result<ScheduleDecision, ScheduleError> {
    let m = ctx.links.len();
    if m == 0 {
        return Err(ScheduleError::NoDevices);
    }
    policy.validate(m)?;
    let scheduled: Vec<usize> = match policy {
        PolicySpec::FixedN(n) => return greedy(ctx, Stop::Count(n), bound),
        PolicySpec::Random(n) => {
            let mut ids = index::sample(rng, m, n).into_vec();
            ids.sort_unstable();
            ids
        }
        PolicySpec::ProportionalFair(n) => {
            let mut ids: Vec<usize> = (0..m).collect();
            // stable sort keeps lower ids first among equal gains
            ids.sort_by(|&a, &b| ctx.links[b].gain_sq.total_cmp(&ctx.links[a].gain_sq));
            ids.truncate(n);
            ids
        }
        other => {
            return Err(ScheduleError::Policy(format!("{other} is not a fixed-size policy")));
        }
    };
    let allocation = alloc_for(ctx, &scheduled)?;
    let (k, budget_exhausted) = k_hat(ctx.budget_s, allocation.t_star_s);
    let c_value = bound.map(|p| objective_c(k, scheduled.len(), p)).transpose()?;
    Ok(ScheduleDecision {
        scheduled,
        allocation,
        k_hat: k,
        c_value,
        threshold_violated: false,
        budget_exhausted,
        trace: None,
    })
}

/// Threshold baselines.
pub fn schedule_threshold(ctx: &ScheduleContext<'_>, policy: PolicySpec) -> Result<ScheduleDecision, ScheduleError> {
    let m = ctx.links.len();
    if m == 0 {
        return Err(ScheduleError::NoDevices);
    }
    policy.validate(m)?;
    match policy {
        PolicySpec::AsManyAsPossible(th) => greedy(ctx, Stop::Threshold(th), None),
        PolicySpec::ClientSelection(th) => Ok(client_selection(ctx, th)),
        other => Err(ScheduleError::Policy(format!("{other} is not a threshold policy"))),
    }
}

fn client_selection(ctx: &ScheduleContext<'_>, threshold_s: f64) -> ScheduleDecision {
    let m = ctx.links.len();
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut scheduled: Vec<LinkState> = Vec::new();
    let mut ids = Vec::new();
    let mut latency = 0.0;
    let mut threshold_violated = false;
    let mut trace = GreedyTrace::default();
    while !remaining.is_empty() {
        let share = 1.0 / (ids.len() + 1) as f64;
        let (pos, _) = argmin_by_key(
            remaining
                .iter()
                .enumerate()
                .map(|(pos, &i)| (pos, finish_time(share, &ctx.links[i], ctx.radio).expect("share is positive"))),
        )
        .expect("nonempty");
        let x = remaining[pos];
        scheduled.push(ctx.links[x]);
        let t = equal_split_latency(&scheduled, ctx.radio);
        if t > threshold_s {
            if ids.is_empty() {
                threshold_violated = true;
            } else {
                scheduled.pop();
                trace.rejected = Some((x, f64::NAN));
                break;
            }
        }
        remaining.remove(pos);
        ids.push(x);
        latency = t;
        trace.t_star_s.push(t);
        if threshold_violated {
            break;
        }
    }
    let share = 1.0 / ids.len() as f64;
    let allocation =
        AllocationResult { t_star_s: latency, gamma: vec![share; ids.len()], iterations: 0, residual: 0.0 };
    let (k, budget_exhausted) = k_hat(ctx.budget_s, latency);
    ScheduleDecision {
        scheduled: ids,
        allocation,
        k_hat: k,
        c_value: None,
        threshold_violated,
        budget_exhausted,
        trace: Some(trace),
    }
}

/// Dispatches to the policy's scheduler. `bound` is required for
/// [`PolicySpec::Fc`].
pub fn schedule<R: Rng + ?Sized>(
    ctx: &ScheduleContext<'_>,
    policy: PolicySpec,
    bound: Option<&BoundParams>,
    rng: &mut R,
) -> Result<ScheduleDecision, ScheduleError> {
    match policy {
        PolicySpec::Fc => {
            let p = bound.ok_or_else(|| ScheduleError::Policy("FC needs bound parameters".into()))?;
            schedule_fc(ctx, p)
        }
        PolicySpec::FixedN(_) | PolicySpec::Random(_) | PolicySpec::ProportionalFair(_) => {
            schedule_fixed(ctx, policy, bound, rng)
        }
        PolicySpec::ClientSelection(_) | PolicySpec::AsManyAsPossible(_) => schedule_threshold(ctx, policy),
    }
}

/// What the round actually costs: the slowest scheduled device's finish time
/// under the true channel and computation state, with the shares the
/// controller chose.
pub fn realized_latency(
    decision: &ScheduleDecision,
    round: &RoundState,
    profiles: &[DeviceProfile],
    radio: &RadioConfig,
) -> f64 {
    decision
        .scheduled
        .iter()
        .zip(&decision.allocation.gamma)
        .map(|(&i, &g)| {
            finish_time(g, &round.link(i, profiles, View::True), radio).expect("allocated shares are positive")
        })
        .fold(0.0, f64::max)
}
