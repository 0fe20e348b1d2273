//! Optimal FDMA bandwidth allocation for a fixed set of scheduled devices.
//!
//! The round ends when the slowest scheduled device has finished computing and
//! uploading, so the optimum gives every device exactly the bandwidth share
//! that makes all of them finish at the same instant `t*`, with the shares
//! summing to one.
//!
//! For a target finish time `t`, device `i` needs the share `γ` solving
//!
//! ```text
//! t_cp + S / (γ·B·log₂(1 + c/γ)) = t,        c = P·h²/(B·N₀)
//! ```
//!
//! Substituting `u = c/γ` gives `ln(1+u) = Γ·u` with
//! `Γ = N₀·S·ln2 / ((t - t_cp)·P·h²)`. A positive root exists iff `Γ < 1`, and
//! it is `u = -W₋₁(-Γ·e^(-Γ))/Γ - 1`. The principal branch only returns the
//! trivial root `u = 0`. Hence
//!
//! ```text
//! γ = S·ln2 / ((t - t_cp)·B·(-W₋₁(-Γ·e^(-Γ)) - Γ))
//! ```
//!
//! The total required share `s(t)` is strictly decreasing in `t`, and
//! [`optimal_allocation`] bisects on `t` until `1 - ε ≤ s(t) ≤ 1`.

use std::f64::consts::LN_2;

use thiserror::Error;

use crate::numeric::{lambert_w_neg_exp, Branch};
use crate::wireless::{comm_latency, LinkState, RadioConfig};

/// Default precision of the bandwidth search.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Safety net on the number of upper-bound doublings in [`allocate`].
const MAX_DOUBLINGS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocError {
    #[error("invalid allocation input: {0}")]
    Domain(String),
    #[error("no devices scheduled")]
    EmptySchedule,
    #[error("search upper bound t_up = {t_up} s is infeasible (required share {required}); enlarge t_up")]
    UnboundedSearch { t_up: f64, required: f64 },
    #[error("bandwidth search stalled at t = {t} s (required share {required})")]
    Stalled { t: f64, required: f64 },
}

/// Bandwidth share a device needs to finish by a target time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RequiredGamma {
    /// May exceed 1, in which case the target is unreachable even with the
    /// whole band.
    Share(f64),
    /// No finite share meets the target.
    Infeasible,
}

impl RequiredGamma {
    /// The share, or `+∞` when infeasible.
    pub fn or_infinity(self) -> f64 {
        match self {
            RequiredGamma::Share(g) => g,
            RequiredGamma::Infeasible => f64::INFINITY,
        }
    }
}

/// Shares of the scheduled devices and the common finish time.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub t_star_s: f64,
    /// One entry per scheduled device, in input order.
    pub gamma: Vec<f64>,
    pub iterations: u32,
    /// `1 - Σγ`.
    pub residual: f64,
}

/// Share needed for a device with computation time `t_cp` to finish at
/// `t_target`.
///
/// ```
/// use fedsched::allocator::{required_gamma, RequiredGamma};
/// use fedsched::wireless::RadioConfig;
///
/// let radio = RadioConfig {
///     bandwidth_hz: 1e6,
///     noise_density_w_per_hz: 1e-12,
///     model_size_bits: 1e6,
///     path_loss_exponent: 3.0,
/// };
/// // too early: the device is still computing
/// assert_eq!(required_gamma(0.5, 1.0, 1.0, 1e-6, &radio).unwrap(), RequiredGamma::Infeasible);
/// let RequiredGamma::Share(g) = required_gamma(2.0, 1.0, 1.0, 1e-6, &radio).unwrap() else {
///     panic!()
/// };
/// assert!(g > 0.0);
/// ```
pub fn required_gamma(
    t_target: f64,
    t_cp: f64,
    tx_power_w: f64,
    gain_sq: f64,
    radio: &RadioConfig,
) -> Result<RequiredGamma, AllocError> {
    if !(tx_power_w > 0.0 && gain_sq > 0.0 && t_cp >= 0.0) || !t_target.is_finite() {
        return Err(AllocError::Domain(format!(
            "need P > 0, h² > 0, t_cp ≥ 0 and finite target (P = {tx_power_w}, h² = {gain_sq}, t_cp = {t_cp}, t = {t_target})"
        )));
    }
    let window = t_target - t_cp;
    if window <= 0.0 {
        return Ok(RequiredGamma::Infeasible);
    }
    let s_ln2 = radio.model_size_bits * LN_2;
    let big_gamma = radio.noise_density_w_per_hz * s_ln2 / (window * tx_power_w * gain_sq);
    if !(big_gamma < 1.0) {
        return Ok(RequiredGamma::Infeasible);
    }
    let w = lambert_w_neg_exp(Branch::Secondary, big_gamma).map_err(|e| AllocError::Domain(e.to_string()))?;
    let denom = -w - big_gamma;
    if !(denom > 0.0) {
        return Ok(RequiredGamma::Infeasible);
    }
    Ok(RequiredGamma::Share(s_ln2 / (window * radio.bandwidth_hz * denom)))
}

/// `s(t)`: total share needed for every device to finish by `t`, or `+∞` if
/// any device cannot.
pub fn required_sum(t: f64, links: &[LinkState], radio: &RadioConfig) -> Result<f64, AllocError> {
    let mut sum = 0.0;
    for l in links {
        match required_gamma(t, l.t_cp_s, l.tx_power_w, l.gain_sq, radio)? {
            RequiredGamma::Share(g) => sum += g,
            RequiredGamma::Infeasible => return Ok(f64::INFINITY),
        }
    }
    Ok(sum)
}

/// Finish time of a device that has the whole band to itself:
/// `t_cp + S/(B·log₂(1 + c))`.
pub fn standalone_latency(link: &LinkState, radio: &RadioConfig) -> f64 {
    let snr = radio.snr(link.tx_power_w, link.gain_sq);
    let rate = radio.bandwidth_hz * snr.ln_1p() / LN_2;
    link.t_cp_s + comm_latency(radio.model_size_bits, rate)
}

/// A search upper bound that is always feasible: with an equal split each
/// device finishes by `t_cp + n·S/(B·log₂(1+c))`, since `log₂(1+n·c) ≥ log₂(1+c)`.
pub fn default_upper_bound(links: &[LinkState], radio: &RadioConfig) -> f64 {
    let max_cp = links.iter().map(|l| l.t_cp_s).fold(0.0, f64::max);
    let max_comm = links.iter().map(|l| standalone_latency(l, radio) - l.t_cp_s).fold(0.0, f64::max);
    max_cp + links.len() as f64 * max_comm
}

/// Binary search for the minimal common finish time `t*`.
///
/// Starts at `t = t_up` with `t_low = max t_cp`; halves towards `t_low` while
/// bandwidth is left over (`s < 1 - ε`) and towards `t_up` while it is
/// over-committed (`s > 1`), stopping once `1 - ε ≤ s ≤ 1`.
pub fn optimal_allocation(
    links: &[LinkState],
    radio: &RadioConfig,
    epsilon: f64,
    t_up: f64,
) -> Result<AllocationResult, AllocError> {
    if links.is_empty() {
        return Err(AllocError::EmptySchedule);
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(AllocError::Domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let mut t_low = links.iter().map(|l| l.t_cp_s).fold(0.0, f64::max);
    let mut t_up = t_up;
    if !(t_up > t_low && t_up.is_finite()) {
        return Err(AllocError::Domain(format!("t_up = {t_up} must exceed the largest computation time {t_low}")));
    }
    let mut t = t_up;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let s = required_sum(t, links, radio)?;
        if (1.0 - epsilon..=1.0).contains(&s) {
            let gamma = links
                .iter()
                .map(|l| required_gamma(t, l.t_cp_s, l.tx_power_w, l.gain_sq, radio).map(RequiredGamma::or_infinity))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(AllocationResult { t_star_s: t, gamma, iterations, residual: 1.0 - s });
        }
        if iterations == 1 && s > 1.0 {
            return Err(AllocError::UnboundedSearch { t_up, required: s });
        }
        let next = if s < 1.0 - epsilon {
            t_up = t;
            0.5 * (t + t_low)
        } else {
            t_low = t;
            0.5 * (t + t_up)
        };
        if next == t {
            return Err(AllocError::Stalled { t, required: s });
        }
        t = next;
    }
}

/// [`optimal_allocation`] with the default upper bound, doubled until the
/// search is bounded.
pub fn allocate(links: &[LinkState], radio: &RadioConfig, epsilon: f64) -> Result<AllocationResult, AllocError> {
    if links.is_empty() {
        return Err(AllocError::EmptySchedule);
    }
    let mut t_up = default_upper_bound(links, radio);
    let mut doublings = 0;
    loop {
        match optimal_allocation(links, radio, epsilon, t_up) {
            Err(AllocError::UnboundedSearch { .. }) if doublings < MAX_DOUBLINGS => {
                t_up *= 2.0;
                doublings += 1;
            }
            other => return other,
        }
    }
}

/// Shares `1/n` each; the round lasts as long as the slowest device.
pub fn equal_split(links: &[LinkState], radio: &RadioConfig) -> Result<AllocationResult, AllocError> {
    if links.is_empty() {
        return Err(AllocError::EmptySchedule);
    }
    let share = 1.0 / links.len() as f64;
    let t = equal_split_latency(links, radio);
    Ok(AllocationResult { t_star_s: t, gamma: vec![share; links.len()], iterations: 0, residual: 0.0 })
}

pub(crate) fn equal_split_latency(links: &[LinkState], radio: &RadioConfig) -> f64 {
    let share = 1.0 / links.len() as f64;
    links.iter().map(|l| crate::wireless::finish_time(share, l, radio).expect("share is positive")).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::bisect_monotone;
    use crate::wireless::{dbm_per_mhz_to_w_per_hz, finish_time};
    use proptest::prelude::*;

    fn radio() -> RadioConfig {
        RadioConfig {
            bandwidth_hz: 20e6,
            noise_density_w_per_hz: dbm_per_mhz_to_w_per_hz(-114.0),
            model_size_bits: 1.6e6,
            path_loss_exponent: 3.76,
        }
    }

    fn link(t_cp_s: f64, dist: f64) -> LinkState {
        LinkState { t_cp_s, tx_power_w: 0.01, gain_sq: dist.powf(-3.76) }
    }

    fn oracle_gamma(t: f64, l: &LinkState, r: &RadioConfig) -> f64 {
        // rate(γ) is increasing, so rate(γ) - S/(t - t_cp) changes sign once
        let need = r.model_size_bits / (t - l.t_cp_s);
        let c = r.snr(l.tx_power_w, l.gain_sq);
        let rate = |g: f64| g * r.bandwidth_hz * (c / g).ln_1p() / LN_2;
        bisect_monotone(|g| need - rate(g), 1e-300, 1e6, 1e-18).unwrap()
    }

    #[test]
    fn infeasible_before_compute_finishes() {
        let r = radio();
        let l = link(0.3, 200.0);
        assert_eq!(required_gamma(0.3, 0.3, 0.01, l.gain_sq, &r).unwrap(), RequiredGamma::Infeasible);
        assert_eq!(required_gamma(0.1, 0.3, 0.01, l.gain_sq, &r).unwrap(), RequiredGamma::Infeasible);
        assert!(required_gamma(1.0, 0.3, 0.0, l.gain_sq, &r).is_err());
        assert!(required_gamma(1.0, 0.3, 0.01, -1.0, &r).is_err());
    }

    #[test]
    fn infeasible_when_capacity_limit_reached() {
        // Γ ≥ 1 <=> (t - t_cp) ≤ N₀·S·ln2/(P·h²), the infinite-bandwidth limit
        let r = radio();
        let l = link(0.0, 500.0);
        let limit = r.noise_density_w_per_hz * r.model_size_bits * LN_2 / (l.tx_power_w * l.gain_sq);
        assert_eq!(
            required_gamma(limit * (1.0 - 1e-9), 0.0, l.tx_power_w, l.gain_sq, &r).unwrap(),
            RequiredGamma::Infeasible
        );
        // at the limit itself the share is infeasible or diverges
        match required_gamma(limit, 0.0, l.tx_power_w, l.gain_sq, &r).unwrap() {
            RequiredGamma::Infeasible => {}
            RequiredGamma::Share(g) => assert!(g > 1e3, "share {g}"),
        }
        assert!(matches!(
            required_gamma(limit * 1.01, 0.0, l.tx_power_w, l.gain_sq, &r).unwrap(),
            RequiredGamma::Share(_)
        ));
    }

    #[test]
    fn symmetric_devices_get_equal_shares() {
        let r = radio();
        let l = link(0.2, 300.0);
        let a = required_gamma(0.5, l.t_cp_s, l.tx_power_w, l.gain_sq, &r).unwrap();
        let b = required_gamma(0.5, l.t_cp_s, l.tx_power_w, l.gain_sq, &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn closed_form_matches_bisection_oracle() {
        let r = radio();
        for (tcp, d, t) in [(0.3, 50.0, 0.35), (0.5, 600.0, 1.2), (0.1, 1000.0, 3.0), (0.0, 10.0, 1e-3)] {
            let l = link(tcp, d);
            let RequiredGamma::Share(g) = required_gamma(t, l.t_cp_s, l.tx_power_w, l.gain_sq, &r).unwrap() else {
                panic!("expected feasible at {t}")
            };
            let expected = oracle_gamma(t, &l, &r);
            assert!(((g - expected) / expected).abs() < 1e-9, "{g} vs {expected}");
            let ft = finish_time(g, &l, &r).unwrap();
            assert!(((ft - t) / t).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_gets_whole_band() {
        let r = radio();
        let l = link(0.4, 450.0);
        let res = allocate(&[l], &r, DEFAULT_EPSILON).unwrap();
        assert!(res.gamma[0] >= 1.0 - DEFAULT_EPSILON && res.gamma[0] <= 1.0);
        let standalone = standalone_latency(&l, &r);
        assert!(res.t_star_s >= standalone);
        assert!((res.t_star_s - standalone) <= DEFAULT_EPSILON * res.t_star_s);
    }

    #[test]
    fn identical_devices_split_evenly() {
        let r = radio();
        let n = 6;
        let links = vec![link(0.25, 350.0); n];
        let res = allocate(&links, &r, DEFAULT_EPSILON).unwrap();
        let hi = 1.0 / n as f64;
        let lo = (1.0 - DEFAULT_EPSILON) / n as f64;
        for g in &res.gamma {
            assert_eq!(*g, res.gamma[0]);
            assert!(*g >= lo && *g <= hi);
        }
    }

    #[test]
    fn search_errors() {
        let r = radio();
        let links = vec![link(0.25, 350.0), link(0.5, 100.0)];
        assert_eq!(optimal_allocation(&[], &r, 1e-4, 1.0), Err(AllocError::EmptySchedule));
        assert!(matches!(optimal_allocation(&links, &r, 1e-4, 0.4), Err(AllocError::Domain(_))));
        assert!(matches!(optimal_allocation(&links, &r, 1e-4, 0.5000001), Err(AllocError::UnboundedSearch { .. })));
        assert!(matches!(optimal_allocation(&links, &r, 0.0, 10.0), Err(AllocError::Domain(_))));
    }

    #[test]
    fn standalone_latency_limits() {
        let r = radio();
        let near = standalone_latency(&link(0.3, 10.0), &r);
        let far = standalone_latency(&link(0.3, 500.0), &r);
        assert!(near < far);
        let huge = standalone_latency(&LinkState { t_cp_s: 0.3, tx_power_w: 1.0, gain_sq: 1e30 }, &r);
        assert!((huge - 0.3).abs() < 1e-3);
    }

    #[test]
    fn equal_split_allocation() {
        let r = radio();
        let links = vec![link(0.25, 350.0), link(0.5, 100.0)];
        let res = equal_split(&links, &r).unwrap();
        assert_eq!(res.gamma, vec![0.5, 0.5]);
        assert_eq!(res.residual, 0.0);
        let slowest = links.iter().map(|l| finish_time(0.5, l, &r).unwrap()).fold(0.0, f64::max);
        assert_eq!(res.t_star_s, slowest);
    }

    fn arb_links() -> impl Strategy<Value = Vec<LinkState>> {
        proptest::collection::vec((0.0f64..1.0, 1.0f64..800.0, 0.001f64..0.1), 1..=10).prop_map(|v| {
            v.into_iter().map(|(t, d, p)| LinkState { t_cp_s: t, tx_power_w: p, gain_sq: d.powf(-3.76) }).collect()
        })
    }

    proptest! {
        #[test]
        fn required_sum_strictly_decreasing(links in arb_links(), a in 0.01f64..5.0, b in 0.01f64..5.0) {
            let r = radio();
            let t_low = links.iter().map(|l| l.t_cp_s).fold(0.0, f64::max);
            let (t1, t2) = (t_low + a.min(b), t_low + a.max(b));
            prop_assume!(t2 > t1 * (1.0 + 1e-9));
            let s1 = required_sum(t1, &links, &r).unwrap();
            let s2 = required_sum(t2, &links, &r).unwrap();
            prop_assert!(s2 < s1 || s1.is_infinite() && s2.is_infinite());
        }

        #[test]
        fn allocation_invariants(links in arb_links()) {
            let r = radio();
            let eps = DEFAULT_EPSILON;
            let res = allocate(&links, &r, eps).unwrap();
            prop_assert!(res.residual >= 0.0 && res.residual <= eps);
            prop_assert!(res.gamma.iter().all(|&g| g > 0.0 && g <= 1.0));
            for (g, l) in res.gamma.iter().zip(&links) {
                let ft = finish_time(*g, l, &r).unwrap();
                prop_assert!((ft - res.t_star_s).abs() <= eps * res.t_star_s);
            }
        }
    }
}
