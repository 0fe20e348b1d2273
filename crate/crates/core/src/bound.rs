//! Convergence-bound arithmetic used as the scheduling objective.
//!
//! With `a = ηβ`, the per-device drift term is `g_i(x) = (δ_i/β)((1+a)^x − 1)`
//! and `h(x) = g(x) − ηδx` uses the weighted mean divergence `δ`. The gap
//! caused by scheduling only `n` of `M` devices is bounded by
//! `B(n) = ((M − n)/n)·A`, with
//!
//! ```text
//! A = β ΣᵢΣⱼ Dᵢ²Dⱼ²(gᵢ²(τ) + gⱼ²(τ)) / (2M(M−1)·D_min²·D²)
//! ```
//!
//! and the optimality gap after `K` rounds by `C = ε₀ + ρh(τ) + B`, where
//! `ε₀` is the positive root of `1/ε = K(ηφτ − (ρh(τ) + B)/ε²)`.

use thiserror::Error;

/// Smallest smoothness estimate accepted by [`BoundParams::new`]. Noisy
/// estimates at or below zero are raised to this value.
pub const BETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("bound domain error: {0}")]
    Domain(String),
}

fn domain(msg: impl Into<String>) -> BoundError {
    BoundError::Domain(msg.into())
}

/// `(1+a)^x − 1`, evaluated in log space.
fn growth(a: f64, x: u32) -> f64 {
    (f64::from(x) * a.ln_1p()).exp_m1()
}

/// `(1+a)^x − 1 − a·x`. For small `a·x` the binomial tail is summed directly,
/// which is exact for `x ≤ 1` and avoids cancellation.
fn growth_excess(a: f64, x: u32) -> f64 {
    if x <= 1 {
        return 0.0;
    }
    let xf = f64::from(x);
    if a * xf > 1.0 {
        return growth(a, x) - a * xf;
    }
    let mut term = a * xf; // C(x,1)·a
    let mut sum = 0.0;
    for k in 2..=x {
        term *= a * f64::from(x - k + 1) / f64::from(k);
        sum += term;
        if term <= sum * f64::EPSILON * 0.25 {
            break;
        }
    }
    sum
}

fn check_beta(beta: f64) -> Result<(), BoundError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("beta must be positive and finite, got {beta}")))
    }
}

/// `g(x) = (δ/β)((ηβ+1)^x − 1)`.
pub fn g(delta_i: f64, beta: f64, eta: f64, x: u32) -> Result<f64, BoundError> {
    check_beta(beta)?;
    Ok(delta_i / beta * growth(eta * beta, x))
}

/// `h(x) = (δ/β)((ηβ+1)^x − 1) − ηδx`.
pub fn h(delta: f64, beta: f64, eta: f64, x: u32) -> Result<f64, BoundError> {
    check_beta(beta)?;
    Ok(delta / beta * growth_excess(eta * beta, x))
}

/// `Σ D_i·v_i / Σ D_i`.
pub fn weighted_mean(values: &[f64], sizes: &[usize]) -> f64 {
    let total: f64 = sizes.iter().map(|&d| d as f64).sum();
    values.iter().zip(sizes).map(|(v, &d)| v * d as f64).sum::<f64>() / total
}

/// Snapshot of the estimated loss regularity constants and system
/// parameters that the bound depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    pub rho: f64,
    pub beta: f64,
    pub delta_i: Vec<f64>,
    /// Dataset-size weighted mean of `delta_i`.
    pub delta: f64,
    pub eta: f64,
    pub tau: u32,
    pub phi: f64,
    pub dataset_sizes: Vec<usize>,
    pub d_min: usize,
    pub d_total: usize,
    a_term: f64,
    h_tau: f64,
}

impl BoundParams {
    /// Validates inputs and caches `A` and `h(τ)`. `beta` is raised to
    /// [`BETA_FLOOR`] if smaller.
    pub fn new(
        rho: f64,
        beta: f64,
        delta_i: Vec<f64>,
        eta: f64,
        tau: u32,
        phi: f64,
        dataset_sizes: Vec<usize>,
    ) -> Result<Self, BoundError> {
        let m = dataset_sizes.len();
        if m == 0 || delta_i.len() != m {
            return Err(domain(format!("need one divergence per device ({} divergences, {m} devices)", delta_i.len())));
        }
        if dataset_sizes.contains(&0) {
            return Err(domain("dataset sizes must be positive"));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(domain(format!("rho must be nonnegative, got {rho}")));
        }
        if let Some(d) = delta_i.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(domain(format!("divergence must be nonnegative, got {d}")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(domain(format!("eta must be positive, got {eta}")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(domain(format!("phi must be positive, got {phi}")));
        }
        if tau == 0 {
            return Err(domain("tau must be at least 1"));
        }
        if beta.is_nan() {
            return Err(domain("beta is NaN"));
        }
        let beta = beta.max(BETA_FLOOR);
        let delta = weighted_mean(&delta_i, &dataset_sizes);
        let d_min = *dataset_sizes.iter().min().expect("nonempty");
        let d_total: usize = dataset_sizes.iter().sum();

        let a_term = if m < 2 {
            0.0
        } else {
            // ΣᵢΣⱼ Dᵢ²Dⱼ²(gᵢ² + gⱼ²) = 2·(Σⱼ Dⱼ²)·(Σᵢ Dᵢ²gᵢ²)
            let sq = |d: usize| (d as f64).powi(2);
            let sum_d2: f64 = dataset_sizes.iter().map(|&d| sq(d)).sum();
            let mut sum_d2g2 = 0.0;
            for (&d, &di) in dataset_sizes.iter().zip(&delta_i) {
                sum_d2g2 += sq(d) * g(di, beta, eta, tau)?.powi(2);
            }
            let mf = m as f64;
            beta * 2.0 * sum_d2 * sum_d2g2 / (2.0 * mf * (mf - 1.0) * sq(d_min) * sq(d_total))
        };
        let h_tau = h(delta, beta, eta, tau)?;
        Ok(Self { rho, beta, delta_i, delta, eta, tau, phi, dataset_sizes, d_min, d_total, a_term, h_tau })
    }

    pub fn num_devices(&self) -> usize {
        self.dataset_sizes.len()
    }

    /// The constant `A` shared by every schedule size.
    pub fn a_term(&self) -> f64 {
        self.a_term
    }

    pub fn h_tau(&self) -> f64 {
        self.h_tau
    }
}

/// `B(n) = ((M − n)/n)·A` for a schedule of `n` devices.
pub fn b_pi(n_scheduled: usize, p: &BoundParams) -> Result<f64, BoundError> {
    let m = p.num_devices();
    if n_scheduled == 0 || n_scheduled > m {
        return Err(domain(format!("scheduled count {n_scheduled} outside 1..={m}")));
    }
    if n_scheduled == m {
        return Ok(0.0);
    }
    Ok((m - n_scheduled) as f64 / n_scheduled as f64 * p.a_term)
}

/// Positive root of `1/ε = K(ηφτ − (ρh(τ) + bpi)/ε²)`.
pub fn epsilon0(k: u64, bpi: f64, p: &BoundParams) -> Result<f64, BoundError> {
    if k == 0 {
        return Err(domain("round count K must be at least 1"));
    }
    let kf = k as f64;
    let scale = p.eta * p.phi * kf * f64::from(p.tau);
    let c = p.rho * p.h_tau + bpi;
    Ok((1.0 + (1.0 + 4.0 * scale * kf * c).sqrt()) / (2.0 * scale))
}

/// `C = ε₀(K̂, B(n)) + ρh(τ) + B(n)`, the quantity the greedy scheduler
/// minimizes.
pub fn objective_c(k_hat: u64, n_scheduled: usize, p: &BoundParams) -> Result<f64, BoundError> {
    let b = b_pi(n_scheduled, p)?;
    Ok(epsilon0(k_hat, b, p)? + p.rho * p.h_tau + b)
}
