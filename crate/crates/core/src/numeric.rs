//! Real special functions and root finding used by the bandwidth allocator.
//!
//! [`lambert_w`] evaluates both real branches of the Lambert-W function, the
//! inverse of `w * exp(w)`:
//!
//! * [`Branch::Principal`] (`W₀`) is defined for `x ≥ -1/e` and returns
//!   values `≥ -1`.
//! * [`Branch::Secondary`] (`W₋₁`) is defined for `-1/e ≤ x < 0` and returns
//!   values `≤ -1`.
//!
//! Both branches meet at the branch point `(-1/e, -1)`. Evaluation uses Halley
//! iteration from an asymptotic or branch-point-series initial guess, and falls
//! back to bisection when Halley does not settle within 50 steps.
//!
//! [`bisect_monotone`] is a plain bracketing bisection on a decreasing
//! function. It is slow but has no failure modes beyond a bad bracket, which is
//! what makes it useful as a cross-check for the closed forms.

use std::f64::consts::E;

use thiserror::Error;

/// `-1/e`, the common endpoint of both real branches.
pub const BRANCH_POINT: f64 = -1.0 / E;

const HALLEY_MAX_ITER: usize = 50;
/// Below this value of `sqrt(2(e·x + 1))` the branch-point series alone is
/// accurate to machine precision.
const SERIES_ONLY_RADIUS: f64 = 1e-3;
/// Rounding slack when deciding whether `x` lies left of the branch point.
const BRANCH_POINT_SLACK: f64 = 8.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// `W₀`, the branch through the origin.
    Principal,
    /// `W₋₁`, the lower branch on `[-1/e, 0)`.
    Secondary,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("lambert_w({branch:?}) is undefined at x = {x}")]
    Domain { branch: Branch, x: f64 },
    #[error("no sign change on [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("invalid bisection arguments: {0}")]
    InvalidArgument(&'static str),
}

/// Evaluates the requested real branch of Lambert-W at `x`.
///
/// The result `w` satisfies `w·e^w = x` to within a few ulps of `x`, except in
/// the immediate neighbourhood of the branch point where the function itself
/// is ill-conditioned.
///
/// ```
/// use fedsched::numeric::{lambert_w, Branch};
///
/// let w = lambert_w(Branch::Principal, 1.0).unwrap();
/// assert!((w * w.exp() - 1.0).abs() < 1e-15);
/// assert!(lambert_w(Branch::Secondary, 0.5).is_err());
/// ```
pub fn lambert_w(branch: Branch, x: f64) -> Result<f64, NumericError> {
    let domain = NumericError::Domain { branch, x };
    if !x.is_finite() {
        return Err(domain);
    }
    if branch == Branch::Secondary && x >= 0.0 {
        return Err(domain);
    }
    let mut offset = E.mul_add(x, 1.0);
    if offset < 0.0 {
        if offset < -BRANCH_POINT_SLACK {
            return Err(domain);
        }
        offset = 0.0;
    }
    if branch == Branch::Principal && x == 0.0 {
        return Ok(0.0);
    }
    Ok(solve(branch, x, offset))
}

/// Evaluates `W(-g·e^(-g))` for `g > 0`.
///
/// One branch always returns the trivial root `-g` (the principal branch when
/// `g ≤ 1`, the secondary branch when `g ≥ 1`); the other returns the
/// nontrivial root. Computing the distance to the branch point directly from
/// `g` keeps full relative accuracy when `g` is close to 1, where forming
/// `x = -g·e^(-g)` first would cancel away half the significant digits.
pub fn lambert_w_neg_exp(branch: Branch, g: f64) -> Result<f64, NumericError> {
    if !(g.is_finite() && g > 0.0) {
        return Err(NumericError::Domain { branch, x: -g * (-g).exp() });
    }
    match branch {
        Branch::Principal if g <= 1.0 => return Ok(-g),
        Branch::Secondary if g >= 1.0 => return Ok(-g),
        _ => {}
    }
    let x = -g * (-g).exp();
    // e·x + 1 = 1 - g·e^(1-g) = -expm1(ln g + 1 - g)
    let d = g - 1.0;
    let log_term = if d.abs() < 1e-2 {
        // ln(1+d) - d without cancellation
        let mut sum = 0.0;
        let mut pow = d * d;
        for k in 2..=12 {
            let term = pow / k as f64;
            sum += if k % 2 == 0 { -term } else { term };
            pow *= d;
        }
        sum
    } else {
        d.ln_1p() - d
    };
    let offset = -log_term.exp_m1();
    Ok(solve(branch, x, offset.max(0.0)))
}

/// `offset` is `e·x + 1`, supplied separately so callers can provide it at
/// higher accuracy than recomputing it from `x`.
fn solve(branch: Branch, x: f64, offset: f64) -> f64 {
    let p = match branch {
        Branch::Principal => (2.0 * offset).sqrt(),
        Branch::Secondary => -(2.0 * offset).sqrt(),
    };
    if p.abs() < SERIES_ONLY_RADIUS {
        return branch_point_series(p);
    }
    let guess = match branch {
        Branch::Principal if offset < 0.5 => branch_point_series(p),
        Branch::Principal if x < 3.0 => {
            let l = x.ln_1p();
            l * (1.0 - (1.0 + l).ln() / (2.0 + l))
        }
        Branch::Principal => asymptotic(x.ln()),
        Branch::Secondary if x < -0.25 => branch_point_series(p),
        Branch::Secondary => asymptotic((-x).ln()),
    };
    halley(x, guess).unwrap_or_else(|| bisect_fallback(branch, x))
}

/// Series of `W` in `p = ±sqrt(2(e·x + 1))` around the branch point.
fn branch_point_series(p: f64) -> f64 {
    const COEFFS: [f64; 7] = [-1.0, 1.0, -1.0 / 3.0, 11.0 / 72.0, -43.0 / 540.0, 769.0 / 17280.0, -221.0 / 8505.0];
    COEFFS.iter().rev().fold(0.0, |acc, c| acc * p + c)
}

/// `L1 - L2 + L2/L1` with `L1 = ln|x|`, `L2 = ln|L1|`.
fn asymptotic(l1: f64) -> f64 {
    let l2 = l1.abs().ln();
    l1 - l2 + l2 / l1
}

fn halley(x: f64, mut w: f64) -> Option<f64> {
    for _ in 0..HALLEY_MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        if !step.is_finite() {
            return None;
        }
        w -= step;
        if step.abs() <= 4.0 * f64::EPSILON * w.abs() {
            return Some(w);
        }
    }
    None
}

fn bisect_fallback(branch: Branch, x: f64) -> f64 {
    let tol = 1e-15;
    let root = match branch {
        // w·e^w is increasing on [-1, ∞); W₀(x) ≤ max(x, 1) for x ≥ -1/e.
        Branch::Principal => bisect_monotone(|w| x - w * w.exp(), -1.0, x.max(1.0), tol),
        // w·e^w is decreasing on (-∞, -1].
        Branch::Secondary => {
            let t = -x;
            let lo = -(2.0 * (1.0 / t).ln() + 2.0);
            bisect_monotone(|w| w * w.exp() - x, lo, -1.0, tol)
        }
    };
    // The bracket only degenerates exactly at the branch point.
    root.unwrap_or(-1.0)
}

/// Outcome of a bisection run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bisection {
    pub root: f64,
    pub iterations: u32,
}

/// Finds the sign change of a decreasing function `f` on `[lo, hi]`.
///
/// Requires `f(lo) > 0 > f(hi)`. The returned point lies within `tol` of the
/// crossing.
pub fn bisect_monotone<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64, NumericError>
where
    F: FnMut(f64) -> f64,
{
    bisect_monotone_counted(f, lo, hi, tol).map(|b| b.root)
}

/// Like [`bisect_monotone`], also reporting the number of halvings. The count
/// never exceeds `ceil(log2((hi - lo) / tol))`.
pub fn bisect_monotone_counted<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<Bisection, NumericError>
where
    F: FnMut(f64) -> f64,
{
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(NumericError::InvalidArgument("tolerance must be positive and finite"));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(NumericError::InvalidArgument("bracket must satisfy lo < hi"));
    }
    let f_lo = f(lo);
    let f_hi = f(hi);
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(NumericError::Bracket { lo, hi, f_lo, f_hi });
    }
    let mut iterations = 0;
    while hi - lo > tol {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        let fm = f(mid);
        if fm > 0.0 {
            lo = mid;
        } else if fm < 0.0 {
            hi = mid;
        } else {
            return Ok(Bisection { root: mid, iterations });
        }
    }
    Ok(Bisection { root: lo + 0.5 * (hi - lo), iterations })
}
