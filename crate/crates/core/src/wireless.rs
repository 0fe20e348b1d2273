//! Physical-layer and latency models.
//!
//! Devices sit uniformly in a disk around the base station and are re-placed
//! every round. The squared channel gain is pure path loss `d^(-α)`, optionally
//! multiplied by unit-mean Rayleigh power fading. Local computation time follows
//! a shifted exponential law, and uplink rate is the FDMA Shannon rate of the
//! allocated bandwidth share.

use rand::Rng;
use rand_distr::{Distribution, Exp, Exp1, Normal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WirelessError {
    #[error("invalid radio configuration: {0}")]
    Config(String),
    #[error("bandwidth share must be positive, got {0}")]
    NonPositiveShare(f64),
}

/// System-wide radio parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioConfig {
    /// Total uplink bandwidth `B`.
    pub bandwidth_hz: f64,
    /// Noise power spectral density `N₀`.
    pub noise_density_w_per_hz: f64,
    /// Size `S` of one uploaded model.
    pub model_size_bits: f64,
    /// Path-loss exponent `α`.
    pub path_loss_exponent: f64,
}

impl RadioConfig {
    pub fn validate(&self) -> Result<(), WirelessError> {
        let positive = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_density_w_per_hz", self.noise_density_w_per_hz),
            ("model_size_bits", self.model_size_bits),
            ("path_loss_exponent", self.path_loss_exponent),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(WirelessError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.path_loss_exponent <= 2.0 {
            return Err(WirelessError::Config(format!(
                "path_loss_exponent must exceed 2, got {}",
                self.path_loss_exponent
            )));
        }
        Ok(())
    }

    /// Full-band SNR `P·h²/(B·N₀)` of a device.
    pub fn snr(&self, tx_power_w: f64, gain_sq: f64) -> f64 {
        tx_power_w * gain_sq / (self.bandwidth_hz * self.noise_density_w_per_hz)
    }
}

/// Static attributes of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub id: usize,
    /// `D_i`, number of local samples.
    pub dataset_size: usize,
    /// `d_i`, mini-batch size of one local step.
    pub batch_size: usize,
    /// `a_i`, deterministic compute time per sample.
    pub shift_ms_per_sample: f64,
    /// `μ_i`, in samples per millisecond. The exponential tail of one local
    /// step over `d` samples has mean `d/μ_i` milliseconds.
    pub rate_param: f64,
    /// `P_i`.
    pub tx_power_w: f64,
}

/// Per-device quantities the allocator needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkState {
    pub t_cp_s: f64,
    pub tx_power_w: f64,
    pub gain_sq: f64,
}

/// Which copy of the round's measurements to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// What actually happens.
    True,
    /// What the controller sees, possibly perturbed by estimation error.
    Observed,
}

/// Dynamic per-round state of every device.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round_index: usize,
    pub distances_m: Vec<f64>,
    /// `h²_{i,k}`.
    pub channel_gain_sq: Vec<f64>,
    /// `t^cp_{i,k}` in seconds.
    pub comp_latency_s: Vec<f64>,
    pub observed_gain_sq: Vec<f64>,
    pub observed_comp_latency_s: Vec<f64>,
}

impl RoundState {
    pub fn num_devices(&self) -> usize {
        self.channel_gain_sq.len()
    }

    pub fn link(&self, id: usize, profiles: &[DeviceProfile], view: View) -> LinkState {
        let (t_cp_s, gain_sq) = match view {
            View::True => (self.comp_latency_s[id], self.channel_gain_sq[id]),
            View::Observed => (self.observed_comp_latency_s[id], self.observed_gain_sq[id]),
        };
        LinkState { t_cp_s, tx_power_w: profiles[id].tx_power_w, gain_sq }
    }

    pub fn links(&self, ids: &[usize], profiles: &[DeviceProfile], view: View) -> Vec<LinkState> {
        ids.iter().map(|&i| self.link(i, profiles, view)).collect()
    }
}

pub fn dbm_to_watts(p_dbm: f64) -> f64 {
    10f64.powf((p_dbm - 30.0) / 10.0)
}

/// Converts a noise density quoted in dBm/MHz to W/Hz.
pub fn dbm_per_mhz_to_w_per_hz(n0_dbm_per_mhz: f64) -> f64 {
    dbm_to_watts(n0_dbm_per_mhz) / 1e6
}

/// Distances of `count` points drawn uniformly in a disk of radius `radius_m`,
/// clamped below at `min_dist_m`.
pub fn place_devices<R: Rng + ?Sized>(rng: &mut R, count: usize, radius_m: f64, min_dist_m: f64) -> Vec<f64> {
    (0..count).map(|_| (radius_m * rng.random::<f64>().sqrt()).max(min_dist_m)).collect()
}

pub fn channel_gain_sq(distance_m: f64, path_loss_exponent: f64) -> f64 {
    distance_m.powf(-path_loss_exponent)
}

/// Draws one round of local computation time, in seconds, for `tau` local
/// steps: `a·τ·d + Exp(μ/(τ·d))`, evaluated in milliseconds.
pub fn sample_comp_latency<R: Rng + ?Sized>(rng: &mut R, profile: &DeviceProfile, tau: usize) -> f64 {
    let work = (tau * profile.batch_size) as f64;
    let shift_ms = profile.shift_ms_per_sample * work;
    let tail = Exp::new(profile.rate_param / work).expect("rate_param validated positive");
    (shift_ms + tail.sample(rng)) / 1e3
}

/// Uplink rate `γ·B·log₂(1 + P·h²/(γ·B·N₀))` in bits per second.
pub fn achievable_rate(gamma: f64, radio: &RadioConfig, tx_power_w: f64, gain_sq: f64) -> Result<f64, WirelessError> {
    if !(gamma > 0.0) {
        return Err(WirelessError::NonPositiveShare(gamma));
    }
    let snr = radio.snr(tx_power_w, gain_sq);
    Ok(gamma * radio.bandwidth_hz * (snr / gamma).ln_1p() / std::f64::consts::LN_2)
}

pub fn comm_latency(size_bits: f64, rate: f64) -> f64 {
    size_bits / rate
}

/// Compute plus upload time of a device holding bandwidth share `gamma`.
pub fn finish_time(gamma: f64, link: &LinkState, radio: &RadioConfig) -> Result<f64, WirelessError> {
    let rate = achievable_rate(gamma, radio, link.tx_power_w, link.gain_sq)?;
    Ok(link.t_cp_s + comm_latency(radio.model_size_bits, rate))
}

/// Adds zero-mean Gaussian noise with standard deviation `rel_std·value`,
/// redrawing until the result is positive.
pub fn perturb<R: Rng + ?Sized>(value: f64, rel_std: f64, rng: &mut R) -> f64 {
    if rel_std == 0.0 || value == 0.0 {
        return value;
    }
    let noise = Normal::new(0.0, rel_std * value.abs()).expect("finite std");
    loop {
        let v = value + noise.sample(rng);
        if v > 0.0 {
            return v;
        }
    }
}

/// Small-scale fading applied on top of path loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fading {
    #[default]
    None,
    /// Unit-mean exponential power gain.
    Rayleigh,
}

/// Cell geometry and measurement model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConfig {
    pub radius_m: f64,
    pub min_dist_m: f64,
    pub fading: Fading,
    /// Relative standard deviation of the controller's estimates of `h` and
    /// `t^cp`. Zero means perfect knowledge.
    pub error_rel_std: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self { radius_m: 600.0, min_dist_m: 1.0, fading: Fading::None, error_rel_std: 0.0 }
    }
}

/// Independent random sources consumed by [`sample_round`].
pub struct RoundStreams<'a, R: Rng + ?Sized> {
    pub placement: &'a mut R,
    pub channel: &'a mut R,
    pub compute: &'a mut R,
    pub estimation: &'a mut R,
}

/// Draws positions, channel gains, and computation latencies of every device
/// for round `round_index`.
pub fn sample_round<R: Rng + ?Sized>(
    round_index: usize,
    profiles: &[DeviceProfile],
    radio: &RadioConfig,
    cell: &CellConfig,
    tau: usize,
    streams: RoundStreams<'_, R>,
) -> RoundState {
    let m = profiles.len();
    let distances_m = place_devices(streams.placement, m, cell.radius_m, cell.min_dist_m);
    let channel_gain_sq: Vec<f64> = distances_m
        .iter()
        .map(|&d| {
            let g = channel_gain_sq(d, radio.path_loss_exponent);
            match cell.fading {
                Fading::None => g,
                Fading::Rayleigh => {
                    let power: f64 = Exp1.sample(&mut *streams.channel);
                    g * power
                }
            }
        })
        .collect();
    let comp_latency_s: Vec<f64> = profiles.iter().map(|p| sample_comp_latency(streams.compute, p, tau)).collect();

    // The error is Gaussian on the amplitude h, not on h².
    let observed_gain_sq = if cell.error_rel_std == 0.0 {
        channel_gain_sq.clone()
    } else {
        channel_gain_sq.iter().map(|&g| perturb(g.sqrt(), cell.error_rel_std, streams.estimation).powi(2)).collect()
    };
    let observed_comp_latency_s =
        comp_latency_s.iter().map(|&t| perturb(t, cell.error_rel_std, streams.estimation)).collect();

    RoundState { round_index, distances_m, channel_gain_sq, comp_latency_s, observed_gain_sq, observed_comp_latency_s }
}
