//! Damped pendulum driven through a finite impulse response of past inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    /// Gravity over length, 1/s².
    pub g_over_l: f64,
    pub damping: f64,
    pub dt: f64,
    /// FIR buffer length `K`.
    pub buffer_len: usize,
    /// FIR decay `γ`.
    pub decay: f64,
    pub input_low: f64,
    pub input_high: f64,
    /// Inputs drawn before the recorded window to fill the FIR buffer.
    pub burn_in: usize,
    pub resample_budget: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            g_over_l: 9.8,
            damping: 0.05,
            dt: 0.01,
            buffer_len: 24,
            decay: 0.15,
            input_low: -1.0,
            input_high: 1.0,
            burn_in: 24,
            resample_budget: 100,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_len < 1 {
            return Err(Error::Config("pendulum buffer length must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !self.g_over_l.is_finite() || !self.damping.is_finite() {
            return Err(Error::Config("pendulum dt must be positive and constants finite".into()));
        }
        if !(self.input_low < self.input_high) {
            return Err(Error::Config("pendulum input range is empty".into()));
        }
        Ok(())
    }
}

/// `w_k = e^{-γk} / Σ_j e^{-γj}` for `k = 0..K`.
pub fn fir_weights(k: usize, gamma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|i| (-gamma * i as f64).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Integrates from `(theta0, omega0)` over `inputs`, returning the
/// `inputs.len() + 1` states `(θ_t, ω_t)`. `history` holds inputs before
/// `t = 0`, oldest first; anything older is zero.
pub fn simulate_pendulum(
    cfg: &PendulumConfig,
    theta0: f64,
    omega0: f64,
    history: &[f64],
    inputs: &[f64],
) -> Vec<(f64, f64)> {
    let w = fir_weights(cfg.buffer_len, cfg.decay);
    let past = |t: usize, k: usize| -> f64 {
        if k <= t {
            inputs[t - k]
        } else {
            let back = k - t;
            if back <= history.len() {
                history[history.len() - back]
            } else {
                0.0
            }
        }
    };
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let (mut theta, mut omega) = (theta0, omega0);
    states.push((theta, omega));
    for t in 0..inputs.len() {
        let drive: f64 = w.iter().enumerate().map(|(k, wk)| wk * past(t, k)).sum();
        omega += (-cfg.g_over_l * theta.sin() - cfg.damping * omega + drive) * cfg.dt;
        theta += omega * cfg.dt;
        states.push((theta, omega));
    }
    states
}

/// `(g/ℓ)(1 − cos θ) + ω²/2`.
pub fn pendulum_energy(cfg: &PendulumConfig, theta: f64, omega: f64) -> f64 {
    cfg.g_over_l * (1.0 - theta.cos()) + 0.5 * omega * omega
}

/// Frames `(θ_t, ω_t, u_t)` for `t = 0..=steps`, starting at rest.
/// Returns `None` if the integration left the finite range.
pub fn gen_pendulum(cfg: &PendulumConfig, steps: usize, seed: u64) -> Option<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random_range(cfg.input_low..cfg.input_high);
    let history: Vec<f64> = (0..cfg.burn_in).map(|_| draw()).collect();
    let inputs: Vec<f64> = (0..=steps).map(|_| draw()).collect();
    let states = simulate_pendulum(cfg, 0.0, 0.0, &history, &inputs[..steps]);
    let mut frames = Vec::with_capacity(3 * (steps + 1));
    for (t, (theta, omega)) in states.into_iter().enumerate() {
        frames.extend([theta, omega, inputs[t]]);
    }
    Trajectory::new(3, frames).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_weights_without_decay() {
        assert_eq!(fir_weights(4, 0.0), vec![0.25; 4]);
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let cfg = PendulumConfig::default();
        let states = simulate_pendulum(&cfg, 0.0, 0.0, &[], &[0.0; 100]);
        assert!(states.iter().all(|&(a, b)| a == 0.0 && b == 0.0));
    }

    #[test]
    fn generator_is_seeded() {
        let cfg = PendulumConfig::default();
        assert_eq!(gen_pendulum(&cfg, 20, 5), gen_pendulum(&cfg, 20, 5));
        assert_ne!(gen_pendulum(&cfg, 20, 5), gen_pendulum(&cfg, 20, 6));
    }
}
