//! Tenth-order nonlinear autoregressive moving average series.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};

const ORDER: usize = 10;
const ALPHA: f64 = 0.3;
const BETA: f64 = 0.05;
const GAMMA: f64 = 1.5;
const DELTA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarmaConfig {
    pub input_low: f64,
    pub input_high: f64,
    /// Draws with any `|y|` above this are rejected.
    pub bound: f64,
    /// Leading steps generated and discarded.
    pub burn_in: usize,
    pub resample_budget: usize,
}

impl Default for NarmaConfig {
    fn default() -> Self {
        Self {
            input_low: 0.0,
            input_high: 0.5,
            bound: 1.0,
            burn_in: 20,
            resample_budget: 100,
        }
    }
}

impl NarmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.input_low < self.input_high) {
            return Err(Error::Config("NARMA input range is empty".into()));
        }
        if !(self.bound > 0.0) {
            return Err(Error::Config("NARMA rejection bound must be positive".into()));
        }
        Ok(())
    }
}

/// `y_0 = 0` and
/// `y_{t+1} = 0.3 y_t + 0.05 y_t Σ_{i<10} y_{t-i} + 1.5 u_{t-9} u_t + 0.1`
/// with zero history; returns `inputs.len() + 1` values.
pub fn narma_series(inputs: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; inputs.len() + 1];
    for t in 0..inputs.len() {
        let window: f64 = y[t.saturating_sub(ORDER - 1)..=t].iter().sum();
        let lagged = if t >= ORDER - 1 { inputs[t - (ORDER - 1)] } else { 0.0 };
        y[t + 1] = ALPHA * y[t] + BETA * y[t] * window + GAMMA * lagged * inputs[t] + DELTA;
    }
    y
}

/// Frames `(u_t, y_t)` after the burn-in, or `None` if any value breaks
/// the rejection bound.
pub fn gen_narma(cfg: &NarmaConfig, steps: usize, seed: u64) -> Option<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cfg.burn_in + steps + 1;
    let inputs: Vec<f64> = (0..total).map(|_| rng.random_range(cfg.input_low..cfg.input_high)).collect();
    let y = narma_series(&inputs);
    if y.iter().any(|v| !v.is_finite() || v.abs() > cfg.bound) {
        return None;
    }
    let frames = (cfg.burn_in..total).flat_map(|t| [inputs[t], y[t]]).collect();
    Trajectory::new(2, frames).ok()
}
