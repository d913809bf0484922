//! Synthetic benchmarks: the multiple input-delay pendulum and NARMA-10.
//!
//! A trajectory of `T` steps stores `T + 1` observation frames. The model
//! reads frame `t` and is trained to predict frame `t + 1`.

mod dataset;
mod narma;
mod pendulum;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    build_dataset, config_hash, read_split, sub_seed, write_dataset, write_split, Dataset, DatasetManifest,
    DatasetSizes, SplitHeader, Split,
};
pub use narma::{gen_narma, narma_series, NarmaConfig};
pub use pendulum::{fir_weights, gen_pendulum, pendulum_energy, simulate_pendulum, PendulumConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    InputDelay,
    Narma10,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::InputDelay, TaskKind::Narma10];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::InputDelay => "input-delay",
            TaskKind::Narma10 => "narma10",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "input-delay" | "inputdelay" | "pendulum" => Ok(TaskKind::InputDelay),
            "narma10" | "narma-10" | "narma" => Ok(TaskKind::Narma10),
            _ => Err(Error::Config(format!("unknown task '{s}'"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            TaskKind::InputDelay => 1,
            TaskKind::Narma10 => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.id() == id)
            .ok_or_else(|| Error::Format(format!("unknown task id {id}")))
    }

    pub fn d_model(self) -> usize {
        self.channels().len()
    }

    pub fn channels(self) -> &'static [Channel] {
        const PENDULUM: [Channel; 3] = [Channel::state("theta"), Channel::state("omega"), Channel::input("u")];
        const NARMA: [Channel; 2] = [Channel::input("u"), Channel::state("y")];
        match self {
            TaskKind::InputDelay => &PENDULUM,
            TaskKind::Narma10 => &NARMA,
        }
    }

    /// Contiguous range of the channels the model must predict.
    pub fn state_channels(self) -> Range<usize> {
        match self {
            TaskKind::InputDelay => 0..2,
            TaskKind::Narma10 => 1..2,
        }
    }

    /// Bilinear weight init std used unless overridden.
    pub fn default_bilinear_std(self) -> f64 {
        match self {
            TaskKind::InputDelay => 0.5,
            TaskKind::Narma10 => 0.1,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRole {
    /// Predicted and fed back during rollouts.
    State,
    /// Exogenous drive, always taken from ground truth.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Channel {
    pub name: &'static str,
    pub role: ChannelRole,
}

impl Channel {
    const fn state(name: &'static str) -> Self {
        Self {
            name,
            role: ChannelRole::State,
        }
    }

    const fn input(name: &'static str) -> Self {
        Self {
            name,
            role: ChannelRole::Input,
        }
    }
}

/// Generator settings for either benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum TaskConfig {
    InputDelay(PendulumConfig),
    Narma10(NarmaConfig),
}

impl TaskConfig {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::InputDelay => TaskConfig::InputDelay(PendulumConfig::default()),
            TaskKind::Narma10 => TaskConfig::Narma10(NarmaConfig::default()),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskConfig::InputDelay(_) => TaskKind::InputDelay,
            TaskConfig::Narma10(_) => TaskKind::Narma10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskConfig::InputDelay(c) => c.validate(),
            TaskConfig::Narma10(c) => c.validate(),
        }
    }

    /// One trajectory of `steps` steps, or `None` if the draw was rejected.
    fn generate_once(&self, steps: usize, seed: u64) -> Option<Trajectory> {
        match self {
            TaskConfig::InputDelay(c) => gen_pendulum(c, steps, seed),
            TaskConfig::Narma10(c) => gen_narma(c, steps, seed),
        }
    }

    pub fn resample_budget(&self) -> usize {
        match self {
            TaskConfig::InputDelay(c) => c.resample_budget,
            TaskConfig::Narma10(c) => c.resample_budget,
        }
    }
}

/// Observation frames of one sequence, row-major `(steps + 1, d_model)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub d_model: usize,
    pub frames: Vec<f64>,
}

impl Trajectory {
    pub fn new(d_model: usize, frames: Vec<f64>) -> Result<Self> {
        if d_model == 0 || frames.len() % d_model != 0 || frames.len() < 2 * d_model {
            return Err(Error::InvalidShape {
                op: "trajectory",
                reason: format!("{} values for d_model {d_model}", frames.len()),
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "trajectory" });
        }
        Ok(Self { d_model, frames })
    }

    /// Number of prediction steps (frames minus one).
    pub fn steps(&self) -> usize {
        self.frames.len() / self.d_model - 1
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.d_model
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.d_model..(t + 1) * self.d_model]
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        self.frame(t)
    }

    /// Next-step target: frame `t + 1`.
    pub fn target(&self, t: usize) -> &[f64] {
        self.frame(t + 1)
    }

    /// Values of one channel across all frames.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.frames.iter().skip(c).step_by(self.d_model).copied().collect()
    }
}
