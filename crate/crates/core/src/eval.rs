//! Autoregressive rollouts, AR MSE, divergence accounting and seed
//! aggregation.
//!
//! Frames `0..warmup` are fed from ground truth. Every later frame is
//! predicted: state channels of the model input come from the previous
//! prediction while exogenous channels always come from ground truth. The
//! recurrent state carries straight across the boundary.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::block::{BlockState, Stepper};
use crate::error::{Error, Result};
use crate::ssm::{ForwardOptions, ModelParams};
use crate::tasks::{TaskKind, Trajectory};

/// AR MSE above this marks a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// Only state channels are fed back; inputs come from ground truth.
    #[default]
    StateOnly,
    /// Every channel, including exogenous inputs, is fed back.
    AllChannels,
}

/// How the model's memory is handled once predictions are fed back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    /// One recurrent state runs through the whole rollout.
    #[default]
    Continuous,
    /// Every prediction restarts from a zero state and reads only the last
    /// `w` frames.
    SlidingWindow(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Frames per rollout.
    pub total: usize,
    /// Leading ground-truth frames (`L − 1`).
    pub warmup: usize,
    pub count: usize,
    pub feedback: Feedback,
    #[serde(default)]
    pub mode: RolloutMode,
}

impl RolloutConfig {
    pub fn for_context(context_len: usize) -> Self {
        Self {
            total: 250,
            warmup: context_len - 1,
            count: 100,
            feedback: Feedback::StateOnly,
            mode: RolloutMode::Continuous,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 || self.warmup >= self.total {
            return Err(Error::Config(format!(
                "rollout warmup {} must lie in [1, total {})",
                self.warmup, self.total
            )));
        }
        if self.count < 1 {
            return Err(Error::Config("rollout count must be positive".into()));
        }
        if self.mode == RolloutMode::SlidingWindow(0) {
            return Err(Error::Config("rollout window must be positive".into()));
        }
        Ok(())
    }
}

/// A model advanced one frame at a time over a batch of sequences.
pub trait Predictor {
    type State;

    fn start(&self, batch: usize) -> Self::State;

    /// Consumes frame rows `(B, d_model)` and returns next-frame
    /// predictions of the same shape.
    fn step(&self, state: &mut Self::State, x: &Tensor) -> Result<Tensor>;

    /// Prediction after the last frame of a time-major window
    /// `(w · B, d_model)`, starting from a fresh state.
    fn predict_window(&self, frames: &Tensor, batch: usize) -> Result<Tensor> {
        let dm = frames.shape()[1];
        let mut state = self.start(batch);
        let mut y = Tensor::zeros(&[batch, dm]);
        for rows in frames.data().chunks(batch * dm) {
            y = self.step(&mut state, &Tensor::new(&[batch, dm], rows.to_vec())?)?;
        }
        Ok(y)
    }
}

pub struct ModelPredictor<'a> {
    params: &'a ModelParams,
    stepper: Stepper<'a>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(params: &'a ModelParams, options: ForwardOptions) -> Self {
        Self {
            params,
            stepper: Stepper::new(params, options),
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    type State = BlockState;

    fn start(&self, batch: usize) -> BlockState {
        BlockState::zeros(self.params, batch)
    }

    fn step(&self, state: &mut BlockState, x: &Tensor) -> Result<Tensor> {
        self.stepper.step(state, x)
    }

    fn predict_window(&self, frames: &Tensor, batch: usize) -> Result<Tensor> {
        let y = crate::block::predict(self.params, self.stepper.options(), frames, batch)?;
        let (rows, dm) = (y.shape()[0], y.shape()[1]);
        Tensor::new(&[batch, dm], y.data()[(rows - batch) * dm..].to_vec())
    }
}

/// Predicted frames of one trajectory; row `t` estimates frame `t`. In
/// continuous mode rows before `warmup` are the teacher-forced one-step
/// predictions (row 0 is zero); in sliding-window mode they are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub predictions: Vec<Tensor>,
    pub diverged: bool,
}

/// Rolls out every trajectory in one batch.
pub fn ar_rollout<P: Predictor>(
    model: &P,
    trajs: &[&Trajectory],
    task: TaskKind,
    cfg: &RolloutConfig,
) -> Result<Rollout> {
    cfg.validate()?;
    let b = trajs.len();
    let dm = task.d_model();
    for tr in trajs {
        if tr.num_frames() < cfg.total || tr.d_model != dm {
            return Err(Error::LengthMismatch(tr.num_frames(), cfg.total));
        }
    }
    let state_ch = task.state_channels();
    let fed = match cfg.feedback {
        Feedback::StateOnly => state_ch.clone(),
        Feedback::AllChannels => 0..dm,
    };
    let mut preds: Vec<Vec<f64>> = vec![vec![0.0; cfg.total * dm]; b];
    // model inputs: ground truth, with fed-back channels replaced from `warmup` on
    let mut inputs: Vec<f64> = Vec::with_capacity(cfg.total * b * dm);
    let mut state = match cfg.mode {
        RolloutMode::Continuous => Some(model.start(b)),
        RolloutMode::SlidingWindow(_) => None,
    };
    let mut diverged = false;
    for s in 0..cfg.total - 1 {
        for (i, tr) in trajs.iter().enumerate() {
            let truth = tr.frame(s);
            for c in 0..dm {
                let v = if s >= cfg.warmup && fed.contains(&c) {
                    preds[i][s * dm + c]
                } else {
                    truth[c]
                };
                inputs.push(v);
            }
        }
        let out = match (&mut state, cfg.mode) {
            (Some(st), _) => model.step(st, &Tensor::new(&[b, dm], inputs[s * b * dm..].to_vec())?),
            (None, RolloutMode::SlidingWindow(w)) => {
                if s + 1 < cfg.warmup {
                    continue;
                }
                let first = (s + 1).saturating_sub(w);
                let window = inputs[first * b * dm..].to_vec();
                model.predict_window(&Tensor::new(&[(s + 1 - first) * b, dm], window)?, b)
            }
            (None, RolloutMode::Continuous) => unreachable!("continuous mode keeps a state"),
        };
        let y = match out {
            Ok(y) if y.is_finite() => y,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        for (i, p) in preds.iter_mut().enumerate() {
            p[(s + 1) * dm..(s + 2) * dm].copy_from_slice(&y.data()[i * dm..(i + 1) * dm]);
        }
    }
    if diverged {
        for p in &mut preds {
            p.iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
    let predictions = preds
        .into_iter()
        .map(|p| Tensor::new(&[cfg.total, dm], p).expect("sized above"))
        .collect();
    Ok(Rollout { predictions, diverged })
}

/// Mean squared error over frames `warmup..total` and `state` channels,
/// averaged over trajectories.
pub fn ar_mse(predictions: &[Tensor], truths: &[&Trajectory], state: Range<usize>, cfg: &RolloutConfig) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Config("no rollouts to score".into()));
    }
    let mut total = 0.0;
    for (p, tr) in predictions.iter().zip(truths) {
        let dm = tr.d_model;
        if p.shape()[0] < cfg.total || tr.num_frames() < cfg.total || p.shape()[1] != dm {
            return Err(Error::LengthMismatch(p.shape()[0], cfg.total));
        }
        let mut sq = 0.0;
        for t in cfg.warmup..cfg.total {
            for c in state.clone() {
                let d = p.data()[t * dm + c] - tr.frame(t)[c];
                sq += d * d;
            }
        }
        total += sq / ((cfg.total - cfg.warmup) * state.len()) as f64;
    }
    Ok(total / predictions.len() as f64)
}

/// Rollout plus scoring for a trained model, batched over trajectories.
pub fn evaluate_model(
    params: &ModelParams,
    options: ForwardOptions,
    rollouts: &[Trajectory],
    task: TaskKind,
    cfg: &RolloutConfig,
) -> Result<(f64, bool)> {
    let refs: Vec<&Trajectory> = rollouts.iter().take(cfg.count).collect();
    let model = ModelPredictor::new(params, options);
    let r = ar_rollout(&model, &refs, task, cfg)?;
    if r.diverged {
        return Ok((f64::NAN, true));
    }
    let mse = ar_mse(&r.predictions, &refs, task.state_channels(), cfg)?;
    Ok((mse, !mse.is_finite() || mse > DIVERGENCE_THRESHOLD))
}

/// Diverged iff any training loss is non-finite, or the AR MSE is
/// non-finite or above [`DIVERGENCE_THRESHOLD`].
pub fn divergence_policy(losses: &[f64], ar_mse: Option<f64>) -> bool {
    losses.iter().any(|l| !l.is_finite()) || ar_mse.is_some_and(|m| !m.is_finite() || m > DIVERGENCE_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: f64,
    pub median: f64,
    pub worst: f64,
    /// Sample SD (n − 1); absent for a single seed.
    pub sd: Option<f64>,
    pub convergent: usize,
    pub diverged: usize,
}

/// Statistics over the convergent seeds.
pub fn aggregate_seeds(values: &[f64], diverged: &[bool]) -> Result<SeedAggregate> {
    if values.len() != diverged.len() {
        return Err(Error::LengthMismatch(values.len(), diverged.len()));
    }
    let mut ok: Vec<f64> = values
        .iter()
        .zip(diverged)
        .filter(|(v, d)| !**d && v.is_finite())
        .map(|(v, _)| *v)
        .collect();
    if ok.is_empty() {
        return Err(Error::NoConvergentSeeds);
    }
    ok.sort_by(f64::total_cmp);
    let n = ok.len();
    let mean = ok.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        ok[n / 2]
    } else {
        0.5 * (ok[n / 2 - 1] + ok[n / 2])
    };
    let sd = (n > 1).then(|| (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Ok(SeedAggregate {
        mean,
        median,
        worst: ok[n - 1],
        sd,
        convergent: n,
        diverged: values.len() - n,
    })
}

/// Baseline-over-variant ratios of means and of medians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub mean: f64,
    pub median: f64,
}

pub fn improvement(baseline: &SeedAggregate, variant: &SeedAggregate) -> Improvement {
    Improvement {
        mean: baseline.mean / variant.mean,
        median: baseline.median / variant.median,
    }
}

/// One seed's result, keyed the way reports are indexed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub task: TaskKind,
    pub variant: String,
    pub routing: String,
    pub d_state: usize,
    pub context_len: usize,
    pub seed: u64,
    /// NaN when the rollout diverged (written as JSON `null`).
    #[serde(deserialize_with = "null_as_nan")]
    pub ar_mse: f64,
    pub diverged: bool,
    pub config_hash: String,
}

/// Reads a JSON number, mapping `null` (how non-finite values are written) to NaN.
pub fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Per-seed rows plus the aggregate of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<SeedResult>,
    pub aggregate: Option<SeedAggregate>,
    pub improvement_vs_standard: Option<Improvement>,
}

impl EvalReport {
    pub fn new(seeds: Vec<SeedResult>) -> Self {
        let values: Vec<f64> = seeds.iter().map(|s| s.ar_mse).collect();
        let flags: Vec<bool> = seeds.iter().map(|s| s.diverged).collect();
        Self {
            seeds,
            aggregate: aggregate_seeds(&values, &flags).ok(),
            improvement_vs_standard: None,
        }
    }

    pub fn with_baseline(mut self, baseline: &SeedAggregate) -> Self {
        self.improvement_vs_standard = self.aggregate.as_ref().map(|a| improvement(baseline, a));
        self
    }

    /// One row per seed followed by `mean`, `median`, `worst` and `sd` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(crate::train::csv_err)?;
        w.write_record([
            "task",
            "variant",
            "routing",
            "d_state",
            "context_len",
            "seed",
            "ar_mse",
            "diverged",
            "config_hash",
        ])
        .map_err(crate::train::csv_err)?;
        for s in &self.seeds {
            w.write_record([
                s.task.name().to_string(),
                s.variant.clone(),
                s.routing.clone(),
                s.d_state.to_string(),
                s.context_len.to_string(),
                s.seed.to_string(),
                format!("{:e}", s.ar_mse),
                s.diverged.to_string(),
                s.config_hash.clone(),
            ])
            .map_err(crate::train::csv_err)?;
        }
        if let (Some(a), Some(first)) = (&self.aggregate, self.seeds.first()) {
            let sd = a.sd.map(|v| format!("{v:e}")).unwrap_or_default();
            for (label, value) in [
                ("mean", format!("{:e}", a.mean)),
                ("median", format!("{:e}", a.median)),
                ("worst", format!("{:e}", a.worst)),
                ("sd", sd),
            ] {
                w.write_record([
                    first.task.name().to_string(),
                    first.variant.clone(),
                    first.routing.clone(),
                    first.d_state.to_string(),
                    first.context_len.to_string(),
                    label.to_string(),
                    value,
                    format!("{}/{}", a.diverged, a.convergent + a.diverged),
                    first.config_hash.clone(),
                ])
                .map_err(crate::train::csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
