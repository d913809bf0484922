//! The single-block wrapper around an SSM recurrence:
//! `in_proj → causal conv → silu → SSM → ⊙ silu(gate) → out_proj`.
//!
//! Sequences are time-major: a batch of `B` sequences of length `L` is a
//! `(L·B, d_model)` matrix whose row `t·B + b` is step `t` of sequence `b`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::{Bound, ForwardOptions, ModelParams, CONV_WIDTH};
use crate::variants;

/// Teacher-forced forward pass over a time-major batch. Returns the
/// `(L·B, d_model)` outputs.
pub fn forward(tape: &mut Tape, bound: &Bound, x: Var, batch: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != bound.dims.d_model {
        return Err(Error::ShapeMismatch {
            op: "block forward",
            lhs: shape,
            rhs: vec![0, bound.dims.d_model],
        });
    }
    if batch == 0 || shape[0] % batch != 0 {
        return Err(Error::InvalidShape {
            op: "block forward",
            reason: format!("{} rows not divisible by batch {batch}", shape[0]),
        });
    }
    let steps = shape[0] / batch;
    let di = bound.dims.d_inner;
    let xz = tape.matmul(x, bound.in_proj_t)?;
    let u_pre = tape.narrow(xz, 1, 0, di)?;
    let z = tape.narrow(xz, 1, di, di)?;

    // causal depthwise convolution: lag k shifts the sequence down k·B rows
    let w0 = tape.narrow(bound.conv_weight, 0, 0, 1)?;
    let first = tape.mul(u_pre, w0)?;
    let mut conv = tape.add(first, bound.conv_bias)?;
    for k in 1..CONV_WIDTH.min(steps) {
        let wk = tape.narrow(bound.conv_weight, 0, k, 1)?;
        let head = tape.narrow(u_pre, 0, 0, (steps - k) * batch)?;
        let pad = tape.constant(Tensor::zeros(&[k * batch, di]));
        let shifted = tape.concat(&[pad, head], 0)?;
        let term = tape.mul(shifted, wk)?;
        conv = tape.add(conv, term)?;
    }
    let u = tape.silu(conv)?;

    let h0 = tape.constant(variants::zero_state(bound, batch));
    let (y, _) = variants::sequence(tape, bound, u, batch, h0)?;
    let gate = tape.silu(z)?;
    let gated = tape.mul(y, gate)?;
    tape.matmul(gated, bound.out_proj_t)
}

/// Carried state for step-by-step evaluation of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    /// Pre-convolution SSM-path inputs of the last `CONV_WIDTH - 1` steps,
    /// most recent first, each `(B, d_inner)`.
    pub conv_history: Vec<Tensor>,
    /// Recurrent state `(B, ...state shape)`.
    pub ssm: Tensor,
}

impl BlockState {
    pub fn zeros(params: &ModelParams, batch: usize) -> Self {
        let di = params.dims.d_inner;
        let mut shape = vec![batch];
        shape.extend(params.dims.state_shape(params.arch.kind));
        Self {
            conv_history: vec![Tensor::zeros(&[batch, di]); CONV_WIDTH - 1],
            ssm: Tensor::zeros(&shape),
        }
    }

    pub fn batch(&self) -> usize {
        self.ssm.shape()[0]
    }
}

/// Step-wise evaluator: advances a [`BlockState`] by one observation row
/// per sequence. Each call uses a fresh tape.
pub struct Stepper<'a> {
    params: &'a ModelParams,
    options: ForwardOptions,
}

impl<'a> Stepper<'a> {
    pub fn new(params: &'a ModelParams, options: ForwardOptions) -> Self {
        Self { params, options }
    }

    pub fn options(&self) -> ForwardOptions {
        self.options
    }

    /// Consumes `x` shaped `(B, d_model)` and returns the `(B, d_model)`
    /// output, updating `state` in place.
    pub fn step(&self, state: &mut BlockState, x: &Tensor) -> Result<Tensor> {
        let batch = state.batch();
        let dims = self.params.dims;
        if x.shape() != [batch, dims.d_model] {
            return Err(Error::ShapeMismatch {
                op: "block step",
                lhs: x.shape().to_vec(),
                rhs: vec![batch, dims.d_model],
            });
        }
        let di = dims.d_inner;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false, self.options)?;
        let xv = tape.constant(x.clone());
        let xz = tape.matmul(xv, bound.in_proj_t)?;
        let u_pre = tape.narrow(xz, 1, 0, di)?;
        let z = tape.narrow(xz, 1, di, di)?;

        let w0 = tape.narrow(bound.conv_weight, 0, 0, 1)?;
        let first = tape.mul(u_pre, w0)?;
        let mut conv = tape.add(first, bound.conv_bias)?;
        for (k, past) in state.conv_history.iter().enumerate() {
            let wk = tape.narrow(bound.conv_weight, 0, k + 1, 1)?;
            let pv = tape.constant(past.clone());
            let term = tape.mul(pv, wk)?;
            conv = tape.add(conv, term)?;
        }
        let u = tape.silu(conv)?;
        let h_prev = tape.constant(state.ssm.clone());
        let (h, y) = variants::step(&mut tape, &bound, h_prev, u)?;
        let gate = tape.silu(z)?;
        let gated = tape.mul(y, gate)?;
        let out = tape.matmul(gated, bound.out_proj_t)?;

        state.conv_history.rotate_right(1);
        state.conv_history[0] = tape.value(u_pre).clone();
        state.ssm = tape.value(h).clone();
        Ok(tape.value(out).clone())
    }
}

/// Teacher-forced outputs for a time-major batch, without gradients.
pub fn predict(params: &ModelParams, options: ForwardOptions, x: &Tensor, batch: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false, options)?;
    let xv = tape.constant(x.clone());
    let y = forward(&mut tape, &bound, xv, batch)?;
    Ok(tape.value(y).clone())
}
