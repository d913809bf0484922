//! Weights and shared machinery of the selective SSM block: dimensions,
//! the selectivity projection, discretisation and parameter counting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::variants::{Routing, VariantKind};

/// Width of the causal depthwise convolution on the SSM path.
pub const CONV_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Observation width fed to the block.
    pub d_model: usize,
    /// Channels inside the block, `4 * d_model` unless overridden.
    pub d_inner: usize,
    pub d_state: usize,
    /// Training context length `L`.
    pub context_len: usize,
    /// Rank of an optional low-rank Δt bottleneck; `None` is a direct map.
    #[serde(default)]
    pub dt_rank: Option<usize>,
}

impl ModelDims {
    pub fn new(d_model: usize, d_state: usize, context_len: usize) -> Self {
        Self {
            d_model,
            d_inner: 4 * d_model,
            d_state,
            context_len,
            dt_rank: None,
        }
    }

    pub fn with_d_inner(mut self, d_inner: usize) -> Self {
        self.d_inner = d_inner;
        self
    }

    pub fn with_dt_rank(mut self, rank: Option<usize>) -> Self {
        self.dt_rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 {
            return Err(Error::Config("d_model and d_inner must be positive".into()));
        }
        if self.d_state < 1 {
            return Err(Error::Config("d_state must be at least 1".into()));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context length must be at least 2".into()));
        }
        if self.dt_rank == Some(0) {
            return Err(Error::Config("dt_rank must be positive when set".into()));
        }
        Ok(())
    }

    /// Width of Δt: one step per channel for Standard, per state dim otherwise.
    pub fn dt_width(&self, kind: VariantKind) -> usize {
        if kind.is_coupled() {
            self.d_state
        } else {
            self.d_inner
        }
    }

    /// Per-sample state shape.
    pub fn state_shape(&self, kind: VariantKind) -> Vec<usize> {
        if kind.is_coupled() {
            vec![self.d_state]
        } else {
            vec![self.d_inner, self.d_state]
        }
    }

    /// Bilinear scale `1/√d_inner`.
    pub fn bilinear_scale(&self) -> f64 {
        1.0 / (self.d_inner as f64).sqrt()
    }
}

/// Architecture identity: which recurrence, and (seq-BIM only) which
/// pathways see the modulated input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: VariantKind,
    pub routing: Routing,
}

impl Architecture {
    pub fn new(kind: VariantKind, routing: Routing) -> Result<Self> {
        if routing != Routing::Full && kind != VariantKind::SeqBim {
            return Err(Error::RoutingNotSupported {
                variant: kind.name(),
                routing: routing.name(),
            });
        }
        Ok(Self { kind, routing })
    }

    pub fn plain(kind: VariantKind) -> Self {
        Self {
            kind,
            routing: Routing::Full,
        }
    }

    pub fn label(&self) -> String {
        match self.routing {
            Routing::Full => self.kind.name().to_string(),
            r => format!("{}/{}", self.kind.name(), r.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectivityWeights {
    /// `(rank_or_dt + 2·d_state, d_inner)`: rows split into Δt, B_t, C_t.
    pub x_proj: Tensor,
    /// `(dt_width, rank)` when a low-rank Δt head is configured.
    pub dt_proj: Option<Tensor>,
    /// `(dt_width,)`
    pub dt_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayWeights {
    /// `(d_inner, d_state)` for Standard, `(d_state,)` for coupled variants.
    pub a_log: Tensor,
    /// Skip weight, `(d_inner,)`.
    pub d_skip: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    /// `(2·d_inner, d_model)`: SSM path rows first, then the gate path.
    pub in_proj: Tensor,
    /// `(CONV_WIDTH, d_inner)`, row `k` weights the input `k` steps back.
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    /// `(d_model, d_inner)`
    pub out_proj: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingWeights {
    /// `(d_state, d_inner)`
    pub b_coup: Tensor,
    /// `(d_inner, d_state)`
    pub c_coup: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilinearWeights {
    /// `(d_inner, d_state)`
    pub w_h: Tensor,
    /// `(d_inner, d_inner)`
    pub w_x: Tensor,
    /// `(d_inner, d_inner)`
    pub w_out: Tensor,
}

/// All learnable tensors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub dims: ModelDims,
    pub block: BlockWeights,
    pub selectivity: SelectivityWeights,
    pub decay: DecayWeights,
    pub coupling: Option<CouplingWeights>,
    pub bilinear: Option<BilinearWeights>,
}

impl ModelParams {
    /// All-zero parameters with the shapes `arch` and `dims` require.
    pub fn zeros(arch: Architecture, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let (dm, di, ds) = (dims.d_model, dims.d_inner, dims.d_state);
        let kind = arch.kind;
        let dtw = dims.dt_width(kind);
        let head = dims.dt_rank.unwrap_or(dtw);
        Ok(Self {
            arch,
            dims,
            block: BlockWeights {
                in_proj: Tensor::zeros(&[2 * di, dm]),
                conv_weight: Tensor::zeros(&[CONV_WIDTH, di]),
                conv_bias: Tensor::zeros(&[di]),
                out_proj: Tensor::zeros(&[dm, di]),
            },
            selectivity: SelectivityWeights {
                x_proj: Tensor::zeros(&[head + 2 * ds, di]),
                dt_proj: dims.dt_rank.map(|r| Tensor::zeros(&[dtw, r])),
                dt_bias: Tensor::zeros(&[dtw]),
            },
            decay: DecayWeights {
                a_log: if kind.is_coupled() {
                    Tensor::zeros(&[ds])
                } else {
                    Tensor::zeros(&[di, ds])
                },
                d_skip: Tensor::zeros(&[di]),
            },
            coupling: kind.is_coupled().then(|| CouplingWeights {
                b_coup: Tensor::zeros(&[ds, di]),
                c_coup: Tensor::zeros(&[di, ds]),
            }),
            bilinear: kind.has_bilinear().then(|| BilinearWeights {
                w_h: Tensor::zeros(&[di, ds]),
                w_x: Tensor::zeros(&[di, di]),
                w_out: Tensor::zeros(&[di, di]),
            }),
        })
    }

    /// Named tensors in a fixed order; the SSM-only subset comes first.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("a_log", &self.decay.a_log),
            ("d_skip", &self.decay.d_skip),
            ("x_proj", &self.selectivity.x_proj),
        ];
        if let Some(p) = &self.selectivity.dt_proj {
            out.push(("dt_proj", p));
        }
        out.push(("dt_bias", &self.selectivity.dt_bias));
        if let Some(c) = &self.coupling {
            out.push(("b_coup", &c.b_coup));
            out.push(("c_coup", &c.c_coup));
        }
        if let Some(b) = &self.bilinear {
            out.push(("w_h", &b.w_h));
            out.push(("w_x", &b.w_x));
            out.push(("w_out", &b.w_out));
        }
        out.extend([
            ("in_proj", &self.block.in_proj),
            ("conv_weight", &self.block.conv_weight),
            ("conv_bias", &self.block.conv_bias),
            ("out_proj", &self.block.out_proj),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = vec![
            ("a_log", &mut self.decay.a_log),
            ("d_skip", &mut self.decay.d_skip),
            ("x_proj", &mut self.selectivity.x_proj),
        ];
        if let Some(p) = &mut self.selectivity.dt_proj {
            out.push(("dt_proj", p));
        }
        out.push(("dt_bias", &mut self.selectivity.dt_bias));
        if let Some(c) = &mut self.coupling {
            out.push(("b_coup", &mut c.b_coup));
            out.push(("c_coup", &mut c.c_coup));
        }
        if let Some(b) = &mut self.bilinear {
            out.push(("w_h", &mut b.w_h));
            out.push(("w_x", &mut b.w_x));
            out.push(("w_out", &mut b.w_out));
        }
        out.push(("in_proj", &mut self.block.in_proj));
        out.push(("conv_weight", &mut self.block.conv_weight));
        out.push(("conv_bias", &mut self.block.conv_bias));
        out.push(("out_proj", &mut self.block.out_proj));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Which tensors [`count_params`] includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountMode {
    /// Decay, skip, selectivity, coupling and modulation weights.
    SsmOnly,
    /// Everything, including the block's projections and convolution.
    FullBlock,
}

pub fn count_params(kind: VariantKind, dims: ModelDims, mode: CountMode) -> Result<usize> {
    let params = ModelParams::zeros(Architecture::plain(kind), dims)?;
    let block = match mode {
        CountMode::SsmOnly => params.block_param_count(),
        CountMode::FullBlock => 0,
    };
    Ok(params.num_params() - block)
}

impl ModelParams {
    fn block_param_count(&self) -> usize {
        let b = &self.block;
        b.in_proj.len() + b.conv_weight.len() + b.conv_bias.len() + b.out_proj.len()
    }
}

/// Tape handles for one forward evaluation, plus derived quantities that
/// are shared by every timestep.
#[derive(Clone, Debug)]
pub struct Bound {
    pub arch: Architecture,
    pub dims: ModelDims,
    /// Leaves in [`ModelParams::named`] order.
    pub leaves: Vec<Var>,
    pub in_proj_t: Var,
    pub conv_weight: Var,
    pub conv_bias: Var,
    pub out_proj_t: Var,
    pub x_proj_t: Var,
    pub dt_proj_t: Option<Var>,
    pub dt_bias: Var,
    /// `A = -exp(A_log)`.
    pub a: Var,
    pub d_skip: Var,
    pub b_coup_t: Option<Var>,
    pub c_coup_t: Option<Var>,
    pub w_h_t: Option<Var>,
    pub w_h: Option<Var>,
    pub w_x_t: Option<Var>,
    pub w_out_t: Option<Var>,
    /// `B_coup · W_out`, shared by the GM and p-BIM gates.
    pub coup_out: Option<Var>,
    /// `(B_coup W_out)ᵀ ⊙ W_h`: maps `W_x x` straight to the GM gate term.
    pub gm_gate_map: Option<Var>,
    pub options: ForwardOptions,
}

/// Evaluation choices that do not change the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub scan: ScanMode,
    /// Off by default: when set, p-BIM's `N(x)` is rescaled per sample so
    /// that its ∞-norm never exceeds this bound.
    pub pbim_clamp: Option<f64>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            scan: ScanMode::Sequential,
            pbim_clamp: None,
        }
    }
}

/// How linear recurrences are unrolled over a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    Sequential,
    Parallel,
}

impl ModelParams {
    /// Records every tensor on `tape` (as parameters when `trainable`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool, options: ForwardOptions) -> Result<Bound> {
        let leaves: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bind_leaves(tape, leaves, options)
    }

    /// Builds a [`Bound`] from vars already on `tape`, one per tensor in
    /// [`ModelParams::named`] order. Only shapes are taken from `self`.
    pub fn bind_leaves(&self, tape: &mut Tape, leaves: Vec<Var>, options: ForwardOptions) -> Result<Bound> {
        let named = self.named();
        if leaves.len() != named.len() {
            return Err(Error::Config(format!("{} vars for {} tensors", leaves.len(), named.len())));
        }
        for ((name, t), v) in named.iter().zip(&leaves) {
            if tape.shape(*v) != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: tape.shape(*v).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("counted above");
        let a_log = next();
        let d_skip = next();
        let x_proj = next();
        let dt_proj = self.selectivity.dt_proj.as_ref().map(|_| next());
        let dt_bias = next();
        let coupling = self.coupling.as_ref().map(|_| (next(), next()));
        let bilinear = self.bilinear.as_ref().map(|_| (next(), next(), next()));
        let in_proj = next();
        let conv_weight = next();
        let conv_bias = next();
        let out_proj = next();

        let a_exp = tape.exp(a_log)?;
        let a = tape.neg(a_exp)?;
        let in_proj_t = tape.transpose(in_proj)?;
        let out_proj_t = tape.transpose(out_proj)?;
        let x_proj_t = tape.transpose(x_proj)?;
        let dt_proj_t = dt_proj.map(|p| tape.transpose(p)).transpose()?;
        let (b_coup_t, c_coup_t) = match coupling {
            Some((b, c)) => (Some(tape.transpose(b)?), Some(tape.transpose(c)?)),
            None => (None, None),
        };
        let (mut w_h_t, mut w_h, mut w_x_t, mut w_out_t) = (None, None, None, None);
        let (mut coup_out, mut gm_gate_map) = (None, None);
        if let (Some((wh, wx, wo)), Some((bc, _))) = (bilinear, coupling) {
            w_h = Some(wh);
            w_h_t = Some(tape.transpose(wh)?);
            w_x_t = Some(tape.transpose(wx)?);
            w_out_t = Some(tape.transpose(wo)?);
            match self.arch.kind {
                VariantKind::Gm => {
                    let q = tape.matmul(bc, wo)?;
                    let qt = tape.transpose(q)?;
                    gm_gate_map = Some(tape.mul(qt, wh)?);
                    coup_out = Some(q);
                }
                VariantKind::PBim => coup_out = Some(tape.matmul(bc, wo)?),
                _ => {}
            }
        }
        Ok(Bound {
            arch: self.arch,
            dims: self.dims,
            leaves,
            in_proj_t,
            conv_weight,
            conv_bias,
            out_proj_t,
            x_proj_t,
            dt_proj_t,
            dt_bias,
            a,
            d_skip,
            b_coup_t,
            c_coup_t,
            w_h_t,
            w_h,
            w_x_t,
            w_out_t,
            coup_out,
            gm_gate_map,
            options,
        })
    }
}

/// Selectivity parameters for a batch of rows.
#[derive(Clone, Copy, Debug)]
pub struct Selective {
    /// `softplus(pre + bias)`, `(n, dt_width)`.
    pub dt: Var,
    pub b: Var,
    pub c: Var,
    /// Δt pre-activation before the bias.
    pub dt_pre: Var,
}

/// Δt, B_t and C_t for inputs `x` shaped `(n, d_inner)`.
pub fn selectivity_vars(tape: &mut Tape, bound: &Bound, x: Var) -> Result<Selective> {
    let ds = bound.dims.d_state;
    let proj = tape.matmul(x, bound.x_proj_t)?;
    let head = tape.shape(bound.x_proj_t)[1] - 2 * ds;
    let dt_low = tape.narrow(proj, 1, 0, head)?;
    let dt_pre = match bound.dt_proj_t {
        Some(p) => tape.matmul(dt_low, p)?,
        None => dt_low,
    };
    let biased = tape.add(dt_pre, bound.dt_bias)?;
    let dt = tape.softplus(biased)?;
    let b = tape.narrow(proj, 1, head, ds)?;
    let c = tape.narrow(proj, 1, head + ds, ds)?;
    Ok(Selective { dt, b, c, dt_pre })
}

/// `exp(A · Δt)`, broadcasting per-channel Δt over the state axis for
/// Standard's `(d_inner, d_state)` decay.
pub fn discretize_vars(tape: &mut Tape, a: Var, dt: Var) -> Result<Var> {
    let a_dt = scaled_decay(tape, a, dt)?;
    tape.exp(a_dt)
}

/// `A · Δt` (the log of the discretised decay).
pub fn scaled_decay(tape: &mut Tape, a: Var, dt: Var) -> Result<Var> {
    if tape.shape(a).len() == 2 {
        let n = tape.shape(dt)[0];
        let di = tape.shape(dt)[1];
        let col = tape.reshape(dt, &[n, di, 1])?;
        tape.mul(col, a)
    } else {
        tape.mul(dt, a)
    }
}

/// Plain-tensor selectivity for one input vector.
pub fn selectivity(x: &Tensor, weights: &SelectivityWeights, d_state: usize) -> Result<(Tensor, Tensor, Tensor)> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "selectivity input" });
    }
    let di = x.len();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, di])?);
    let xp = tape.constant(weights.x_proj.clone());
    let proj = tape.linear(xv, xp)?;
    let head = weights.x_proj.shape()[0] - 2 * d_state;
    let dt_low = tape.narrow(proj, 1, 0, head)?;
    let dt_pre = match &weights.dt_proj {
        Some(p) => {
            let pv = tape.constant(p.clone());
            tape.linear(dt_low, pv)?
        }
        None => dt_low,
    };
    let bias = tape.constant(weights.dt_bias.clone());
    let biased = tape.add(dt_pre, bias)?;
    let dt = tape.softplus(biased)?;
    let b = tape.narrow(proj, 1, head, d_state)?;
    let c = tape.narrow(proj, 1, head + d_state, d_state)?;
    let flat = |t: &Tensor| t.clone().reshape(&[t.len()]);
    Ok((flat(tape.value(dt))?, flat(tape.value(b))?, flat(tape.value(c))?))
}

/// `dA = exp(-exp(A_log) · Δt)` for matching shapes, or Standard's
/// `(d_inner, d_state)` A_log with a `(d_inner,)` Δt.
pub fn discretize(a_log: &Tensor, dt: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let al = tape.constant(a_log.clone());
    let e = tape.exp(al)?;
    let a = tape.neg(e)?;
    let out = if a_log.rank() == 2 {
        let dtv = tape.constant(dt.clone().reshape(&[1, dt.len()])?);
        let d = discretize_vars(&mut tape, a, dtv)?;
        let shape = a_log.shape().to_vec();
        tape.reshape(d, &shape)?
    } else {
        let dtv = tape.constant(dt.clone());
        discretize_vars(&mut tape, a, dtv)?
    };
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_analytic_values() {
        let half = discretize(&Tensor::vector(&[0.0]), &Tensor::vector(&[std::f64::consts::LN_2])).unwrap();
        assert!((half.data()[0] - 0.5).abs() < 1e-15);
        let e = discretize(&Tensor::vector(&[0.0]), &Tensor::vector(&[1.0])).unwrap();
        assert!((e.data()[0] - 0.367879).abs() < 1e-6);
        let tiny = discretize(&Tensor::vector(&[0.0]), &Tensor::vector(&[1e-12])).unwrap();
        assert!(tiny.data()[0] > 1.0 - 1e-10 && tiny.data()[0] < 1.0);
    }

    #[test]
    fn standard_discretize_broadcasts_per_channel() {
        let a_log = Tensor::matrix(&[[0.0, 2f64.ln()], [0.0, 0.0]]).unwrap();
        let dt = Tensor::vector(&[1.0, 2.0]);
        let d = discretize(&a_log, &dt).unwrap();
        assert_eq!(d.shape(), &[2, 2]);
        assert!((d.get(&[0, 1]) - (-2.0f64).exp()).abs() < 1e-15);
        assert!((d.get(&[1, 0]) - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_selectivity_gives_ln2() {
        let dims = ModelDims::new(2, 3, 4);
        let p = ModelParams::zeros(Architecture::plain(VariantKind::Coupled), dims).unwrap();
        let (dt, b, c) = selectivity(&Tensor::vector(&[0.3; 8]), &p.selectivity, 3).unwrap();
        assert_eq!(dt.len(), 3);
        assert!(dt.data().iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        assert_eq!(b, Tensor::zeros(&[3]));
        assert_eq!(c, Tensor::zeros(&[3]));
    }

    #[test]
    fn selectivity_rejects_non_finite_input() {
        let dims = ModelDims::new(1, 2, 4);
        let p = ModelParams::zeros(Architecture::plain(VariantKind::Standard), dims).unwrap();
        let x = Tensor::vector(&[0.0, f64::NAN, 0.0, 0.0]);
        assert!(selectivity(&x, &p.selectivity, 2).is_err());
    }

    #[test]
    fn routing_only_for_seqbim() {
        assert!(Architecture::new(VariantKind::Gm, Routing::BcoupOnly).is_err());
        assert!(Architecture::new(VariantKind::SeqBim, Routing::XprojOnly).is_ok());
        assert!(Architecture::new(VariantKind::PBim, Routing::Full).is_ok());
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims::new(2, 0, 50).validate().is_err());
        assert!(ModelDims::new(2, 8, 1).validate().is_err());
        assert_eq!(ModelDims::new(3, 8, 50).d_inner, 12);
    }
}
