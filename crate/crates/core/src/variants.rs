//! The five SSM recurrences.
//!
//! | kind     | state          | what the bilinear product touches        |
//! |----------|----------------|-------------------------------------------|
//! | Standard | `(d_i, d_s)`   | nothing (diagonal per-channel SSM)        |
//! | Coupled  | `(d_s,)`       | nothing (shared state via B/C coupling)   |
//! | SeqBim   | `(d_s,)`       | the input, through `tanh(W_h h)`          |
//! | Gm       | `(d_s,)`       | the sigmoid decay gate, `h` frozen        |
//! | PBim     | `(d_s,)`       | a dense state-transition correction `N(x)`|
//!
//! All functions operate on batches: inputs are `(n, d_inner)` rows and
//! states carry the batch as their leading axis. Every kind except SeqBim is
//! linear in the previous state, so its step is expressed as a
//! [`ScanElement`] and sequences can be unrolled by [`crate::scan`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scan::{self, ScanElement, ScanTree, TapeAlgebra};
use crate::ssm::{self, Bound, ScanMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Standard,
    Coupled,
    SeqBim,
    Gm,
    PBim,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Standard,
        VariantKind::Coupled,
        VariantKind::Gm,
        VariantKind::SeqBim,
        VariantKind::PBim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Standard => "standard",
            VariantKind::Coupled => "coupled",
            VariantKind::SeqBim => "seq-bim",
            VariantKind::Gm => "gm",
            VariantKind::PBim => "p-bim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('-', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    /// Shared `(d_s,)` state with B/C coupling matrices.
    pub fn is_coupled(self) -> bool {
        self != VariantKind::Standard
    }

    pub fn has_bilinear(self) -> bool {
        matches!(self, VariantKind::SeqBim | VariantKind::Gm | VariantKind::PBim)
    }

    /// The previous state enters the update nonlinearly.
    pub fn is_sequential_only(self) -> bool {
        self == VariantKind::SeqBim
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which seq-BIM pathways consume the modulated input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    /// Selectivity projection and B_coup both see `x_mod`.
    #[default]
    Full,
    /// Only the selectivity projection sees `x_mod`.
    XprojOnly,
    /// Only B_coup sees `x_mod`.
    BcoupOnly,
}

impl Routing {
    pub const ALL: [Routing; 3] = [Routing::Full, Routing::XprojOnly, Routing::BcoupOnly];

    pub fn name(self) -> &'static str {
        match self {
            Routing::Full => "full",
            Routing::XprojOnly => "xproj-only",
            Routing::BcoupOnly => "bcoup-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown routing '{s}'")))
    }

    fn modulates_selectivity(self) -> bool {
        matches!(self, Routing::Full | Routing::XprojOnly)
    }

    fn modulates_coupling(self) -> bool {
        matches!(self, Routing::Full | Routing::BcoupOnly)
    }
}

impl std::fmt::Display for Routing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One step of a linear recurrence plus what the readout needs.
#[derive(Clone, Debug)]
pub struct Transition {
    pub element: ScanElement<Var>,
    /// Readout selectivity `C_t`, `(n, d_s)`.
    pub c: Var,
    /// Input of the `D` skip path.
    pub skip_input: Var,
}

fn need(v: Option<Var>, what: &'static str) -> Result<Var> {
    v.ok_or_else(|| Error::Config(format!("parameters lack {what}")))
}

/// Gate and offset of a linear variant for rows `u` shaped `(n, d_inner)`.
pub fn transition(tape: &mut Tape, bound: &Bound, u: Var) -> Result<Transition> {
    let kind = bound.arch.kind;
    let sel = ssm::selectivity_vars(tape, bound, u)?;
    match kind {
        VariantKind::Standard => {
            let n = tape.shape(u)[0];
            let (di, ds) = (bound.dims.d_inner, bound.dims.d_state);
            let gate = ssm::discretize_vars(tape, bound.a, sel.dt)?;
            // Δt⁽ᵈ⁾ · x⁽ᵈ⁾ · B⁽ⁿ⁾
            let dtx = tape.mul(sel.dt, u)?;
            let dtx = tape.reshape(dtx, &[n, di, 1])?;
            let b = tape.reshape(sel.b, &[n, 1, ds])?;
            let offset = tape.mul(dtx, b)?;
            Ok(Transition {
                element: ScanElement::diagonal(gate, offset),
                c: sel.c,
                skip_input: u,
            })
        }
        VariantKind::Coupled => {
            let gate = ssm::discretize_vars(tape, bound.a, sel.dt)?;
            let offset = coupled_offset(tape, bound, sel.dt, sel.b, u)?;
            Ok(Transition {
                element: ScanElement::diagonal(gate, offset),
                c: sel.c,
                skip_input: u,
            })
        }
        VariantKind::Gm => {
            let gate = gm_gate_vars(tape, bound, u, sel.dt, sel.b)?;
            let offset = coupled_offset(tape, bound, sel.dt, sel.b, u)?;
            Ok(Transition {
                element: ScanElement::diagonal(gate, offset),
                c: sel.c,
                skip_input: u,
            })
        }
        VariantKind::PBim => {
            let (gate, offset) = pbim_gate_vars(tape, bound, u, sel.dt, sel.b)?;
            Ok(Transition {
                element: ScanElement::matrix(gate, offset),
                c: sel.c,
                skip_input: u,
            })
        }
        VariantKind::SeqBim => Err(Error::Config(
            "seq-BIM is nonlinear in the state and has no scan transition".into(),
        )),
    }
}

/// `Δt ⊙ B_t ⊙ (B_coup x)`.
fn coupled_offset(tape: &mut Tape, bound: &Bound, dt: Var, b: Var, x: Var) -> Result<Var> {
    let x_state = tape.matmul(x, need(bound.b_coup_t, "B_coup")?)?;
    let dtb = tape.mul(dt, b)?;
    tape.mul(dtb, x_state)
}

/// `σ(A·Δt + Δt·B_t·g·s)` with `g = (W_x x) · [(B_coup W_out)ᵀ ⊙ W_h]`.
fn gm_gate_vars(tape: &mut Tape, bound: &Bound, x: Var, dt: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(x, need(bound.w_x_t, "W_x")?)?;
    let g = tape.matmul(z, need(bound.gm_gate_map, "GM gate map")?)?;
    let a_dt = ssm::scaled_decay(tape, bound.a, dt)?;
    let dtb = tape.mul(dt, b)?;
    let m = tape.mul(dtb, g)?;
    let m = tape.scale(m, bound.dims.bilinear_scale())?;
    let pre = tape.add(a_dt, m)?;
    tape.sigmoid(pre)
}

/// `G = diag(e^{AΔt}) + N(x)` and offset `Δt ⊙ B_t ⊙ (B_coup x)`, where
/// `N = (Δt ⊙ B_t) ⊙_row [s · B_coup W_out diag(W_x x) W_h]`.
fn pbim_gate_vars(tape: &mut Tape, bound: &Bound, x: Var, dt: Var, b: Var) -> Result<(Var, Var)> {
    let (n, di) = (tape.shape(x)[0], bound.dims.d_inner);
    let z = tape.matmul(x, need(bound.w_x_t, "W_x")?)?;
    let z = tape.reshape(z, &[n, di, 1])?;
    let zh = tape.mul(z, need(bound.w_h, "W_h")?)?; // (n, d_i, d_s)
    let bm = tape.matmul(need(bound.coup_out, "B_coup W_out")?, zh)?; // (n, d_s, d_s)
    let bm = tape.scale(bm, bound.dims.bilinear_scale())?;
    let dtb = tape.mul(dt, b)?;
    let mut correction = tape.row_scale(dtb, bm)?;
    if let Some(bound_norm) = bound.options.pbim_clamp {
        correction = clamp_rows(tape, correction, bound_norm)?;
    }
    let decay = ssm::discretize_vars(tape, bound.a, dt)?;
    let diag = tape.diag_embed(decay)?;
    let gate = tape.add(diag, correction)?;
    let offset = coupled_offset(tape, bound, dt, b, x)?;
    Ok((gate, offset))
}

/// Rescales each `(d_s, d_s)` matrix whose ∞-norm exceeds `limit`. The
/// factor is treated as a constant, so no gradient flows through the norm.
fn clamp_rows(tape: &mut Tape, mats: Var, limit: f64) -> Result<Var> {
    let shape = tape.shape(mats).to_vec();
    let (n, s) = (shape[0], shape[1]);
    let vals = tape.value(mats).data();
    let factors: Vec<f64> = (0..n)
        .map(|i| {
            let norm = (0..s)
                .map(|r| vals[i * s * s + r * s..i * s * s + (r + 1) * s].iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        })
        .collect();
    let f = tape.constant(Tensor::new(&[n, 1, 1], factors)?);
    tape.mul(mats, f)
}

/// Output readout for states `h` of any coupled variant or Standard.
pub fn readout(tape: &mut Tape, bound: &Bound, h: Var, c: Var, skip_input: Var) -> Result<Var> {
    let skip = tape.mul(skip_input, bound.d_skip)?;
    let y = if bound.arch.kind.is_coupled() {
        let ch = tape.mul(c, h)?;
        tape.matmul(ch, need(bound.c_coup_t, "C_coup")?)?
    } else {
        let n = tape.shape(h)[0];
        let c3 = tape.reshape(c, &[n, 1, bound.dims.d_state])?;
        let ch = tape.mul(h, c3)?;
        tape.sum_axis(ch, 2)?
    };
    tape.add(y, skip)
}

/// `h_proj = tanh(s · W_h h)` and `x_mod = x + W_out((W_x x) ⊙ h_proj)`.
pub fn seqbim_modulate_vars(tape: &mut Tape, bound: &Bound, h_prev: Var, x: Var) -> Result<(Var, Var)> {
    let wx = tape.matmul(x, need(bound.w_x_t, "W_x")?)?;
    seqbim_modulate_with(tape, bound, h_prev, x, wx)
}

fn seqbim_modulate_with(tape: &mut Tape, bound: &Bound, h_prev: Var, x: Var, wx: Var) -> Result<(Var, Var)> {
    let wh = tape.matmul(h_prev, need(bound.w_h_t, "W_h")?)?;
    let wh = tape.scale(wh, bound.dims.bilinear_scale())?;
    let h_proj = tape.tanh(wh)?;
    let prod = tape.mul(wx, h_proj)?;
    let back = tape.matmul(prod, need(bound.w_out_t, "W_out")?)?;
    let x_mod = tape.add(x, back)?;
    Ok((h_proj, x_mod))
}

fn seqbim_step_with(tape: &mut Tape, bound: &Bound, h_prev: Var, x: Var, wx: Var) -> Result<(Var, Var)> {
    let routing = bound.arch.routing;
    let (_, x_mod) = seqbim_modulate_with(tape, bound, h_prev, x, wx)?;
    let sel_in = if routing.modulates_selectivity() { x_mod } else { x };
    let coup_in = if routing.modulates_coupling() { x_mod } else { x };
    let sel = ssm::selectivity_vars(tape, bound, sel_in)?;
    let decay = ssm::discretize_vars(tape, bound.a, sel.dt)?;
    let offset = coupled_offset(tape, bound, sel.dt, sel.b, coup_in)?;
    let kept = tape.mul(decay, h_prev)?;
    let h = tape.add(kept, offset)?;
    let y = readout(tape, bound, h, sel.c, x_mod)?;
    Ok((h, y))
}

/// One recurrence step for any variant: `(h_prev, x_t) ↦ (h_t, y_t)`.
pub fn step(tape: &mut Tape, bound: &Bound, h_prev: Var, x: Var) -> Result<(Var, Var)> {
    if bound.arch.kind == VariantKind::SeqBim {
        let wx = tape.matmul(x, need(bound.w_x_t, "W_x")?)?;
        return seqbim_step_with(tape, bound, h_prev, x, wx);
    }
    let tr = transition(tape, bound, x)?;
    let h = scan::apply(&mut TapeAlgebra::new(tape), &tr.element, &h_prev)?;
    let y = readout(tape, bound, h, tr.c, tr.skip_input)?;
    Ok((h, y))
}

/// Runs the recurrence over a time-major sequence `u` shaped
/// `(steps·batch, d_inner)` (row `t·batch + b`), returning outputs in the
/// same layout and the final state.
pub fn sequence(tape: &mut Tape, bound: &Bound, u: Var, batch: usize, h0: Var) -> Result<(Var, Var)> {
    let rows = tape.shape(u)[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::InvalidShape {
            op: "sequence",
            reason: format!("{rows} rows not divisible by batch {batch}"),
        });
    }
    let steps = rows / batch;
    if bound.arch.kind == VariantKind::SeqBim {
        let wx_all = tape.matmul(u, need(bound.w_x_t, "W_x")?)?;
        let mut h = h0;
        let mut ys = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.narrow(u, 0, t * batch, batch)?;
            let wx = tape.narrow(wx_all, 0, t * batch, batch)?;
            let (hn, y) = seqbim_step_with(tape, bound, h, x, wx)?;
            h = hn;
            ys.push(y);
        }
        let y = tape.concat(&ys, 0)?;
        return Ok((y, h));
    }

    let tr = transition(tape, bound, u)?;
    let (gate_all, is_matrix) = match tr.element.gate {
        scan::Gate::Diagonal(g) => (g, false),
        scan::Gate::Matrix(g) => (g, true),
    };
    let mut elements = Vec::with_capacity(steps);
    for t in 0..steps {
        let g = tape.narrow(gate_all, 0, t * batch, batch)?;
        let b = tape.narrow(tr.element.offset, 0, t * batch, batch)?;
        elements.push(if is_matrix {
            ScanElement::matrix(g, b)
        } else {
            ScanElement::diagonal(g, b)
        });
    }
    let mut alg = TapeAlgebra::new(tape);
    let states = match bound.options.scan {
        ScanMode::Sequential => scan::sequential_scan(&mut alg, &elements, &h0)?,
        ScanMode::Parallel => scan::parallel_scan(&mut alg, &elements, &h0, ScanTree::Balanced)?,
    };
    let last = *states.last().expect("non-empty");
    let h_all = tape.concat(&states, 0)?;
    let y = readout(tape, bound, h_all, tr.c, tr.skip_input)?;
    Ok((y, last))
}

/// Zero state for a batch of `batch` sequences.
pub fn zero_state(bound: &Bound, batch: usize) -> Tensor {
    let mut shape = vec![batch];
    shape.extend(bound.dims.state_shape(bound.arch.kind));
    Tensor::zeros(&shape)
}

// ---- plain-tensor conveniences over single samples ----------------------

fn with_tape<T>(
    params: &crate::ssm::ModelParams,
    f: impl FnOnce(&mut Tape, &Bound) -> Result<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false, Default::default())?;
    f(&mut tape, &bound)
}

fn row(tape: &mut Tape, v: &Tensor) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(v.shape());
    Ok(tape.constant(v.clone().reshape(&shape)?))
}

fn unrow(tape: &Tape, v: Var) -> Result<Tensor> {
    let t = tape.value(v).clone();
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

/// Single-sample step: `h_prev` has the per-sample state shape and `x` is
/// `(d_inner,)`. Returns `(h_t, y_t)`.
pub fn step_tensor(params: &crate::ssm::ModelParams, h_prev: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    with_tape(params, |tape, bound| {
        let h = row(tape, h_prev)?;
        let xv = row(tape, x)?;
        let (h, y) = step(tape, bound, h, xv)?;
        Ok((unrow(tape, h)?, unrow(tape, y)?))
    })
}

/// `(h_proj, x_mod)` of seq-BIM's input modulation for one sample.
pub fn seqbim_modulate(params: &crate::ssm::ModelParams, h_prev: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    with_tape(params, |tape, bound| {
        let h = row(tape, h_prev)?;
        let xv = row(tape, x)?;
        let (hp, xm) = seqbim_modulate_vars(tape, bound, h, xv)?;
        Ok((unrow(tape, hp)?, unrow(tape, xm)?))
    })
}

/// GM's sigmoid gate for one sample (Δt and B_t from the raw input).
pub fn gm_gate(params: &crate::ssm::ModelParams, x: &Tensor) -> Result<Tensor> {
    with_tape(params, |tape, bound| {
        let xv = row(tape, x)?;
        let sel = ssm::selectivity_vars(tape, bound, xv)?;
        let g = gm_gate_vars(tape, bound, xv, sel.dt, sel.b)?;
        unrow(tape, g)
    })
}

/// p-BIM's matrix gate `G` and offset for one sample.
pub fn pbim_gate(params: &crate::ssm::ModelParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    with_tape(params, |tape, bound| {
        let xv = row(tape, x)?;
        let sel = ssm::selectivity_vars(tape, bound, xv)?;
        let (g, b) = pbim_gate_vars(tape, bound, xv, sel.dt, sel.b)?;
        Ok((unrow(tape, g)?, unrow(tape, b)?))
    })
}

/// Residual of the linearisation identity behind GM.
///
/// With `tanh` removed, `x_mod = x + M(x) h` where
/// `M(x) = s · W_out diag(W_x x) W_h`. Substituting `x_mod` into the
/// coupled state update must equal the gate form
/// `dA ⊙ h + (Δt ⊙ B_t) ⊙_row [B_coup M(x)] h + Δt ⊙ B_t ⊙ B_coup x`.
/// Both sides are evaluated directly (Δt, B_t from the raw input) and the
/// largest absolute difference is returned.
pub fn gm_linearization_identity(params: &crate::ssm::ModelParams, x: &Tensor, h_prev: &Tensor) -> Result<f64> {
    let b = params
        .bilinear
        .as_ref()
        .ok_or_else(|| Error::Config("identity needs bilinear weights".into()))?;
    let c = params
        .coupling
        .as_ref()
        .ok_or_else(|| Error::Config("identity needs coupling weights".into()))?;
    let dims = params.dims;
    let (di, ds) = (dims.d_inner, dims.d_state);
    let s = dims.bilinear_scale();
    let (dt, bt, _) = ssm::selectivity(x, &params.selectivity, ds)?;
    let decay = ssm::discretize(&params.decay.a_log, &dt)?;

    let matvec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
        let (r, k) = (m.shape()[0], m.shape()[1]);
        (0..r).map(|i| (0..k).map(|j| m.data()[i * k + j] * v[j]).sum()).collect()
    };

    // substitution form: x_mod = x + s W_out((W_x x) ⊙ (W_h h))
    let wx = matvec(&b.w_x, x.data());
    let wh = matvec(&b.w_h, h_prev.data());
    let prod: Vec<f64> = wx.iter().zip(&wh).map(|(p, q)| p * q * s).collect();
    let back = matvec(&b.w_out, &prod);
    let x_mod: Vec<f64> = x.data().iter().zip(&back).map(|(p, q)| p + q).collect();
    let x_state = matvec(&c.b_coup, &x_mod);
    let subst: Vec<f64> = (0..ds)
        .map(|n| decay.data()[n] * h_prev.data()[n] + dt.data()[n] * bt.data()[n] * x_state[n])
        .collect();

    // gate form: M(x) = s W_out diag(W_x x) W_h, G = B_coup M
    let mut m = vec![0.0; di * ds];
    for r in 0..di {
        for col in 0..ds {
            m[r * ds + col] = s * (0..di)
                .map(|k| b.w_out.data()[r * di + k] * wx[k] * b.w_h.data()[k * ds + col])
                .sum::<f64>();
        }
    }
    let m = Tensor::new(&[di, ds], m)?;
    let mut residual: f64 = 0.0;
    let bx = matvec(&c.b_coup, x.data());
    for n in 0..ds {
        let g_row: Vec<f64> = (0..ds)
            .map(|col| (0..di).map(|k| c.b_coup.data()[n * di + k] * m.data()[k * ds + col]).sum())
            .collect();
        let u = dt.data()[n] * bt.data()[n];
        let coupled: f64 = g_row.iter().zip(h_prev.data()).map(|(g, h)| g * h).sum();
        let gate_form = decay.data()[n] * h_prev.data()[n] + u * coupled + u * bx[n];
        residual = residual.max((gate_form - subst[n]).abs());
    }
    Ok(residual)
}
