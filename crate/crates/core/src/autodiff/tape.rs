//! Flat Wengert tape: every primitive appends one node holding its value
//! and enough context to compute exact local partials on the way back.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    BroadcastTo(Var),
    Reshape(Var),
    Narrow { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    DiagEmbed(Var),
    RowScale(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// A tape belongs to a single thread of execution. Values are never
/// mutated after recording, so `backward` can be called repeatedly.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exactly zero when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Result<Tensor> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(Error::ForeignVar);
        }
        Ok(self.grads[var.index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.index])))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.check(var).expect("variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape == self.id && var.index < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.index].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    // ---- elementwise, broadcasting ------------------------------------

    /// Broadcasting sum (numpy rules, aligned from the trailing axis).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_binary("add", self.val(a)?, self.val(b)?, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_binary("sub", self.val(a)?, self.val(b)?, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_binary("mul", self.val(a)?, self.val(b)?, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies by a constant that is not itself differentiated.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.val(a)?.map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product; rank-3 operands carry a leading batch axis and a
    /// rank-2 operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.val(a)?, self.val(b)?)?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose_last(self.val(a)?)?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// `x · wᵀ` for a weight stored as `(out_features, in_features)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    // ---- unary nonlinearities -----------------------------------------

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a)?.map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a)?.map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a)?.map(tensor::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// `log1p(exp(-|x|)) + max(x, 0)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a)?.map(tensor::softplus);
        self.push("softplus", out, Op::Softplus(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a)?.map(tensor::silu);
        self.push("silu", out, Op::Silu(a), &[a])
    }

    // ---- reductions and shape plumbing --------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a)?.sum());
        self.push("sum", out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a)?.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::sum_axis(self.val(a)?, axis)?;
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.val(a)?;
        let target = tensor::broadcast_shape("broadcast_to", src.shape(), shape)?;
        if target != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = tensor::broadcast_binary("broadcast_to", src, &Tensor::zeros(shape), |x, _| x)?;
        self.push("broadcast_to", out, Op::BroadcastTo(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a)?.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = tensor::narrow(self.val(a)?, axis, start, len)?;
        self.push("narrow", out, Op::Narrow { src: a, axis, start }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let mut vals = Vec::with_capacity(parts.len());
            for &p in parts {
                vals.push(self.val(p)?);
            }
            tensor::concat(&vals, axis)?
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// `(..., n)` to `(..., n, n)` diagonal matrices.
    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let out = tensor::diag_embed(self.val(a)?)?;
        self.push("diag_embed", out, Op::DiagEmbed(a), &[a])
    }

    /// `out[..., n, m] = u[..., n] · mat[..., n, m]`.
    pub fn row_scale(&mut self, u: Var, mat: Var) -> Result<Var> {
        let out = tensor::row_scale(self.val(u)?, self.val(mat)?)?;
        self.push("row_scale", out, Op::RowScale(u, mat), &[u, mat])
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates `d loss / d node` to every node that can reach `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.index].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.index + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.index] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if let Op::Narrow { src, axis, start } = node.op {
                if self.nodes[src.index].needs_grad {
                    let acc = grads[src.index]
                        .get_or_insert_with(|| Tensor::zeros(self.nodes[src.index].value.shape()));
                    tensor::narrow_scatter(acc, &g, axis, start);
                }
                grads[i] = Some(g);
                continue;
            }
            for (target, contrib) in self.local_backward(node, &g) {
                if !self.nodes[target.index].needs_grad {
                    continue;
                }
                match &mut grads[target.index] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let v = |x: Var| &self.nodes[x.index].value;
        let y = &node.value;
        let elementwise = |f: &dyn Fn(usize) -> f64| Tensor::from_fn(g.shape(), |i| g.data()[i] * f(i));
        match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, tensor::reduce_to_shape(g.clone(), v(*a).shape())),
                (*b, tensor::reduce_to_shape(g.clone(), v(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, tensor::reduce_to_shape(g.clone(), v(*a).shape())),
                (*b, tensor::reduce_to_shape(g.map(|x| -x), v(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                tensor::for_each_broadcast(g.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    ga[o] = g.data()[o] * vb.data()[ib];
                    gb[o] = g.data()[o] * va.data()[ia];
                });
                let ga = Tensor::new(g.shape(), ga).expect("shape");
                let gb = Tensor::new(g.shape(), gb).expect("shape");
                vec![
                    (*a, tensor::reduce_to_shape(ga, va.shape())),
                    (*b, tensor::reduce_to_shape(gb, vb.shape())),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Matmul(a, b) => {
                let (ga, gb) = tensor::matmul_backward(v(*a), v(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, tensor::transpose_last(g).expect("rank checked"))],
            Op::Tanh(a) => vec![(*a, elementwise(&|i| 1.0 - y.data()[i] * y.data()[i]))],
            Op::Exp(a) => vec![(*a, elementwise(&|i| y.data()[i]))],
            Op::Sigmoid(a) => vec![(*a, elementwise(&|i| y.data()[i] * (1.0 - y.data()[i])))],
            Op::Softplus(a) => {
                let x = v(*a);
                vec![(*a, elementwise(&|i| tensor::sigmoid(x.data()[i])))]
            }
            Op::Silu(a) => {
                let x = v(*a);
                vec![(
                    *a,
                    elementwise(&|i| {
                        let s = tensor::sigmoid(x.data()[i]);
                        s * (1.0 + x.data()[i] * (1.0 - s))
                    }),
                )]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(v(*a).shape(), g.data()[0]))],
            Op::SumAxis(a, axis) => vec![(*a, tensor::unsum_axis(g, v(*a).shape(), *axis))],
            Op::BroadcastTo(a) => vec![(*a, tensor::reduce_to_shape(g.clone(), v(*a).shape()))],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(v(*a).shape()).expect("same numel"))],
            Op::Narrow { .. } => unreachable!("narrow is accumulated in place"),
            Op::Concat { parts, axis } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let len = v(p).shape()[*axis];
                    out.push((p, tensor::narrow(g, *axis, start, len).expect("in range")));
                    start += len;
                }
                out
            }
            Op::DiagEmbed(a) => vec![(*a, tensor::diag_extract(g))],
            Op::RowScale(u, mat) => {
                let (vu, vm) = (v(*u), v(*mat));
                let m = *vm.shape().last().expect("rank >= 2");
                let mut gu = vec![0.0; vu.len()];
                for (i, (gv, mv)) in g.data().iter().zip(vm.data()).enumerate() {
                    gu[i / m] += gv * mv;
                }
                let gm = Tensor::from_fn(vm.shape(), |i| g.data()[i] * vu.data()[i / m]);
                vec![(*u, Tensor::new(vu.shape(), gu).expect("shape")), (*mat, gm)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_values_at_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let sp = t.softplus(z).unwrap();
        let sg = t.sigmoid(z).unwrap();
        let th = t.tanh(z).unwrap();
        assert!((t.value(sp).item().unwrap() - 0.693147).abs() < 1e-6);
        assert_eq!(t.value(sg).item().unwrap(), 0.5);
        assert_eq!(t.value(th).item().unwrap(), 0.0);

        let x = t.param(Tensor::scalar(0.0));
        let y = t.tanh(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn linear_map_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::eye(2));
        let x = t.param(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let wx = t.matmul(w, x).unwrap();
        let loss = t.sum(wx).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn sigmoid_product_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(0.0));
        let b = t.param(Tensor::scalar(2.0));
        let s = t.sigmoid(a).unwrap();
        let loss = t.mul(s, b).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap().item().unwrap(), 0.5);
        assert_eq!(g.wrt(b).unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn unreachable_nodes_get_exact_zero() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(&[1.0, 2.0]));
        let b = t.param(Tensor::vector(&[3.0, 4.0]));
        let _unused = t.exp(b).unwrap();
        let loss = t.sum(a).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(b).unwrap(), Tensor::zeros(&[2]));
    }

    #[test]
    fn rejects_non_scalar_and_foreign_loss() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(Error::NotScalar(_))));
        let mut other = Tape::new();
        let b = other.param(Tensor::scalar(1.0));
        assert!(matches!(t.backward(b), Err(Error::ForeignVar)));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(a), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2, 3]));
        let b = t.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(t.matmul(a, a).is_err());
    }
}
