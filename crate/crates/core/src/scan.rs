//! Associative scans for linear recurrences `h_t = G_t h_{t-1} + b_t`.
//!
//! An element `(G, b)` is an affine map on the state. Composition
//! `(G₂, b₂) ∘ (G₁, b₁) = (G₂G₁, G₂b₁ + b₂)` is associative, so prefixes
//! can be evaluated with a tree of depth `O(log L)`. Gates are either
//! diagonal (stored as a vector shaped like the state) or dense matrices
//! acting on the last state axis.
//!
//! The scans are written against [`ScanAlgebra`], so the same code runs on
//! plain [`Tensor`]s and on tape [`Var`]s (where gradients flow through the
//! combiner primitives).

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Gate<V> {
    /// Elementwise gate, same shape as the state.
    Diagonal(V),
    /// `(..., S, S)` matrix applied to a `(..., S)` state.
    Matrix(V),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<V> {
    pub gate: Gate<V>,
    pub offset: V,
}

impl<V> ScanElement<V> {
    pub fn diagonal(gate: V, offset: V) -> Self {
        Self {
            gate: Gate::Diagonal(gate),
            offset,
        }
    }

    pub fn matrix(gate: V, offset: V) -> Self {
        Self {
            gate: Gate::Matrix(gate),
            offset,
        }
    }
}

/// Arithmetic the scans need from a value type.
pub trait ScanAlgebra {
    type Value: Clone;

    fn shape(&self, v: &Self::Value) -> Vec<usize>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Batched `(..., S, S) · (..., S, S)`.
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Batched `(..., S, S) · (..., S)`.
    fn matvec(&mut self, a: &Self::Value, x: &Self::Value) -> Result<Self::Value>;
    fn ones(&mut self, shape: &[usize]) -> Self::Value;
    fn zeros(&mut self, shape: &[usize]) -> Self::Value;
    /// Batch of identity matrices shaped `(..., S, S)`.
    fn eye(&mut self, shape: &[usize]) -> Self::Value;
}

/// Pure evaluation on tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct TensorAlgebra;

impl ScanAlgebra for TensorAlgebra {
    type Value = Tensor;

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::broadcast_binary("add", a, b, |x, y| x + y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::broadcast_binary("mul", a, b, |x, y| x * y)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::matmul(a, b)
    }

    fn matvec(&mut self, a: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut col = x.shape().to_vec();
        col.push(1);
        let y = kernels::matmul(a, &x.clone().reshape(&col)?)?;
        y.reshape(x.shape())
    }

    fn ones(&mut self, shape: &[usize]) -> Tensor {
        Tensor::ones(shape)
    }

    fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    fn eye(&mut self, shape: &[usize]) -> Tensor {
        eye_batch(shape)
    }
}

fn eye_batch(shape: &[usize]) -> Tensor {
    let s = shape[shape.len() - 1];
    let mut t = Tensor::zeros(shape);
    let outer = t.len() / (s * s).max(1);
    for o in 0..outer {
        for i in 0..s {
            t.data_mut()[o * s * s + i * s + i] = 1.0;
        }
    }
    t
}

fn tape_matvec(tape: &mut Tape, a: Var, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let mut col = xs.clone();
    col.push(1);
    let xc = tape.reshape(x, &col)?;
    let y = tape.matmul(a, xc)?;
    let ys = tape.shape(y).to_vec();
    tape.reshape(y, &ys[..ys.len() - 1])
}

/// Differentiable evaluation: every combiner primitive lands on the tape.
pub struct TapeAlgebra<'a> {
    pub tape: &'a mut Tape,
}

impl<'a> TapeAlgebra<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        Self { tape }
    }
}

impl ScanAlgebra for TapeAlgebra<'_> {
    type Value = Var;

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.tape.shape(*v).to_vec()
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.mul(*a, *b)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul(*a, *b)
    }

    fn matvec(&mut self, a: &Var, x: &Var) -> Result<Var> {
        tape_matvec(self.tape, *a, *x)
    }

    fn ones(&mut self, shape: &[usize]) -> Var {
        self.tape.constant(Tensor::ones(shape))
    }

    fn zeros(&mut self, shape: &[usize]) -> Var {
        self.tape.constant(Tensor::zeros(shape))
    }

    fn eye(&mut self, shape: &[usize]) -> Var {
        self.tape.constant(eye_batch(shape))
    }
}

/// Internal association pattern of the parallel scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanTree {
    /// Blelloch up-sweep/down-sweep over a power-of-two padded array.
    #[default]
    Balanced,
    /// Hillis–Steele doubling: log L rounds, each combining at distance 2^k.
    Doubling,
    /// Left-leaning chain; same algebra, linear depth. Used to check that
    /// results do not depend on tree shape.
    Skewed,
}

fn check_kind<A: ScanAlgebra>(alg: &A, elements: &[ScanElement<A::Value>]) -> Result<bool> {
    let first = elements.first().ok_or(Error::EmptyScan)?;
    let is_matrix = matches!(first.gate, Gate::Matrix(_));
    let offset_shape = alg.shape(&first.offset);
    let gate_shape = |e: &ScanElement<A::Value>| match &e.gate {
        Gate::Diagonal(g) | Gate::Matrix(g) => alg.shape(g),
    };
    let expected_gate = gate_shape(first);
    let gate_ok = if is_matrix {
        let s = *offset_shape.last().ok_or(Error::ScanKindMismatch)?;
        expected_gate.len() == offset_shape.len() + 1
            && expected_gate[..offset_shape.len()] == offset_shape[..]
            && expected_gate[offset_shape.len()] == s
    } else {
        expected_gate == offset_shape
    };
    if !gate_ok {
        return Err(Error::ScanKindMismatch);
    }
    for e in elements {
        if matches!(e.gate, Gate::Matrix(_)) != is_matrix
            || gate_shape(e) != expected_gate
            || alg.shape(&e.offset) != offset_shape
        {
            return Err(Error::ScanKindMismatch);
        }
    }
    Ok(is_matrix)
}

/// `later ∘ earlier`: apply `earlier` first, then `later`.
pub fn combine<A: ScanAlgebra>(
    alg: &mut A,
    later: &ScanElement<A::Value>,
    earlier: &ScanElement<A::Value>,
) -> Result<ScanElement<A::Value>> {
    match (&later.gate, &earlier.gate) {
        (Gate::Diagonal(g2), Gate::Diagonal(g1)) => {
            if alg.shape(g2) != alg.shape(g1) || alg.shape(&later.offset) != alg.shape(&earlier.offset) {
                return Err(Error::ScanKindMismatch);
            }
            let gate = alg.mul(g2, g1)?;
            let moved = alg.mul(g2, &earlier.offset)?;
            let offset = alg.add(&moved, &later.offset)?;
            Ok(ScanElement::diagonal(gate, offset))
        }
        (Gate::Matrix(g2), Gate::Matrix(g1)) => {
            if alg.shape(g2) != alg.shape(g1) || alg.shape(&later.offset) != alg.shape(&earlier.offset) {
                return Err(Error::ScanKindMismatch);
            }
            let gate = alg.matmul(g2, g1)?;
            let moved = alg.matvec(g2, &earlier.offset)?;
            let offset = alg.add(&moved, &later.offset)?;
            Ok(ScanElement::matrix(gate, offset))
        }
        _ => Err(Error::ScanKindMismatch),
    }
}

/// `gate · h + offset`.
pub fn apply<A: ScanAlgebra>(alg: &mut A, e: &ScanElement<A::Value>, h: &A::Value) -> Result<A::Value> {
    let moved = match &e.gate {
        Gate::Diagonal(g) => alg.mul(g, h)?,
        Gate::Matrix(g) => alg.matvec(g, h)?,
    };
    alg.add(&moved, &e.offset)
}

/// The identity map for elements shaped like `like`.
pub fn identity<A: ScanAlgebra>(alg: &mut A, like: &ScanElement<A::Value>) -> ScanElement<A::Value> {
    let offset = alg.zeros(&alg.shape(&like.offset));
    match &like.gate {
        Gate::Diagonal(g) => {
            let shape = alg.shape(g);
            ScanElement::diagonal(alg.ones(&shape), offset)
        }
        Gate::Matrix(g) => {
            let shape = alg.shape(g);
            ScanElement::matrix(alg.eye(&shape), offset)
        }
    }
}

/// Left-to-right recurrence; the reference every other scan is checked against.
pub fn sequential_scan<A: ScanAlgebra>(
    alg: &mut A,
    elements: &[ScanElement<A::Value>],
    h0: &A::Value,
) -> Result<Vec<A::Value>> {
    check_kind(alg, elements)?;
    if alg.shape(h0) != alg.shape(&elements[0].offset) {
        return Err(Error::ScanKindMismatch);
    }
    let mut states = Vec::with_capacity(elements.len());
    let mut h = h0.clone();
    for e in elements {
        h = apply(alg, e, &h)?;
        states.push(h.clone());
    }
    Ok(states)
}

/// Prefix evaluation by tree reduction; `states[t]` is the composition of
/// elements `0..=t` applied to `h0`.
///
/// `h0` is folded into the first element's offset, so every state is the
/// offset of the corresponding inclusive prefix.
pub fn parallel_scan<A: ScanAlgebra>(
    alg: &mut A,
    elements: &[ScanElement<A::Value>],
    h0: &A::Value,
    tree: ScanTree,
) -> Result<Vec<A::Value>> {
    check_kind(alg, elements)?;
    if alg.shape(h0) != alg.shape(&elements[0].offset) {
        return Err(Error::ScanKindMismatch);
    }
    let mut items = elements.to_vec();
    let first_offset = apply(alg, &items[0], h0)?;
    items[0].offset = first_offset;

    let prefixes = match tree {
        ScanTree::Balanced => blelloch(alg, items)?,
        ScanTree::Doubling => doubling(alg, items)?,
        ScanTree::Skewed => {
            let mut out: Vec<ScanElement<A::Value>> = Vec::with_capacity(items.len());
            for e in items {
                let next = match out.last() {
                    Some(prev) => combine(alg, &e, prev)?,
                    None => e,
                };
                out.push(next);
            }
            out
        }
    };
    Ok(prefixes.into_iter().map(|e| e.offset).collect())
}

fn blelloch<A: ScanAlgebra>(
    alg: &mut A,
    items: Vec<ScanElement<A::Value>>,
) -> Result<Vec<ScanElement<A::Value>>> {
    let len = items.len();
    let n = len.next_power_of_two();
    let id = identity(alg, &items[0]);
    let mut tree = items.clone();
    tree.resize(n, id.clone());

    // up-sweep: tree[right] = tree[right] ∘ tree[left]
    let mut stride = 1;
    while stride < n {
        for i in (0..n).step_by(2 * stride) {
            let (left, right) = (i + stride - 1, i + 2 * stride - 1);
            tree[right] = combine(alg, &tree[right], &tree[left])?;
        }
        stride *= 2;
    }

    // down-sweep to exclusive prefixes
    tree[n - 1] = id;
    let mut stride = n / 2;
    while stride >= 1 {
        for i in (0..n).step_by(2 * stride) {
            let (left, right) = (i + stride - 1, i + 2 * stride - 1);
            let left_total = tree[left].clone();
            tree[left] = tree[right].clone();
            tree[right] = combine(alg, &left_total, &tree[right])?;
        }
        stride /= 2;
    }

    items
        .iter()
        .zip(tree)
        .take(len)
        .map(|(e, excl)| combine(alg, e, &excl))
        .collect()
}

fn doubling<A: ScanAlgebra>(
    alg: &mut A,
    items: Vec<ScanElement<A::Value>>,
) -> Result<Vec<ScanElement<A::Value>>> {
    let mut cur = items;
    let mut dist = 1;
    while dist < cur.len() {
        let mut next = cur.clone();
        for i in dist..cur.len() {
            next[i] = combine(alg, &cur[i], &cur[i - dist])?;
        }
        cur = next;
        dist *= 2;
    }
    Ok(cur)
}
