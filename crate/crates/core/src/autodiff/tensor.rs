//! Dense row-major `f64` arrays and the raw kernels the tape builds on.

use crate::error::{Error, Result};

/// A dense row-major array of `f64` values.
///
/// A shape of `[]` denotes a scalar holding one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a rank-2 tensor from nested rows.
    pub fn matrix<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::InvalidShape {
                    op: "matrix",
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for dim {n}");
                acc * n + i
            })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; `f64::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Numpy-style broadcast of two shapes, aligned from the right.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when viewed inside `out` (zero on broadcast dims).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { stride };
        stride *= shape[i];
    }
    strides
}

/// `shape` matches the trailing dims of `out` once leading ones are dropped.
fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = shape.iter().take_while(|&&d| d == 1).count();
        &shape[lead..]
    };
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed
}

/// Visits every output element with the offsets of both broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    if na == n && is_suffix(b, out) {
        (0..n).for_each(|i| f(i, i, i % nb.max(1)));
        return;
    }
    if nb == n && is_suffix(a, out) {
        (0..n).for_each(|i| f(i, i % na.max(1), i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary map under broadcasting.
pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(&shape, &a.shape, &b.shape, |o, ia, ib| {
        data[o] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor { shape, data })
}

/// Sums `grad` (shaped like a broadcast output) back down to `target`.
pub(crate) fn reduce_to_shape(grad: Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad;
    }
    let mut acc = vec![0.0; target.iter().product()];
    let out = grad.shape.clone();
    for_each_broadcast(&out, &out, target, |o, _, it| {
        acc[it] += grad.data[o];
    });
    Tensor {
        shape: target.to_vec(),
        data: acc,
    }
}

/// Batch dimensions of a matmul operand: rank 2 is unbatched.
fn split_matrix(op: &'static str, shape: &[usize]) -> Result<(Option<usize>, usize, usize)> {
    match *shape {
        [m, n] => Ok((None, m, n)),
        [b, m, n] => Ok((Some(b), m, n)),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("expected rank 2 or 3, got {shape:?}"),
        }),
    }
}

/// `c += op(a) · op(b)` for one matrix pair, with optional transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // b stored as (n, k)
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (x, y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            // a stored as (k, m)
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

/// Matrix product with an optional shared batch dimension.
///
/// Accepts `(m,k)·(k,n)`, `(b,m,k)·(b,k,n)`, and mixed rank 2/3 operands
/// where the rank-2 side is shared across the batch.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = split_matrix("matmul", &a.shape)?;
    let (bb, k2, n) = split_matrix("matmul", &b.shape)?;
    let batch = match (ba, bb) {
        (Some(x), Some(y)) if x != y => None,
        (x, y) => Some(x.or(y)),
    };
    let batch = match batch {
        Some(bt) if k == k2 => bt,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    };
    let nb = batch.unwrap_or(1);
    let mut data = vec![0.0; nb * m * n];
    for t in 0..nb {
        let aoff = if ba.is_some() { t * m * k } else { 0 };
        let boff = if bb.is_some() { t * k * n } else { 0 };
        gemm_acc(
            &a.data[aoff..aoff + m * k],
            &b.data[boff..boff + k * n],
            &mut data[t * m * n..(t + 1) * m * n],
            m,
            k,
            n,
            false,
            false,
        );
    }
    let shape = match batch {
        Some(bt) => vec![bt, m, n],
        None => vec![m, n],
    };
    Ok(Tensor { shape, data })
}

/// Gradients of `c = a · b` given upstream `g` (shaped like `c`).
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (ba, m, k) = split_matrix("matmul", &a.shape).expect("checked in forward");
    let (bb, _, n) = split_matrix("matmul", &b.shape).expect("checked in forward");
    let nb = ba.or(bb).unwrap_or(1);
    let mut ga = vec![0.0; a.data.len()];
    let mut gb = vec![0.0; b.data.len()];
    for t in 0..nb {
        let aoff = if ba.is_some() { t * m * k } else { 0 };
        let boff = if bb.is_some() { t * k * n } else { 0 };
        let gt = &g.data[t * m * n..(t + 1) * m * n];
        // dA = G · Bᵀ
        gemm_acc(
            gt,
            &b.data[boff..boff + k * n],
            &mut ga[aoff..aoff + m * k],
            m,
            n,
            k,
            false,
            true,
        );
        // dB = Aᵀ · G
        gemm_acc(
            &a.data[aoff..aoff + m * k],
            gt,
            &mut gb[boff..boff + k * n],
            k,
            m,
            n,
            true,
            false,
        );
    }
    (
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: b.shape.clone(),
            data: gb,
        },
    )
}

/// Swaps the last two axes.
pub(crate) fn transpose_last(t: &Tensor) -> Result<Tensor> {
    let r = t.shape.len();
    if r < 2 {
        return Err(Error::InvalidShape {
            op: "transpose",
            reason: format!("rank {r} < 2"),
        });
    }
    let (m, n) = (t.shape[r - 2], t.shape[r - 1]);
    let outer: usize = t.shape[..r - 2].iter().product();
    let mut data = vec![0.0; t.data.len()];
    for o in 0..outer {
        let base = o * m * n;
        for i in 0..m {
            for j in 0..n {
                data[base + j * m + i] = t.data[base + i * n + j];
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor { shape, data })
}

/// `(outer, axis_len, inner)` factorisation around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.shape.len() || start + len > t.shape[axis] {
        return Err(Error::InvalidShape {
            op: "narrow",
            reason: format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape),
        });
    }
    let (outer, n, inner) = axis_split(&t.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        data.extend_from_slice(&t.data[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

/// Adds `g` (shaped like a narrowed slice) into `acc` at `start` along `axis`.
pub(crate) fn narrow_scatter(acc: &mut Tensor, g: &Tensor, axis: usize, start: usize) {
    let (outer, n, inner) = axis_split(&acc.shape, axis);
    let len = g.shape[axis];
    for o in 0..outer {
        let dst = o * n * inner + start * inner;
        let src = o * len * inner;
        for (d, s) in acc.data[dst..dst + len * inner]
            .iter_mut()
            .zip(&g.data[src..src + len * inner])
        {
            *d += s;
        }
    }
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::InvalidShape {
        op: "concat",
        reason: "no operands".into(),
    })?;
    if axis >= first.shape.len() {
        return Err(Error::InvalidShape {
            op: "concat",
            reason: format!("axis {axis} on rank {}", first.shape.len()),
        });
    }
    let mut total = 0;
    for p in parts {
        let same_rest = p.shape.len() == first.shape.len()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !same_rest {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        total += p.shape[axis];
    }
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

pub(crate) fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.shape.len() {
        return Err(Error::InvalidShape {
            op: "sum_axis",
            reason: format!("axis {axis} on rank {}", t.shape.len()),
        });
    }
    let (outer, n, inner) = axis_split(&t.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let src = &t.data[(o * n + i) * inner..(o * n + i + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data })
}

/// Re-expands a gradient of `sum_axis` along the removed axis.
pub(crate) fn unsum_axis(g: &Tensor, shape: &[usize], axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            data.extend_from_slice(&g.data[o * inner..(o + 1) * inner]);
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// `(..., n)` to `(..., n, n)` with the vector on the diagonal.
pub(crate) fn diag_embed(t: &Tensor) -> Result<Tensor> {
    let n = *t.shape.last().ok_or(Error::InvalidShape {
        op: "diag_embed",
        reason: "scalar operand".into(),
    })?;
    let outer = t.data.len() / n.max(1);
    let mut data = vec![0.0; outer * n * n];
    for o in 0..outer {
        for i in 0..n {
            data[o * n * n + i * n + i] = t.data[o * n + i];
        }
    }
    let mut shape = t.shape.clone();
    shape.push(n);
    Ok(Tensor { shape, data })
}

pub(crate) fn diag_extract(g: &Tensor) -> Tensor {
    let r = g.shape.len();
    let n = g.shape[r - 1];
    let outer = g.data.len() / (n * n).max(1);
    let mut data = Vec::with_capacity(outer * n);
    for o in 0..outer {
        for i in 0..n {
            data.push(g.data[o * n * n + i * n + i]);
        }
    }
    Tensor {
        shape: g.shape[..r - 1].to_vec(),
        data,
    }
}

/// Row-wise scaling: `out[..., n, m] = u[..., n] * mat[..., n, m]`.
pub(crate) fn row_scale(u: &Tensor, mat: &Tensor) -> Result<Tensor> {
    let r = mat.shape.len();
    if r < 2 || u.shape.len() + 1 != r || u.shape[..] != mat.shape[..r - 1] {
        return Err(Error::ShapeMismatch {
            op: "row_scale",
            lhs: u.shape.clone(),
            rhs: mat.shape.clone(),
        });
    }
    let m = mat.shape[r - 1];
    let data = mat
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v * u.data[i / m])
        .collect();
    Ok(Tensor {
        shape: mat.shape.clone(),
        data,
    })
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
