//! Self-checks runnable without training: scan equivalence and
//! finite-difference gradients of the full block.

use bilinear_ssm::autodiff::{grad_check, GradCheckReport};
use bilinear_ssm::block;
use bilinear_ssm::scan::{parallel_scan, sequential_scan, ScanElement, ScanTree, TensorAlgebra};
use bilinear_ssm::train::init_params;
use bilinear_ssm::{Architecture, ForwardOptions, ModelDims, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SCAN_STATE_SIZES: [usize; 4] = [1, 3, 8, 16];
pub const SCAN_LENGTHS: [usize; 5] = [1, 2, 7, 64, 257];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanCase {
    pub matrix: bool,
    pub batch: usize,
    pub d_state: usize,
    pub len: usize,
    pub tree: ScanTree,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanCheck {
    pub cases: usize,
    pub max_abs_diff: f64,
    pub worst: Option<ScanCase>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random contracting elements for one case: diagonal gates in (−1, 1),
/// matrix gates with row sums of magnitude below 0.95.
pub fn random_elements(rng: &mut ChaCha8Rng, case: ScanCase) -> (Vec<ScanElement<Tensor>>, Tensor) {
    let (b, s) = (case.batch, case.d_state);
    let elems = (0..case.len)
        .map(|_| {
            let offset = uniform(rng, &[b, s], -1.0, 1.0);
            if case.matrix {
                let bound = 0.95 / s as f64;
                ScanElement::matrix(uniform(rng, &[b, s, s], -bound, bound), offset)
            } else {
                ScanElement::diagonal(uniform(rng, &[b, s], -1.0, 1.0), offset)
            }
        })
        .collect();
    (elems, uniform(rng, &[b, s], -1.0, 1.0))
}

/// Compares parallel against sequential scans on `cases` random problems
/// per gate kind, cycling through every state size and length.
pub fn scan_equivalence(cases: usize, seed: u64) -> Result<ScanCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trees = [ScanTree::Balanced, ScanTree::Doubling];
    let mut out = ScanCheck {
        cases: 0,
        max_abs_diff: 0.0,
        worst: None,
    };
    for matrix in [false, true] {
        for i in 0..cases {
            let case = ScanCase {
                matrix,
                batch: 1 + i % 3,
                d_state: SCAN_STATE_SIZES[i % SCAN_STATE_SIZES.len()],
                len: SCAN_LENGTHS[(i / SCAN_STATE_SIZES.len()) % SCAN_LENGTHS.len()],
                tree: trees[rng.random_range(0..trees.len())],
            };
            let (elems, h0) = random_elements(&mut rng, case);
            let seq = sequential_scan(&mut TensorAlgebra, &elems, &h0)?;
            let par = parallel_scan(&mut TensorAlgebra, &elems, &h0, case.tree)?;
            let diff = seq.iter().zip(&par).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
            if diff > out.max_abs_diff || diff.is_nan() {
                out.max_abs_diff = diff;
                out.worst = Some(case);
            }
            out.cases += 1;
        }
    }
    Ok(out)
}

/// Dims of the gradient check: d_i = 4, d_s = 3, L = 6.
pub fn grad_check_dims() -> ModelDims {
    ModelDims::new(1, 3, 6).with_d_inner(4)
}

/// Central-difference check of the MSE loss of one block against a random
/// target, over every parameter tensor.
pub fn model_grad_check(arch: Architecture, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let dims = grad_check_dims();
    let batch = 2;
    let params = init_params(arch, dims, 0.5, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rows = dims.context_len * batch;
    let x = uniform(&mut rng, &[rows, dims.d_model], -1.0, 1.0);
    let target = uniform(&mut rng, &[rows, dims.d_model], -1.0, 1.0);
    let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    Ok(grad_check(
        |tape, vars| {
            let bound = params.bind_leaves(tape, vars.to_vec(), ForwardOptions::default())?;
            let xv = tape.constant(x.clone());
            let y = block::forward(tape, &bound, xv, batch)?;
            let t = tape.constant(target.clone());
            let e = tape.sub(y, t)?;
            let sq = tape.mul(e, e)?;
            tape.mean(sq)
        },
        &tensors,
        1e-5,
        tolerance,
    ))
}
