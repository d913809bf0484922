use bilinear_ssm::autodiff::grad_check;
use bilinear_ssm::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Reduces any tensor to a scalar with fixed, non-uniform weights so that
/// every output element receives a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| ((i as f64) * 0.731 + 0.2).sin()));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let params: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
    let report = grad_check(|t, v| { let o = f(t, v)?; weighted_sum(t, o) }, &params, 1e-6, 1e-6);
    assert!(report.passed(), "{name}: {report:?}");
}

#[test]
fn elementwise_gradients() {
    check("add-broadcast", &[&[3, 4], &[4]], |t, v| t.add(v[0], v[1]));
    check("sub-broadcast", &[&[2, 1, 3], &[4, 1]], |t, v| t.sub(v[0], v[1]));
    check("mul-broadcast", &[&[2, 3, 4], &[3, 1]], |t, v| t.mul(v[0], v[1]));
    check("scale", &[&[5]], |t, v| t.scale(v[0], -2.5));
    check("tanh", &[&[2, 3]], |t, v| t.tanh(v[0]));
    check("exp", &[&[2, 3]], |t, v| t.exp(v[0]));
    check("sigmoid", &[&[2, 3]], |t, v| t.sigmoid(v[0]));
    check("softplus", &[&[2, 3]], |t, v| t.softplus(v[0]));
    check("silu", &[&[2, 3]], |t, v| t.silu(v[0]));
}

#[test]
fn linear_algebra_gradients() {
    check("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check("matmul-batched", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1]));
    check("matmul-shared-rhs", &[&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check("matmul-shared-lhs", &[&[3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1]));
    check("transpose", &[&[2, 3, 4]], |t, v| t.transpose(v[0]));
    check("linear", &[&[3, 4], &[5, 4]], |t, v| t.linear(v[0], v[1]));
    check("diag_embed", &[&[2, 3]], |t, v| t.diag_embed(v[0]));
    check("row_scale", &[&[2, 3], &[2, 3, 3]], |t, v| t.row_scale(v[0], v[1]));
}

#[test]
fn shape_gradients() {
    check("sum_axis", &[&[2, 3, 4]], |t, v| t.sum_axis(v[0], 1));
    check("mean", &[&[2, 3]], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.mean(sq)
    });
    check("broadcast_to", &[&[3, 1]], |t, v| t.broadcast_to(v[0], &[2, 3, 4]));
    check("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    check("narrow", &[&[5, 3]], |t, v| t.narrow(v[0], 0, 1, 3));
    check("narrow-inner", &[&[2, 5, 3]], |t, v| t.narrow(v[0], 1, 2, 2));
    check("concat", &[&[2, 3], &[1, 3], &[4, 3]], |t, v| t.concat(v, 0));
    check("concat-inner", &[&[2, 3], &[2, 1]], |t, v| t.concat(v, 1));
}

#[test]
fn reused_nodes_accumulate_gradient() {
    // f(x) = Σ x·x + x, so ∂f/∂x = 2x + 1
    let x = Tensor::vector(&[0.5, -1.0, 2.0]);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.add(sq, xv).unwrap();
    let f = tape.sum(s).unwrap();
    let g = tape.backward(f).unwrap().wrt(xv).unwrap();
    assert_eq!(g.data(), &[2.0, -1.0, 5.0]);
}

#[test]
fn unreachable_var_has_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::vector(&[1.0, 2.0]));
    let b = tape.param(Tensor::vector(&[3.0]));
    let f = tape.sum(a).unwrap();
    let g = tape.backward(f).unwrap();
    assert_eq!(g.wrt(b).unwrap(), Tensor::zeros(&[1]));
}

#[test]
fn nonlinearities_are_stable_at_extremes() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(&[-800.0, -40.0, 0.0, 40.0, 800.0]));
    let sp = tape.softplus(x).unwrap();
    let sg = tape.sigmoid(x).unwrap();
    let sp_v = tape.value(sp).clone();
    let sg_v = tape.value(sg).clone();
    assert!(sp_v.is_finite() && sg_v.is_finite());
    assert_eq!(sp_v.data()[4], 800.0);
    assert!(sp_v.data()[0] >= 0.0 && sp_v.data()[0] < 1e-300);
    assert!((sp_v.data()[2] - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(sg_v.data()[2], 0.5);
    assert!(sg_v.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let f = tape.sum(sp).unwrap();
    let g = tape.backward(f).unwrap().wrt(x).unwrap();
    assert!(g.is_finite());
}

fn matmul_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum()
    })
}

proptest! {
    #[test]
    fn matmul_matches_index_loops(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        prop_assert!(tape.value(c).max_abs_diff(&matmul_loop(&a, &b)) < 1e-13);
    }

    #[test]
    fn broadcast_mul_matches_index_loops(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[r, 1]);
        let b = rand_t(&mut rng, &[c]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let p = tape.mul(av, bv).unwrap();
        let out = tape.value(p);
        prop_assert_eq!(out.shape(), &[r, c]);
        for i in 0..r {
            for j in 0..c {
                prop_assert_eq!(out.get(&[i, j]), a.get(&[i, 0]) * b.get(&[j]));
            }
        }
    }

    #[test]
    fn narrow_then_concat_roundtrips(seed in any::<u64>(), rows in 2usize..9, cut in 1usize..8) {
        let cut = cut.min(rows - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[rows, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let head = tape.narrow(xv, 0, 0, cut).unwrap();
        let tail = tape.narrow(xv, 0, cut, rows - cut).unwrap();
        let back = tape.concat(&[head, tail], 0).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn sum_axis_matches_index_loops(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, c in 1usize..4, axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[a, b, c]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.sum_axis(xv, axis).unwrap();
        let out = tape.value(s);
        let dims = [a, b, c];
        for i in 0..dims[(axis + 1) % 3] {
            for j in 0..dims[(axis + 2) % 3] {
                let mut acc = 0.0;
                let mut idx = [0usize; 3];
                for k in 0..dims[axis] {
                    idx[axis] = k;
                    idx[(axis + 1) % 3] = i;
                    idx[(axis + 2) % 3] = j;
                    acc += x.get(&idx);
                }
                let mut oidx = vec![];
                for d in 0..3 {
                    if d != axis {
                        oidx.push(idx[d]);
                    }
                }
                prop_assert!((out.get(&oidx) - acc).abs() < 1e-13);
            }
        }
    }
}
