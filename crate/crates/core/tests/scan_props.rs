use bilinear_ssm::scan::{self, combine, parallel_scan, sequential_scan, ScanElement, ScanTree, TapeAlgebra, TensorAlgebra};
use bilinear_ssm::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TREES: [ScanTree; 3] = [ScanTree::Balanced, ScanTree::Doubling, ScanTree::Skewed];

fn random_elements(seed: u64, len: usize, batch: usize, s: usize, matrix: bool) -> (Vec<ScanElement<Tensor>>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], amp: f64| Tensor::from_fn(shape, |_| rng.random_range(-amp..amp));
    let elements = (0..len)
        .map(|_| {
            if matrix {
                ScanElement::matrix(t(&[batch, s, s], 0.95 / s as f64), t(&[batch, s], 1.0))
            } else {
                ScanElement::diagonal(t(&[batch, s], 1.0), t(&[batch, s], 1.0))
            }
        })
        .collect();
    let h0 = t(&[batch, s], 1.0);
    (elements, h0)
}

/// Unrolls `h ← G h + b` with explicit index loops.
fn loop_reference(elements: &[ScanElement<Tensor>], h0: &Tensor) -> Vec<Tensor> {
    let (batch, s) = (h0.shape()[0], h0.shape()[1]);
    let mut h = h0.clone();
    let mut out = Vec::new();
    for e in elements {
        let mut next = Tensor::zeros(&[batch, s]);
        for b in 0..batch {
            for i in 0..s {
                let kept = match &e.gate {
                    scan::Gate::Diagonal(g) => g.get(&[b, i]) * h.get(&[b, i]),
                    scan::Gate::Matrix(g) => (0..s).map(|j| g.get(&[b, i, j]) * h.get(&[b, j])).sum(),
                };
                next.set(&[b, i], kept + e.offset.get(&[b, i]));
            }
        }
        out.push(next.clone());
        h = next;
    }
    out
}

#[test]
fn sequential_scan_matches_index_loops() {
    for matrix in [false, true] {
        let (el, h0) = random_elements(1, 13, 2, 3, matrix);
        let got = sequential_scan(&mut TensorAlgebra, &el, &h0).unwrap();
        let want = loop_reference(&el, &h0);
        for (g, w) in got.iter().zip(&want) {
            assert!(g.max_abs_diff(w) < 1e-13);
        }
    }
}

#[test]
fn scan_gradients_do_not_depend_on_tree_shape() {
    let (el, h0) = random_elements(3, 11, 2, 3, true);
    let weights = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.37).sin());
    let grads = |tree: Option<ScanTree>| {
        let mut tape = Tape::new();
        let vars: Vec<ScanElement<_>> = el
            .iter()
            .map(|e| match &e.gate {
                scan::Gate::Matrix(g) => ScanElement::matrix(tape.param(g.clone()), tape.param(e.offset.clone())),
                scan::Gate::Diagonal(g) => ScanElement::diagonal(tape.param(g.clone()), tape.param(e.offset.clone())),
            })
            .collect();
        let h = tape.param(h0.clone());
        let w = tape.constant(weights.clone());
        let states = {
            let mut alg = TapeAlgebra::new(&mut tape);
            match tree {
                None => sequential_scan(&mut alg, &vars, &h).unwrap(),
                Some(t) => parallel_scan(&mut alg, &vars, &h, t).unwrap(),
            }
        };
        let mut total = tape.constant(Tensor::scalar(0.0));
        for s in states {
            let sq = tape.mul(s, s).unwrap();
            let weighted = tape.mul(sq, w).unwrap();
            let part = tape.sum(weighted).unwrap();
            total = tape.add(total, part).unwrap();
        }
        let g = tape.backward(total).unwrap();
        let mut flat = g.wrt(h).unwrap().into_data();
        for e in &vars {
            let gate = match e.gate {
                scan::Gate::Matrix(v) | scan::Gate::Diagonal(v) => v,
            };
            flat.extend(g.wrt(gate).unwrap().into_data());
            flat.extend(g.wrt(e.offset).unwrap().into_data());
        }
        flat
    };
    let want = grads(None);
    for tree in TREES {
        let got = grads(Some(tree));
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-11, "{tree:?}: {diff:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn parallel_equals_sequential(
        seed in any::<u64>(),
        len in 1usize..70,
        batch in 1usize..4,
        s in 1usize..6,
        matrix in any::<bool>(),
    ) {
        let (el, h0) = random_elements(seed, len, batch, s, matrix);
        let want = sequential_scan(&mut TensorAlgebra, &el, &h0).unwrap();
        for tree in TREES {
            let got = parallel_scan(&mut TensorAlgebra, &el, &h0, tree).unwrap();
            prop_assert_eq!(got.len(), len);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!(g.max_abs_diff(w) < 1e-10, "{:?}", tree);
            }
        }
    }

    #[test]
    fn combine_is_associative(seed in any::<u64>(), s in 1usize..5, matrix in any::<bool>()) {
        let (el, _) = random_elements(seed, 3, 2, s, matrix);
        let alg = &mut TensorAlgebra;
        let left = {
            let ab = combine(alg, &el[0], &el[1]).unwrap();
            combine(alg, &ab, &el[2]).unwrap()
        };
        let right = {
            let bc = combine(alg, &el[1], &el[2]).unwrap();
            combine(alg, &el[0], &bc).unwrap()
        };
        let probe = Tensor::from_fn(&[2, s], |i| 0.3 * i as f64 - 0.5);
        let l = scan::apply(alg, &left, &probe).unwrap();
        let r = scan::apply(alg, &right, &probe).unwrap();
        prop_assert!(l.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn combine_applies_earlier_first(seed in any::<u64>(), s in 1usize..5, matrix in any::<bool>()) {
        let (el, h0) = random_elements(seed, 2, 1, s, matrix);
        let alg = &mut TensorAlgebra;
        let both = combine(alg, &el[1], &el[0]).unwrap();
        let once = scan::apply(alg, &el[0], &h0).unwrap();
        let twice = scan::apply(alg, &el[1], &once).unwrap();
        let direct = scan::apply(alg, &both, &h0).unwrap();
        prop_assert!(direct.max_abs_diff(&twice) < 1e-12);
    }
}
