use convqg_grad::{numeric_gradient, GradError, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Relative error with a small floor so entries that are exactly zero in both
/// routes do not divide by zero.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks d(sum(w * op(inputs)))/d(inputs) against central differences.
///
/// `build` maps input vars to the op output; `w` is a fixed random projection so
/// every output entry contributes.
fn check_op(
    shapes: &[Vec<usize>],
    seeds: std::ops::Range<u64>,
    tol: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::new(s.clone(), rand_vec(&mut rng, s.iter().product())).unwrap())
            .collect();

        let eval = |inputs: &[Tensor<f64>], w: Option<&[f64]>| -> (f64, usize, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            let n = g.value(out).len();
            let wv = w.map(|w| w.to_vec()).unwrap_or_else(|| vec![1.0; n]);
            let wt = g.constant(Tensor::new(g.shape(out).to_vec(), wv).unwrap());
            let prod = g.mul(out, wt).unwrap();
            let loss = g.sum(prod);
            let value = g.value(loss).item();
            g.backward(loss).unwrap();
            let grads = vars
                .iter()
                .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
                .collect();
            (value, n, grads)
        };

        let (_, n_out, _) = eval(&inputs, None);
        let w = rand_vec(&mut rng, n_out);
        let (_, _, analytic) = eval(&inputs, Some(&w));

        for (k, input) in inputs.iter().enumerate() {
            let numeric = numeric_gradient(input.data(), H, |x| {
                let mut probe = inputs.clone();
                probe[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                eval(&probe, Some(&w)).0
            });
            for (i, (&a, &n)) in analytic[k].iter().zip(&numeric).enumerate() {
                let e = rel_err(a, n);
                assert!(
                    e < tol || (a - n).abs() < 1e-9,
                    "seed {seed} input {k} entry {i}: analytic {a} vs numeric {n} (rel {e})"
                );
            }
        }
    }
}

#[test]
fn matmul_identity_and_substitution() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
    let x = g.constant(Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 7., -1.]).unwrap());
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![0., 1.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[2., 4.]);
    assert_eq!(g.value(c).shape(), &[2, 1]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(GradError::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    check_op(&[vec![3, 4], vec![4, 2]], 0..10, 1e-6, |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![0., 0., 0.]));
    let s = g.softmax(x, 0).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![1000., 0., 0.]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12 && v[2] < 1e-12);
    assert!(v.iter().all(|p| p.is_finite()));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    check_op(&[vec![5]], 0..10, 1e-6, |g, v| g.softmax(v[0], 0).unwrap());
    check_op(&[vec![3, 4]], 10..20, 1e-6, |g, v| g.softmax(v[0], 1).unwrap());
    check_op(&[vec![3, 4]], 20..30, 1e-6, |g, v| g.softmax(v[0], 0).unwrap());
}

#[test]
fn causal_softmax_masks_future_and_differentiates() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(3, 3, vec![1., 5., 9., 2., 3., 9., 0., 0., 0.]).unwrap());
    let s = g.causal_softmax(x).unwrap();
    let v = g.value(s).data();
    assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
    assert_eq!(v[5], 0.0);
    assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
    check_op(&[vec![4, 4]], 0..10, 1e-6, |g, v| g.causal_softmax(v[0]).unwrap());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![2., 2., 2., -1., -1., -1.]).unwrap());
    let one = g.constant(Tensor::vector(vec![1.; 3]));
    let zero = g.constant(Tensor::vector(vec![0.; 3]));
    let y = g.layer_norm(x, one, zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::matrix(2, 3, vec![0.3, -2., 5., 1., 4., -1.]).unwrap());
    let gain0 = g.constant(Tensor::vector(vec![0.; 3]));
    let bias = g.constant(Tensor::vector(vec![0.5, -1., 2.]));
    let y = g.layer_norm(x, gain0, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1., 2., 0.5, -1., 2.]);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    check_op(&[vec![3, 5], vec![5], vec![5]], 0..10, 1e-6, |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn l2_distance_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::vector(vec![3., 0.]));
    let b = g.constant(Tensor::vector(vec![0., 4.]));
    let d = g.l2_distance(a, b).unwrap();
    assert_eq!(g.value(d).item(), 5.0);

    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::vector(vec![1., 2., 3.]));
    let b = g.constant(Tensor::vector(vec![1., 2., 3.]));
    let d = g.l2_distance(a, b).unwrap();
    assert_eq!(g.value(d).item(), 0.0);
    g.backward(d).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0, 0.0]);

    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::vector(vec![1., 2.]));
    let b = g.constant(Tensor::vector(vec![1., 2., 3.]));
    assert!(g.l2_distance(a, b).is_err());
}

#[test]
fn l2_distance_gradient_matches_finite_differences() {
    check_op(&[vec![6], vec![6]], 0..10, 1e-6, |g, v| g.l2_distance(v[0], v[1]).unwrap());
}

#[test]
fn relu_hinge_branches() {
    for (x, y, dy) in [(-0.7, 0.0, 0.0), (1.3, 1.3, 1.0), (0.0, 0.0, 0.0)] {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::scalar(x));
        let r = g.relu_hinge(v);
        assert_eq!(g.value(r).item(), y);
        g.backward(r).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[dy], "x = {x}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::matrix(3, 4, vec![0.2; 12]).unwrap());
    let ce = g.cross_entropy(logits, &[0, 3, 1], &[true, true, true]).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

    let logits = g.constant(Tensor::matrix(1, 2, vec![10., -10.]).unwrap());
    let ce = g.cross_entropy(logits, &[0], &[true]).unwrap();
    // -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
    let expected = (-20f64).exp().ln_1p();
    assert!((g.value(ce).item() - expected).abs() < 1e-20);
    assert!((g.value(ce).item() - 2.06e-9).abs() < 1e-11);

    let logits = g.constant(Tensor::matrix(2, 2, vec![0.; 4]).unwrap());
    assert_eq!(g.cross_entropy(logits, &[0, 1], &[false, false]), Err(GradError::EmptyMean));
    assert!(matches!(g.cross_entropy(logits, &[0, 2], &[true, true]), Err(GradError::Index { .. })));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    check_op(&[vec![4, 5]], 0..10, 1e-6, |g, v| g.cross_entropy(v[0], &[1, 4, 0, 2], &[true, false, true, true]).unwrap());
}

#[test]
fn remaining_ops_match_finite_differences() {
    check_op(&[vec![3, 4], vec![4]], 0..10, 1e-6, |g, v| g.add_bias(v[0], v[1]).unwrap());
    check_op(&[vec![3, 4]], 0..10, 1e-6, |g, v| g.gelu(v[0]));
    check_op(&[vec![3, 4]], 0..10, 1e-6, |g, v| g.transpose(v[0]).unwrap());
    check_op(&[vec![3, 4], vec![3, 4]], 0..10, 1e-6, |g, v| {
        let p = g.mul(v[0], v[1]).unwrap();
        let q = g.sub(p, v[1]).unwrap();
        let r = g.add(q, v[0]).unwrap();
        let s = g.scale(r, -0.7);
        g.add_scalar(s, 0.25)
    });
    check_op(&[vec![5, 3]], 0..10, 1e-6, |g, v| {
        let a = g.slice_cols(v[0], 0, 1).unwrap();
        let b = g.slice_cols(v[0], 1, 3).unwrap();
        g.concat_cols(&[b, a, b]).unwrap()
    });
    check_op(&[vec![6, 3], vec![4, 3]], 0..10, 1e-6, |g, v| {
        let e = g.embedding(v[1], &[2, 0, 2]).unwrap();
        let m = g.mean_rows(v[0], &[0, 2, 5]).unwrap();
        let em = g.mean_rows(e, &[0, 1, 2]).unwrap();
        g.add(m, em).unwrap()
    });
    check_op(&[vec![7]], 0..10, 1e-6, |g, v| g.l2_normalize(v[0]).unwrap());
    check_op(&[vec![6], vec![6, 2]], 0..10, 1e-6, |g, v| {
        let row = g.reshape(v[0], &[1, 6]).unwrap();
        let y = g.matmul(row, v[1]).unwrap();
        g.reshape(y, &[2]).unwrap()
    });
}

#[test]
fn reshape_rejects_count_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(g.reshape(x, &[2, 2]).is_err());
    let y = g.reshape(x, &[3, 1]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::matrix(2, 3, vec![1., -2., 3., 4., 5., 6.]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_distance_to_constant_is_unit_direction() {
    let x = vec![0.4, -1.0, 2.5];
    let c = vec![1.0, 1.0, -0.5];
    let mut g = Graph::<f64>::new();
    let xv = g.param(Tensor::vector(x.clone()));
    let cv = g.constant(Tensor::vector(c.clone()));
    let d = g.l2_distance(xv, cv).unwrap();
    g.backward(d).unwrap();
    let norm = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    for (i, gi) in g.grad(xv).unwrap().iter().enumerate() {
        assert!((gi - (x[i] - c[i]) / norm).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_and_second_run() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1., 2.]));
    assert!(matches!(g.backward(x), Err(GradError::NotScalar(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(GradError::BackwardTwice));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1., 2.]));
    let c = g.constant(Tensor::vector(vec![3., 4.]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[3., 4.]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::matrix(4, 6, rand_vec(&mut rng, 24)).unwrap());
        let b = g.param(Tensor::matrix(6, 5, rand_vec(&mut rng, 30)).unwrap());
        let gain = g.param(Tensor::vector(rand_vec(&mut rng, 5)));
        let bias = g.param(Tensor::vector(rand_vec(&mut rng, 5)));
        let h = g.matmul(a, b).unwrap();
        let h = g.layer_norm(h, gain, bias).unwrap();
        let h = g.gelu(h);
        let l = g.cross_entropy(h, &[0, 1, 2, 4], &[true; 4]).unwrap();
        g.backward(l).unwrap();
        [a, b, gain, bias].iter().map(|&v| g.grad(v).unwrap().to_vec()).collect::<Vec<_>>()
    };
    let first = run();
    let second = run();
    for (x, y) in first.iter().zip(&second) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0 || cols > 1));
        }
    }

    #[test]
    fn softmax_strictly_positive_on_moderate_inputs(v in proptest::collection::vec(-20.0f64..20.0, 1..10)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(v));
        let s = g.softmax(x, 0).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&p| p > 0.0));
        prop_assert!((g.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relu_hinge_is_nonnegative_and_identity_above_zero(x in -1e6f64..1e6) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::scalar(x));
        let r = g.relu_hinge(v);
        let y = g.value(r).item();
        prop_assert!(y >= 0.0);
        if x >= 0.0 {
            prop_assert_eq!(y, x);
        }
    }
}
