use partforge_core::autograd::{finite_diff_check, softmax_rows, Graph, Var};
use partforge_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(i, p) * b.get(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let b = g.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 5, 7);
    let b = random(&mut rng, 7, 3);
    let expected = triple_loop(&a, &b);
    let got = a.matmul(&b).unwrap();
    for (x, y) in got.data().iter().zip(&expected) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let x = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap();
    for v in softmax_rows(&x).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = Tensor::from_rows(&[&[1000.0, 0.0]]).unwrap();
    let y = softmax_rows(&x);
    assert!((y.data()[0] - 1.0).abs() < 1e-9 && y.data()[1].abs() < 1e-9);
    assert!(y.all_finite());
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 4, 4);
    let y = softmax_rows(&x);
    for r in 0..4 {
        let denom: f64 = x.row(r).iter().map(|v| v.exp()).sum();
        let mut total = 0.0;
        for c in 0..4 {
            let direct = x.get(r, c).exp() / denom;
            assert!((y.get(r, c) - direct).abs() < 1e-12);
            total += y.get(r, c);
        }
        assert!((total - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_row_shifts(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let x = Tensor::new(vec![3, 4], vals.clone()).unwrap();
        let shifted = Tensor::new(vec![3, 4], vals.iter().map(|v| v + shift).collect()).unwrap();
        let y = softmax_rows(&x);
        let ys = softmax_rows(&shifted);
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
        prop_assert!(y.max_abs_diff(&ys) < 1e-9);
    }
}

#[test]
fn layer_norm_constant_row_and_closed_form() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]).unwrap());
    let gain = g.constant(Tensor::filled(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::from_rows(&[&[1.0, -1.0]]).unwrap());
    let gain = g.constant(Tensor::filled(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    // mean 0, variance 1: y = x / sqrt(1 + 1e-5)
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y).data()[0] - expected).abs() < 1e-15);
    assert!((g.value(y).data()[1] + expected).abs() < 1e-15);
}

#[test]
fn linear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let xt = random(&mut rng, 3, 4);
    let x = g.constant(xt.clone());
    let w = g.constant(Tensor::identity(4));
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), &xt);

    let x = g.constant(Tensor::from_rows(&[&[2.0]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[&[3.0]]).unwrap());
    let b = g.constant(Tensor::scalar(1.0));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);

    let wt = random(&mut rng, 4, 2);
    let bt = random(&mut rng, 1, 2);
    let x = g.constant(xt.clone());
    let w = g.constant(wt.clone());
    let b = g.constant(bt.clone());
    let y = g.linear(x, w, b).unwrap();
    let prod = triple_loop(&xt, &wt);
    for r in 0..3 {
        for c in 0..2 {
            assert!((g.value(y).get(r, c) - (prod[r * 2 + c] + bt.data()[c])).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_examples() {
    let t = Tensor::from_rows(&[&[0.0, 6.0, 8.0, 20.0]]).unwrap();
    let y = partforge_core::autograd::gelu(&t);
    assert_eq!(y.data()[0], 0.0);
    for (x, v) in t.data()[1..].iter().zip(&y.data()[1..]) {
        assert!((x - v).abs() < 1e-4);
    }
}

#[test]
fn backward_trivial_cases() {
    let mut g = Graph::new();
    let xt = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
    let x = g.param(xt.clone());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let loss = g.scale(s, 0.5);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &xt);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::filled(&[1, 2], 2.0));
    let c = g.constant(Tensor::filled(&[1, 2], 3.0));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn finite_diff_check_quadratic_and_zero() {
    // f(θ) = ½ θᵀAθ with symmetric A; ∇f = Aθ. Central differences are exact for quadratics.
    let a = [[2.0, 0.5, -1.0], [0.5, 1.0, 0.25], [-1.0, 0.25, 3.0]];
    let f = |th: &[f64]| {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += 0.5 * th[i] * a[i][j] * th[j];
            }
        }
        s
    };
    let theta = [0.3, -0.7, 1.1];
    let grad: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[i][j] * theta[j]).sum()).collect();
    let report = finite_diff_check(f, &theta, &grad, 1e-3);
    assert!(report.max_rel_err < 1e-9, "{report:?}");

    let report = finite_diff_check(|_| 0.0, &theta, &[0.0; 3], 1e-4);
    assert_eq!(report.max_rel_err, 0.0);
}

/// Scalar probe `sum(op(x) ⊙ R)` so that every output coordinate carries a distinct weight.
fn check_unary(op: impl Fn(&mut Graph, Var) -> Var, r: usize, c: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random(&mut rng, r, c);
    let probe_shape = {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = op(&mut g, x);
        g.value(y).shape().to_vec()
    };
    let n: usize = probe_shape.iter().product();
    let weights = Tensor::new(probe_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let eval = |xs: &[f64], want_grad: bool| {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![r, c], xs.to_vec()).unwrap());
        let y = op(&mut g, x);
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        let grad = want_grad.then(|| g.backward(loss).unwrap().get(x).unwrap().data().to_vec());
        (value, grad)
    };
    let (_, analytic) = eval(x0.data(), true);
    finite_diff_check(|th| eval(th, false).0, x0.data(), &analytic.unwrap(), 1e-4).max_rel_err
}

#[test]
fn unary_op_gradients_match_finite_differences() {
    for seed in 0..5 {
        assert!(check_unary(|g, x| g.gelu(x), 3, 4, seed) < 1e-6);
        assert!(check_unary(|g, x| g.softmax_rows(x), 3, 5, seed) < 1e-6);
        assert!(check_unary(|g, x| g.normalize_rows(x), 4, 6, seed) < 1e-6);
        assert!(check_unary(|g, x| g.slice_cols(x, 1, 2).unwrap(), 3, 4, seed) < 1e-6);
        assert!(check_unary(|g, x| g.slice_rows(x, 1, 2).unwrap(), 3, 4, seed) < 1e-6);
        assert!(check_unary(|g, x| g.mean(x), 3, 4, seed) < 1e-6);
        assert!(check_unary(|g, x| g.add_scalar(x, 0.3), 2, 2, seed) < 1e-6);
        assert!(
            check_unary(
                |g, x| {
                    let a = g.slice_cols(x, 0, 2).unwrap();
                    let b = g.slice_cols(x, 2, 2).unwrap();
                    let s = g.matmul_nt(a, b).unwrap();
                    let c = g.concat_cols(&[s, a]).unwrap();
                    g.concat_rows(&[c, c]).unwrap()
                },
                3,
                4,
                seed
            ) < 1e-6
        );
        assert!(
            check_unary(
                |g, x| {
                    let w = g.slice_rows(x, 0, 4).unwrap();
                    let rest = g.slice_rows(x, 4, 2).unwrap();
                    let gain = g.slice_rows(x, 6, 1).unwrap();
                    let bias = g.slice_rows(x, 7, 1).unwrap();
                    let h = g.matmul(rest, w).unwrap();
                    let n = g.layer_norm(h, gain, bias).unwrap();
                    let m = g.mul(n, h).unwrap();
                    let d = g.sub(m, rest).unwrap();
                    g.add(d, h).unwrap()
                },
                8,
                4,
                seed
            ) < 1e-6
        );
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.param(random(&mut rng, 4, 5));
        let b = g.param(random(&mut rng, 5, 3));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c);
        let n = g.normalize_rows(s);
        let loss = g.mean(n);
        let loss2 = g.mul(loss, loss).unwrap();
        let grads = g.backward(loss2).unwrap();
        (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1, b2);
}
