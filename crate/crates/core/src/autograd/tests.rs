use super::*;
use crate::kron::{kron, kron_matmul, KronFactorPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::rand_normal(r, c, 1.0, rng)
}

/// Weighted sum `Σ out ⊙ W` with fixed random weights, so no gradient entry is
/// structurally zero.
fn weighted_loss(g: &mut Graph<'_, f64>, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let (r, c) = g.value(out).shape();
    let w = g.constant(randn(r, c, rng));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

#[test]
fn primitive_set_is_closed() {
    let names: Vec<&str> = primitive_set().iter().map(|k| k.name()).collect();
    for required in [
        "matmul", "add", "mul", "scale", "relu", "gelu", "silu", "sigmoid", "mish", "gelu_new",
        "softmax", "layer_norm", "embedding", "cross_entropy", "mse", "concat", "kron_linear",
    ] {
        assert!(names.contains(&required), "{required}");
    }
}

#[test]
fn simple_values() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Matrix::zeros(1, 3));
    let s = g.activation(z, Activation::Silu).unwrap();
    assert_eq!(g.value(s).data(), &[0.0; 3]);

    let u = g.constant(Matrix::filled(2, 4, 0.7));
    let p = g.softmax_rows(u).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let row = g.constant(Matrix::filled(2, 5, 3.0));
    let gain = g.constant(Matrix::filled(1, 5, 1.0));
    let bias = g.constant(Matrix::zeros(1, 5));
    let ln = g.layer_norm(row, gain, bias).unwrap();
    assert!(g.value(ln).data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_map_gradient() {
    let mut r = rng(1);
    let xv = randn(3, 4, &mut r);
    let wv = randn(4, 2, &mut r);
    let mut g = Graph::new();
    let x = g.leaf(xv, true);
    let w = g.constant(wv.clone());
    let y = g.matmul(x, w).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    let expected = Matrix::filled(3, 2, 1.0).matmul(&wv.transpose()).unwrap();
    assert!(g.grad(x).unwrap().max_rel_diff(&expected).unwrap() < 1e-15);
    assert!(g.grad(w).is_none());
}

#[test]
fn mse_of_identical_inputs_has_zero_gradient() {
    let mut r = rng(2);
    let xv = randn(2, 3, &mut r);
    let mut g = Graph::new();
    let x = g.leaf(xv.clone(), true);
    let t = g.constant(xv);
    let loss = g.mse(x, t).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.value(loss).get(0, 0), 0.0);
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_requires_trainable_path_and_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Matrix::filled(2, 2, 1.0));
    let s = g.sum(c).unwrap();
    assert!(g.backward(s).is_err());
    let x = g.leaf(Matrix::filled(2, 2, 1.0), true);
    assert!(g.backward(x).is_err());
}

fn check_unary(act: Activation, tol: f64) {
    let mut r = rng(10 + act as u64);
    // keep away from the ReLU kink
    let xv = randn(3, 4, &mut r).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let mut g = Graph::new();
    let x = g.leaf(xv, true);
    let y = g.activation(x, act).unwrap();
    let loss = weighted_loss(&mut g, y, &mut r);
    let err = finite_diff_check(&mut g, loss, x, 1e-5).unwrap();
    assert!(err <= tol, "{act}: {err}");
}

#[test]
fn activations_pass_gradient_check() {
    for act in Activation::ALL {
        check_unary(act, 1e-6);
    }
}

#[test]
fn matmul_add_mul_scale_pass_gradient_check() {
    let mut r = rng(20);
    let mut g = Graph::new();
    let a = g.leaf(randn(3, 4, &mut r), true);
    let b = g.leaf(randn(4, 5, &mut r), true);
    let c = g.leaf(randn(2, 5, &mut r), true);
    let bias = g.leaf(randn(1, 5, &mut r), true);
    let other = g.leaf(randn(3, 5, &mut r), true);
    let s = g.leaf(Matrix::scalar(0.8), true);
    let ab = g.matmul(a, b).unwrap();
    let abc = g.matmul_nt(ab, c).unwrap(); // 3x2
    let abct = g.matmul(abc, c).unwrap(); // 3x5
    let biased = g.add(abct, bias).unwrap();
    let prod = g.mul(biased, other).unwrap();
    let scaled = g.scale(prod, 0.3).unwrap();
    let scaled = g.scale_by(scaled, s).unwrap();
    let loss = weighted_loss(&mut g, scaled, &mut r);
    for p in [a, b, c, bias, other, s] {
        let err = finite_diff_check(&mut g, loss, p, 1e-5).unwrap();
        assert!(err <= 1e-6, "param {p:?}: {err}");
    }
}

#[test]
fn softmax_and_layer_norm_pass_gradient_check() {
    let mut r = rng(30);
    let mut g = Graph::new();
    let x = g.leaf(randn(4, 6, &mut r), true);
    let gain = g.leaf(randn(1, 6, &mut r), true);
    let bias = g.leaf(randn(1, 6, &mut r), true);
    let ln = g.layer_norm(x, gain, bias).unwrap();
    let sm = g.softmax_rows(ln).unwrap();
    let loss = weighted_loss(&mut g, sm, &mut r);
    for p in [x, gain, bias] {
        let err = finite_diff_check(&mut g, loss, p, 1e-5).unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}

#[test]
fn embedding_concat_slice_losses_pass_gradient_check() {
    let mut r = rng(40);
    let mut g = Graph::new();
    let table = g.leaf(randn(5, 3, &mut r), true);
    let e = g.embedding(table, vec![0, 3, 3, 1]).unwrap(); // 4x3
    let left = g.slice(e, 0, 0, 2, 3).unwrap();
    let right = g.slice(e, 2, 1, 2, 2).unwrap();
    let joined = g.concat(vec![left, right], Axis::Cols).unwrap(); // 2x5
    let stacked = g.concat(vec![joined, joined], Axis::Rows).unwrap(); // 4x5
    let ce = g.cross_entropy(stacked, vec![1, 4, 0, 2]).unwrap();
    let target = g.constant(randn(4, 5, &mut r));
    let mse = g.mse(stacked, target).unwrap();
    let loss = g.add(ce, mse).unwrap();
    let err = finite_diff_check(&mut g, loss, table, 1e-5).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn kron_linear_forward_matches_kron_matmul_bitwise() {
    let mut r = rng(50);
    let xv = randn(5, 12, &mut r);
    let av = randn(4, 3, &mut r);
    let bv = randn(3, 5, &mut r);
    let mut g = Graph::new();
    let x = g.leaf_ref(&xv, false);
    let a = g.leaf_ref(&av, true);
    let b = g.leaf_ref(&bv, true);
    let y = g.kron_linear(x, a, b, KronLinearOptions::default()).unwrap();
    let pair = KronFactorPair::new(av.clone(), bv.clone()).unwrap();
    assert_eq!(g.value(y), &kron_matmul(&xv, &pair).unwrap());
}

#[test]
fn kron_linear_identity_and_zero_factor() {
    let mut r = rng(51);
    let xv = randn(3, 6, &mut r);
    let mut g = Graph::new();
    let x = g.leaf(xv.clone(), true);
    let a = g.leaf(Matrix::identity(2), true);
    let b = g.leaf(Matrix::identity(3), true);
    let y = g.kron_linear(x, a, b, KronLinearOptions::default()).unwrap();
    assert_eq!(g.value(y), &xv);

    let mut g = Graph::new();
    let x = g.leaf(xv, true);
    let a = g.leaf(randn(2, 2, &mut r), true);
    let b = g.leaf(Matrix::zeros(3, 3), true);
    let y = g.kron_linear(x, a, b, KronLinearOptions::default()).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let loss = weighted_loss(&mut g, y, &mut r);
    g.backward(loss).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn kron_linear_gradients_pass_check_with_bias_and_activation() {
    for (seed, act) in [(60, Activation::None), (61, Activation::Silu), (62, Activation::GeluNew)] {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.leaf(randn(3, 8, &mut r), true); // a1=2, b1=4
        let a = g.leaf(randn(2, 3, &mut r), true);
        let b = g.leaf(randn(4, 2, &mut r), true);
        let m = g.leaf(randn(4, 3, &mut r), true);
        let opts = KronLinearOptions {
            mid_bias: Some(m),
            activation: act,
        };
        let y = g.kron_linear(x, a, b, opts).unwrap();
        let loss = weighted_loss(&mut g, y, &mut r);
        for p in [x, a, b, m] {
            let err = finite_diff_check(&mut g, loss, p, 1e-5).unwrap();
            assert!(err <= 1e-6, "{act} {p:?}: {err}");
        }
    }
}

#[test]
fn fused_and_reconstructed_gradients_agree() {
    let mut r = rng(70);
    let xv = randn(4, 6, &mut r);
    let av = randn(2, 3, &mut r);
    let bv = randn(3, 2, &mut r);
    let wv = randn(4, 6, &mut r);

    let mut fused = Graph::new();
    let x = fused.leaf(xv.clone(), true);
    let a = fused.leaf(av.clone(), true);
    let b = fused.leaf(bv.clone(), true);
    let y = fused.kron_linear(x, a, b, KronLinearOptions::default()).unwrap();
    let w = fused.constant(wv.clone());
    let p = fused.mul(y, w).unwrap();
    let loss = fused.sum(p).unwrap();
    fused.backward(loss).unwrap();

    // A⊗B assembled block by block: block (i, j) is a_ij·B.
    let mut recon = Graph::new();
    let x2 = recon.leaf(xv.clone(), true);
    let a2 = recon.leaf(av.clone(), true);
    let b2 = recon.leaf(bv.clone(), true);
    let (a1n, a2n) = av.shape();
    let mut block_rows = Vec::new();
    for i in 0..a1n {
        let mut blocks = Vec::new();
        for j in 0..a2n {
            let aij = recon.slice(a2, i, j, 1, 1).unwrap();
            blocks.push(recon.scale_by(b2, aij).unwrap());
        }
        block_rows.push(recon.concat(blocks, Axis::Cols).unwrap());
    }
    let k = recon.concat(block_rows, Axis::Rows).unwrap();
    assert!(recon.value(k).max_rel_diff(&kron(&av, &bv)).unwrap() == 0.0);
    let y2 = recon.matmul(x2, k).unwrap();
    let w2 = recon.constant(wv);
    let p2 = recon.mul(y2, w2).unwrap();
    let loss2 = recon.sum(p2).unwrap();
    recon.backward(loss2).unwrap();

    for (f, s) in [(x, x2), (a, a2), (b, b2)] {
        let d = fused.grad(f).unwrap().max_rel_diff(recon.grad(s).unwrap()).unwrap();
        assert!(d <= 1e-10, "{d}");
    }
}

#[test]
fn corrupted_backward_is_detected() {
    let mut r = rng(80);
    let mut g = Graph::new();
    g.inject_fault(Fault::KronLinearFactorA);
    let x = g.leaf(randn(3, 4, &mut r), false);
    let a = g.leaf(randn(2, 2, &mut r), true);
    let b = g.leaf(randn(2, 2, &mut r), true);
    let y = g.kron_linear(x, a, b, KronLinearOptions::default()).unwrap();
    let loss = weighted_loss(&mut g, y, &mut r);
    assert!(finite_diff_check(&mut g, loss, a, 1e-5).unwrap() >= 1e-2);
    assert!(finite_diff_check(&mut g, loss, b, 1e-5).unwrap() <= 1e-6);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Matrix::filled(1, 2, 3.0), true);
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0]);
    // a second backward zeroes the slots first
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0]);
}

#[test]
fn deterministic_replay() {
    let build = || {
        let mut r = rng(90);
        let mut g = Graph::new();
        let x = g.leaf(randn(3, 4, &mut r), true);
        let a = g.leaf(randn(2, 2, &mut r), true);
        let b = g.leaf(randn(2, 2, &mut r), true);
        let y = g.kron_linear(x, a, b, KronLinearOptions::default()).unwrap();
        let y = g.gelu(y).unwrap();
        let loss = weighted_loss(&mut g, y, &mut r);
        g.backward(loss).unwrap();
        (g.value(loss).clone(), g.grad(a).unwrap().clone(), g.grad(x).unwrap().clone())
    };
    let (l1, a1, x1) = build();
    let (l2, a2, x2) = build();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert!(a1.data().iter().zip(a2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(x1.data().iter().zip(x2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn dimension_errors_surface() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Matrix::zeros(2, 3));
    let b = g.constant(Matrix::zeros(2, 3));
    assert!(g.matmul(a, b).is_err());
    let c = g.constant(Matrix::zeros(3, 3));
    assert!(g.add(a, c).is_err());
    let t = g.constant(Matrix::zeros(4, 2));
    assert!(matches!(
        g.embedding(t, vec![1, 4]),
        Err(Error::TokenOutOfRange { token: 4, position: 1, .. })
    ));
}
