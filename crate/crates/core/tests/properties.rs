//! Oracle comparisons and invariants of the tensor engine.

use ctm_core::optim::{clip_grad_norm, AdamConfig, AdamState};
use ctm_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a: Vec<f64> = (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let expected = naive_matmul(&a, &b, 5, 7, 3);
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(Tensor::new([5, 7], a).unwrap());
    let bv = tape.constant(Tensor::new([7, 3], b).unwrap());
    let c = tape.matmul(av, bv).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-6);
    }
}

/// Direct nested-loop correlation oracle.
#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (b, c, h, w, o, k, stride, pad) = (2, 3, 7, 6, 4, 3, 2, 1);
    let x: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt: Vec<f64> = (0..o * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut expected = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    s += x[((n * c + ic) * h + y as usize) * w + xx as usize] * wt[((oc * c + ic) * k + i) * k + j];
                                }
                            }
                        }
                    }
                    expected[((n * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::new([b, c, h, w], x).unwrap());
    let wv = tape.constant(Tensor::new([o, c, k, k], wt).unwrap());
    let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
    assert_eq!(tape.shape(y), &[b, o, oh, ow]);
    for (p, q) in tape.value(y).data().iter().zip(&expected) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn paper_scale_conv_shape() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([25, 64, 21, 21]));
    let w = tape.constant(Tensor::zeros([32, 64, 3, 3]));
    // Stride 2 with a 3x3 kernel reaches 10 only without padding.
    let y = tape.conv2d(x, w, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[25, 32, 10, 10]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([3], &[1.5, -2.0, 0.25]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    assert!(tape.backward(sq).is_err(), "non-scalar backward must be rejected");
}

fn record_and_backward(seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_fn([3, 2, 6, 6], |_| rng.gen_range(-1.0..1.0)));
    let w = tape.leaf(Tensor::from_fn([4, 2, 3, 3], |_| rng.gen_range(-1.0..1.0)));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let y = tape.relu(y);
    let y = tape.maxpool2(y).unwrap();
    let y = tape.softmax_axis(y, 1).unwrap();
    let y = tape.mul(y, y).unwrap();
    let loss = tape.mean(y);
    let g = tape.backward(loss).unwrap();
    [x, w].iter().flat_map(|&v| g.get(v).unwrap().data().iter().map(|f| f.to_bits() as u64).collect::<Vec<_>>()).collect()
}

#[test]
fn independent_tapes_give_bit_identical_gradients() {
    assert_eq!(record_and_backward(9), record_and_backward(9));
}

#[test]
fn forward_ops_stay_finite_on_finite_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn([2, 3, 4, 4], |_| rng.gen_range(-50.0..50.0)));
    let y = tape.softmax_axis(x, 1).unwrap();
    let l = tape.reshape(x, &[2, 48]).unwrap();
    let _ = tape.softmax_cross_entropy(l, &[3, 47]).unwrap();
    let s = tape.sigmoid(x);
    let _ = tape.mul(y, s).unwrap();
    assert_eq!(tape.nonfinite_origin(), None);
}

proptest! {
    #[test]
    fn softmax_slices_are_distributions(
        values in prop::collection::vec(-30.0f32..30.0, 2 * 3 * 4),
        axis in 0usize..3,
    ) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([2, 3, 4], values).unwrap());
        let y = tape.softmax_axis(x, axis).unwrap();
        let v = tape.value(y);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        let shape = [2usize, 3, 4];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f32 = (0..shape[axis]).map(|k| v.data()[(o * shape[axis] + k) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clip_is_identity_under_threshold(grads in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let mut store = ParamStore::<f64>::new();
        let n = grads.len();
        store.insert_param("p", Tensor::zeros([n]));
        store.param_mut("p").unwrap().grad = Tensor::new([n], grads).unwrap();
        let before = store.clone();
        let max_norm = (n as f64).sqrt() + 1e-9;
        prop_assert_eq!(clip_grad_norm(&mut store, max_norm).unwrap(), 1.0);
        prop_assert_eq!(store, before);
    }

    #[test]
    fn adam_zero_gradient_leaves_params(values in prop::collection::vec(-5.0f32..5.0, 1..10), steps in 1usize..5) {
        let mut store = ParamStore::<f32>::new();
        let n = values.len();
        store.insert_param("p", Tensor::new([n], values).unwrap());
        let before = store.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..steps {
            adam.step(&mut store);
        }
        prop_assert_eq!(store.param("p").unwrap(), before.param("p").unwrap());
        prop_assert_eq!(adam.step, steps as u64);
    }

    #[test]
    fn mul_broadcast_adjoint_sums_stretched_axis(rows in 1usize..6, vals in prop::collection::vec(-2.0f64..2.0, 4)) {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn([rows, 4], |i| (i % 7) as f64 - 3.0));
        let b = tape.leaf(Tensor::new([1, 4], vals.clone()).unwrap());
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let a_val = tape.value(a).data().to_vec();
        for j in 0..4 {
            let expected: f64 = (0..rows).map(|r| a_val[r * 4 + j]).sum();
            prop_assert!((g.get(b).unwrap().data()[j] - expected).abs() < 1e-12);
            for r in 0..rows {
                prop_assert_eq!(g.get(a).unwrap().data()[r * 4 + j], vals[j]);
            }
        }
    }
}
