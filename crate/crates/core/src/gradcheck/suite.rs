//! Named finite-difference checks covering every differentiable primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, DEFAULT_STEP};
use crate::error::Result;
use crate::ops::norm::BnMode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so relu kinks stay outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces an output to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct adjoint.
fn weighted(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.shape(y), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Runs every primitive check and returns `(name, max relative error)`.
pub fn op_suite() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut push = |name: String, err: f64| out.push((name, err));
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let a = rand_tensor(&mut rng, &[4, 3, 2, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[1, 3, 2, 2], 0.5, 1.5);
    for (name, seed) in [("add", 10), ("sub", 11), ("mul", 12), ("div", 13)] {
        let err = gradcheck(
            |t, v| {
                let y = match name {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    "mul" => t.mul(v[0], v[1])?,
                    _ => t.div(v[0], v[1])?,
                };
                weighted(t, y, seed)
            },
            &[a.clone(), b.clone()],
            DEFAULT_STEP,
        )?;
        push(format!("{name} (broadcast)"), err);
    }
    let row = rand_tensor(&mut rng, &[1, 2], 0.5, 1.5);
    let mat = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let err = gradcheck(|t, v| { let y = t.add(v[0], v[1])?; weighted(t, y, 14) }, &[mat, row], DEFAULT_STEP)?;
    push("add (row bias)".into(), err);
    let s = rand_tensor(&mut rng, &[1], 0.5, 1.5);
    let err = gradcheck(|t, v| { let y = t.mul(v[0], v[1])?; weighted(t, y, 15) }, &[a, s], DEFAULT_STEP)?;
    push("mul (scalar broadcast)".into(), err);

    let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let err = gradcheck(
        |t, v| {
            let y = t.mul_scalar(v[0], -2.5);
            let y = t.add_scalar(y, 0.75);
            let y = t.transpose(y)?;
            let y = t.reshape(y, &[2, 6])?;
            weighted(t, y, 20)
        },
        &[x],
        DEFAULT_STEP,
    )?;
    push("scalar ops, transpose, reshape".into(), err);

    let a = rand_tensor(&mut rng, &[5, 7], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[7, 3], -1.0, 1.0);
    let err = gradcheck(|t, v| { let y = t.matmul(v[0], v[1])?; weighted(t, y, 30) }, &[a, b], DEFAULT_STEP)?;
    push("matmul".into(), err);

    for (stride, pad, k, size) in [(1, 1, 3, 5), (2, 1, 3, 6), (2, 0, 3, 7), (1, 0, 1, 4)] {
        let x = rand_tensor(&mut rng, &[2, 3, size, size], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, k, k], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let err = gradcheck(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted(t, y, 40)
            },
            &[x, w, b],
            DEFAULT_STEP,
        )?;
        push(format!("conv2d k{k} s{stride} p{pad}"), err);
    }

    // Distinct levels 0.01 apart, shuffled: no two window entries within 2h.
    let mut levels: Vec<f64> = (0..2 * 3 * 5 * 5).map(|i| i as f64 * 0.01).collect();
    for i in (1..levels.len()).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new([2, 3, 5, 5], levels)?;
    let err = gradcheck(|t, v| { let y = t.maxpool2(v[0])?; weighted(t, y, 50) }, &[x], DEFAULT_STEP)?;
    push("maxpool2".into(), err);

    let x = away_from_zero(&mut rng, &[3, 5]);
    let err = gradcheck(|t, v| { let y = t.relu(v[0]); weighted(t, y, 60) }, &[x.clone()], DEFAULT_STEP)?;
    push("relu".into(), err);
    let err = gradcheck(|t, v| { let y = t.sigmoid(v[0]); weighted(t, y, 61) }, &[x], DEFAULT_STEP)?;
    push("sigmoid".into(), err);

    let x = rand_tensor(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
    let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    let err = gradcheck(
        |t, v| {
            let (y, _) = t.batchnorm2d(v[0], v[1], v[2], BnMode::Train)?;
            weighted(t, y, 70)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        DEFAULT_STEP,
    )?;
    push("batchnorm2d train".into(), err);
    let (rm, rv) = ([0.3, -0.2], [1.7, 0.6]);
    let err = gradcheck(
        |t, v| {
            let (y, _) = t.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { running_mean: &rm, running_var: &rv })?;
            weighted(t, y, 71)
        },
        &[x, gamma, beta],
        DEFAULT_STEP,
    )?;
    push("batchnorm2d eval".into(), err);

    let x = rand_tensor(&mut rng, &[2, 4, 3, 3], -2.0, 2.0);
    for axis in 0..4 {
        let err = gradcheck(
            |t, v| {
                let y = t.softmax_axis(v[0], axis)?;
                weighted(t, y, 80 + axis as u64)
            },
            &[x.clone()],
            DEFAULT_STEP,
        )?;
        push(format!("softmax axis {axis}"), err);
    }

    let logits = rand_tensor(&mut rng, &[6, 5], -3.0, 3.0);
    let err = gradcheck(|t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2, 1, 3]), &[logits.clone()], DEFAULT_STEP)?;
    push("softmax cross-entropy".into(), err);
    let target = rand_tensor(&mut rng, &[6, 5], 0.0, 1.0);
    let err = gradcheck(|t, v| t.mse(v[0], &target), &[logits], DEFAULT_STEP)?;
    push("mse".into(), err);

    let a = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5, 6], -1.0, 1.0);
    let err = gradcheck(
        |t, v| {
            let y = t.pairwise_sq_dist(v[0], v[1])?;
            weighted(t, y, 100)
        },
        &[a.clone(), b.clone()],
        DEFAULT_STEP,
    )?;
    push("pairwise squared distance".into(), err);
    let err = gradcheck(
        |t, v| {
            let y = t.pairwise_cosine(v[0], v[1], 1e-8)?;
            weighted(t, y, 101)
        },
        &[a.clone(), b.clone()],
        DEFAULT_STEP,
    )?;
    push("pairwise cosine".into(), err);
    let err = gradcheck(
        |t, v| {
            let ga = t.gather_rows(v[0], &[3, 0, 0, 2, 1])?;
            let y = t.concat(&[ga, v[1]], 1)?;
            let y = t.mean(y);
            let z = t.sum(ga);
            let y = t.add(y, z)?;
            let w = weighted(t, ga, 102)?;
            t.add(y, w)
        },
        &[a, b],
        DEFAULT_STEP,
    )?;
    push("gather, concat, sum, mean".into(), err);
    Ok(out)
}
