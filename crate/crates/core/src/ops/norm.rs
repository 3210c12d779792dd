//! Per-channel batch normalization over `(batch, height, width)`.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { running_mean: &'a [T], running_var: &'a [T] },
}

/// Batch statistics observed by a train-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity blended into running statistics.
    pub var: Vec<T>,
}

impl<T: Scalar> BatchStats<T> {
    /// Exponential moving average update with momentum 0.1.
    pub fn blend_into(&self, running_mean: &mut [T], running_var: &mut [T]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel of
    /// `x: (B, C, H, W)`.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let &[b, c, h, w] = xv.shape() else {
            return shape_err("batchnorm2d", format!("4-d input expected, got {:?}", xv.shape()));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batchnorm2d", format!("affine parameters must have shape [{c}]"));
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::lit(BN_EPS);
        let d = xv.data();

        let (mean, inv_std, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for n in 0..b {
                        s += d[(n * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let mu = s / T::lit(count as f64);
                    let mut ss = T::zero();
                    for n in 0..b {
                        ss += d[(n * c + ch) * plane..][..plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / T::lit(count as f64);
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let unbiased = if count > 1 {
                    let k = T::lit(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * k).collect()
                } else {
                    var
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, inv_std, Some(stats))
            }
            BnMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return shape_err("batchnorm2d", format!("running statistics must have {c} entries"));
                }
                let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), inv_std, None)
            }
        };

        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (d[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, h, w], out);
        let train = matches!(mode, BnMode::Train);
        let var = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train });
        Ok((var, stats))
    }
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    tape: &Tape<T>,
    (x, gamma, beta): (Var, Var, Var),
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let &[b, c, h, w] = g.shape() else { unreachable!("batchnorm output is 4-d") };
    let plane = h * w;
    let count = T::lit((b * plane) as f64);
    let gd = g.data();
    let gamma_v = tape.value(gamma).data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += gd[i] * xhat[i];
                dbeta[ch] += gd[i];
            }
        }
    }

    if tape.requires_grad(x) {
        let mut dx = vec![T::zero(); gd.len()];
        for ch in 0..c {
            let k = gamma_v[ch] * inv_std[ch];
            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
            let (s1, s2) = (dbeta[ch], dgamma[ch]);
            for n in 0..b {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = if train { k * (gd[i] - (s1 + xhat[i] * s2) / count) } else { k * gd[i] };
                }
            }
        }
        tape.accumulate(grads, x, Tensor::from_parts(vec![b, c, h, w], dx));
    }
    tape.accumulate(grads, gamma, Tensor::from_parts(vec![c], dgamma));
    tape.accumulate(grads, beta, Tensor::from_parts(vec![c], dbeta));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([3, 2, 2, 2], 4.0));
        let gamma = tape.constant(Tensor::ones([2]));
        let beta = tape.constant(Tensor::zeros([2]));
        let (y, stats) = tape.batchnorm2d(x, gamma, beta, BnMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![4.0, 4.0]);
        assert_eq!(stats.var, vec![0.0, 0.0]);
    }

    #[test]
    fn single_element_is_guarded_by_eps() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1], 3.0));
        let gamma = tape.constant(Tensor::ones([1]));
        let beta = tape.constant(Tensor::full([1], 0.5));
        let (y, _) = tape.batchnorm2d(x, gamma, beta, BnMode::Train).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 2, 1, 1], &[3.0, -1.0]).unwrap());
        let gamma = tape.constant(Tensor::from_f64([2], &[2.0, 1.0]).unwrap());
        let beta = tape.constant(Tensor::from_f64([2], &[0.0, 1.0]).unwrap());
        let rm = [1.0, 0.0];
        let rv = [4.0 - BN_EPS, 1.0 - BN_EPS];
        let (y, stats) = tape.batchnorm2d(x, gamma, beta, BnMode::Eval { running_mean: &rm, running_var: &rv }).unwrap();
        assert!(stats.is_none());
        let v = tape.value(y).data();
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert!((v[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn running_stats_blend() {
        let stats = BatchStats { mean: vec![1.0f64], var: vec![3.0] };
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        stats.blend_into(&mut rm, &mut rv);
        assert!((rm[0] - 0.1).abs() < 1e-15);
        assert!((rv[0] - 1.2).abs() < 1e-15);
    }
}
