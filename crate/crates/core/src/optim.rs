//! Adam with additive L2 weight decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param` before the moment
    /// updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment buffers keyed like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected update of every parameter from its `grad`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));
        for (key, p) in store.params_mut() {
            let shape = p.value.shape().to_vec();
            let m = self.first.entry(key.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second.entry(key.clone()).or_insert_with(|| Tensor::zeros(shape));
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + wd * *x;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm over every parameter gradient.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> T {
    store.params().map(|(_, p)| p.grad.sq_norm()).sum::<T>().sqrt()
}

/// Rescales all gradients jointly when their global norm exceeds
/// `max_norm`. Returns the factor applied (1 when untouched).
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(store).as_f64();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let s = T::lit(scale);
    for (_, p) in store.params_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
    }
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.insert_param("p", Tensor::scalar(value));
        store.param_mut("p").unwrap().grad = Tensor::scalar(grad);
        store
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = single(1.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store);
        // mhat = 1, vhat = 1: 1 - 0.001 * 1 / (1 + 1e-8)
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((store.param("p").unwrap().value.item().unwrap() - expected).abs() < 1e-12);
        assert!((store.param("p").unwrap().value.item().unwrap() - 0.999).abs() < 1e-6);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_a_fixed_point() {
        let mut store = single(0.37, 0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.param("p").unwrap().value.item().unwrap(), 0.37);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut store = single(2.0, 0.0);
        let mut adam = AdamState::new(AdamConfig { weight_decay: 0.5, ..AdamConfig::default() });
        adam.step(&mut store);
        assert!(store.param("p").unwrap().value.item().unwrap() < 2.0);
        assert!((adam.first["p"].item().unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_jointly() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("a", Tensor::zeros([1]));
        store.insert_param("b", Tensor::zeros([1]));
        store.param_mut("a").unwrap().grad = Tensor::full([1], 6.0);
        store.param_mut("b").unwrap().grad = Tensor::full([1], 8.0);
        let s = clip_grad_norm(&mut store, 5.0).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(store.param("a").unwrap().grad.data(), &[3.0]);
        assert_eq!(store.param("b").unwrap().grad.data(), &[4.0]);
    }

    #[test]
    fn clipping_below_threshold_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        store.insert_param("a", Tensor::zeros([2]));
        store.param_mut("a").unwrap().grad = Tensor::new([2], vec![0.1f32, -0.3]).unwrap();
        let before = store.clone();
        assert_eq!(clip_grad_norm(&mut store, 10.0).unwrap(), 1.0);
        assert_eq!(store, before);
    }
}
