//! Named parameter storage and binding of parameters onto a tape.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::ops::norm::{BatchStats, BnMode};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A trainable tensor and its accumulated gradient (same shape).
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { value, grad }
    }
}

/// Parameters and non-trainable buffers keyed by layer path, e.g.
/// `backbone.block0.conv.w` or `backbone.block0.bn.running_mean`.
///
/// Keys are kept sorted so iteration (and serialization) order is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert_param(&mut self, key: impl Into<String>, value: Tensor<T>) {
        self.params.insert(key.into(), Param::new(value));
    }

    pub fn insert_buffer(&mut self, key: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(key.into(), value);
    }

    pub fn param(&self, key: &str) -> Result<&Param<T>> {
        self.params.get(key).ok_or_else(|| TensorError::Contract(format!("unknown parameter {key}")))
    }

    pub fn param_mut(&mut self, key: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(key).ok_or_else(|| TensorError::Contract(format!("unknown parameter {key}")))
    }

    pub fn buffer(&self, key: &str) -> Result<&Tensor<T>> {
        self.buffers.get(key).ok_or_else(|| TensorError::Contract(format!("unknown buffer {key}")))
    }

    pub fn buffer_mut(&mut self, key: &str) -> Result<&mut Tensor<T>> {
        self.buffers.get_mut(key).ok_or_else(|| TensorError::Contract(format!("unknown buffer {key}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, key: &str, delta: &Tensor<T>) -> Result<()> {
        let p = self.param_mut(key)?;
        if p.grad.shape() != delta.shape() {
            return Err(TensorError::Shape { op: "accumulate_grad", detail: format!("{key}: {:?} vs {:?}", p.grad.shape(), delta.shape()) });
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += *d;
        }
        Ok(())
    }

    /// Same store with every tensor converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, p)| (k.clone(), Param { value: p.value.cast(), grad: p.grad.cast() })).collect(),
            buffers: self.buffers.iter().map(|(k, b)| (k.clone(), b.cast())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
///
/// Each parameter becomes a tape leaf the first time it is requested, so a
/// key used several times in a forward pass shares one adjoint.
pub struct Session<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    bound: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self { tape: Tape::new(), store, mode, bound: BTreeMap::new(), stats: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(key) {
            return Ok(v);
        }
        let value = self.store.param(key)?.value.clone();
        let v = self.tape.leaf(value);
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    /// Batch norm using the buffers `<prefix>.running_mean/var` and the
    /// parameters `<prefix>.gamma/beta`. Train mode queues a running-stat
    /// update for [`Session::commit_stats`].
    pub fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let store = self.store;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm2d(x, gamma, beta, BnMode::Train)?;
                self.stats.push((prefix.to_string(), stats.expect("train mode yields statistics")));
                Ok(y)
            }
            Mode::Eval => {
                let running_mean = store.buffer(&format!("{prefix}.running_mean"))?.data();
                let running_var = store.buffer(&format!("{prefix}.running_var"))?.data();
                Ok(self.tape.batchnorm2d(x, gamma, beta, BnMode::Eval { running_mean, running_var })?.0)
            }
        }
    }

    /// Runs backward from `loss` and returns the adjoint of every bound
    /// parameter.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.tape.shape(v).to_vec()));
                (k.clone(), g)
            })
            .collect())
    }

    /// Drains queued batch statistics for [`apply_stats`].
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

/// Blends train-mode batch statistics into the store's running buffers.
pub fn apply_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    for (prefix, s) in stats {
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let mut mean = store.buffer(&mean_key)?.clone();
        let mut var = store.buffer(&var_key)?.clone();
        s.blend_into(mean.data_mut(), var.data_mut());
        *store.buffer_mut(&mean_key)? = mean;
        *store.buffer_mut(&var_key)? = var;
    }
    Ok(())
}
