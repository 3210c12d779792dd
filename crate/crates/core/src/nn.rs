//! Layer building blocks: parameter registration with initialization, and
//! the matching forward helpers on a [`Session`].

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Registers `<prefix>.w: (out_c, in_c, k, k)` and `<prefix>.b: (out_c)`.
pub fn add_conv<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, in_c: usize, out_c: usize, k: usize, rng: &mut R) {
    store.insert_param(format!("{prefix}.w"), kaiming_uniform(&[out_c, in_c, k, k], in_c * k * k, rng));
    store.insert_param(format!("{prefix}.b"), Tensor::zeros([out_c]));
}

/// Registers affine `gamma`/`beta` and the running-statistic buffers.
pub fn add_batchnorm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert_param(format!("{prefix}.gamma"), Tensor::ones([c]));
    store.insert_param(format!("{prefix}.beta"), Tensor::zeros([c]));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros([c]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones([c]));
}

/// Registers `<prefix>.w: (in, out)` and `<prefix>.b: (1, out)`.
pub fn add_linear<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, inputs: usize, outputs: usize, rng: &mut R) {
    store.insert_param(format!("{prefix}.w"), kaiming_uniform(&[inputs, outputs], inputs, rng));
    store.insert_param(format!("{prefix}.b"), Tensor::zeros([1, outputs]));
}

/// conv (`<prefix>.conv`) -> batch norm (`<prefix>.bn`) -> relu.
pub fn add_conv_block<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, in_c: usize, out_c: usize, k: usize, rng: &mut R) {
    add_conv(store, &format!("{prefix}.conv"), in_c, out_c, k, rng);
    add_batchnorm(store, &format!("{prefix}.bn"), out_c);
}

impl<T: Scalar> Session<'_, T> {
    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn conv_block(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.conv"), x, stride, pad)?;
        let y = self.batchnorm(&format!("{prefix}.bn"), y)?;
        Ok(self.tape.relu(y))
    }

    /// `x: (B, in) -> (B, out)`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }
}
