//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node that
//! remembers its inputs plus whatever it needs for the adjoint. Nodes are
//! only ever appended, so recording order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use ctm_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Result, TensorError};
use crate::ops::conv::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar { x: Var },
    MulScalar { x: Var, c: T },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Softmax { x: Var, axis: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    GatherRows { x: Var, index: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    PairwiseSqDist { a: Var, b: Var },
    PairwiseCosine { a: Var, b: Var, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed operations so their adjoints can be replayed in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    nonfinite_origin: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), nonfinite_origin: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node (index, op name) whose output went non-finite although
    /// every input was finite. Only tracked in debug builds.
    pub fn nonfinite_origin(&self) -> Option<(usize, &'static str)> {
        self.nonfinite_origin
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op_inputs(&op);
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        if self.nonfinite_origin.is_none()
            && !value.all_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            self.nonfinite_origin = Some((self.nodes.len(), op_name(&op)));
        }
        self.push_raw(value, op, requires_grad)
    }

    /// Reverse sweep from a one-element `loss`, returning adjoints for every
    /// node that depends on a leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds `delta` into the adjoint of `v` if `v` takes gradients.
    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        use crate::ops::{conv, elementwise, norm, reduce};
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => elementwise::binary_backward(self, *kind, *a, *b, g, grads),
            Op::AddScalar { x } => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar { x, c } => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::Matmul { a, b, m, k, n } => elementwise::matmul_backward(self, *a, *b, (*m, *k, *n), g, grads),
            Op::Transpose { x } => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![c, r], d));
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Conv2d { x, w, bias, geom, cols } => conv::conv2d_backward(self, *x, *w, *bias, geom, cols, g, grads),
            Op::MaxPool2 { x, argmax } => conv::maxpool2_backward(self, *x, argmax, g, grads),
            Op::Relu { x } => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(g.data()).map(|(&v, &gv)| if v > T::zero() || v.is_nan() { gv } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Sigmoid { x } => {
                let d = out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                norm::batchnorm_backward(self, (*x, *gamma, *beta), xhat, inv_std, *train, g, grads)
            }
            Op::Softmax { x, axis } => reduce::softmax_backward(self, *x, *axis, out, g, grads),
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                reduce::softmax_ce_backward(self, *logits, targets, probs, g, grads)
            }
            Op::Mse { pred, target } => reduce::mse_backward(self, *pred, target, g, grads),
            Op::Sum { x } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let scale = g.data()[0] / T::lit(xv.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), scale));
            }
            Op::GatherRows { x, index } => reduce::gather_rows_backward(self, *x, index, g, grads),
            Op::Concat { parts, axis } => reduce::concat_backward(self, parts, *axis, g, grads),
            Op::PairwiseSqDist { a, b } => reduce::pairwise_sq_dist_backward(self, *a, *b, g, grads),
            Op::PairwiseCosine { a, b, eps } => reduce::pairwise_cosine_backward(self, *a, *b, *eps, g, grads),
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Binary { a, b, .. } | Op::Matmul { a, b, .. } => vec![*a, *b],
        Op::PairwiseSqDist { a, b } | Op::PairwiseCosine { a, b, .. } => vec![*a, *b],
        Op::AddScalar { x }
        | Op::MulScalar { x, .. }
        | Op::Transpose { x }
        | Op::Reshape { x }
        | Op::MaxPool2 { x, .. }
        | Op::Relu { x }
        | Op::Sigmoid { x }
        | Op::Softmax { x, .. }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::GatherRows { x, .. } => vec![*x],
        Op::Conv2d { x, w, bias, .. } => {
            let mut v = vec![*x, *w];
            v.extend(bias);
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::Mse { pred, .. } => vec![*pred],
        Op::Concat { parts, .. } => parts.clone(),
    }
}

#[cfg(debug_assertions)]
fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { .. } => "binary",
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool2 { .. } => "maxpool2",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::Softmax { .. } => "softmax",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Mse { .. } => "mse",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::GatherRows { .. } => "gather_rows",
        Op::Concat { .. } => "concat",
        Op::PairwiseSqDist { .. } => "pairwise_sq_dist",
        Op::PairwiseCosine { .. } => "pairwise_cosine",
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss through a leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
