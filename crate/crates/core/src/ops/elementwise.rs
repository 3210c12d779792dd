//! Element-wise arithmetic with leading-axis broadcasting, matmul and
//! shape plumbing.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tape::{BinaryKind, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

/// For each element of `a`, the flat index of the `b` element it pairs
/// with. `None` when the shapes are equal.
///
/// `b` must have the same rank as `a` with each extent either equal or 1,
/// or hold a single element.
pub(crate) fn broadcast_map(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let total = numel(a);
    if numel(b) == 1 {
        return Ok(Some(vec![0; total]));
    }
    if a.len() != b.len() || a.iter().zip(b).any(|(&da, &db)| db != da && db != 1) {
        return shape_err("broadcast", format!("{b:?} does not broadcast onto {a:?}"));
    }
    // Stride of each axis in b, zero where b is stretched.
    let rank = a.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if b[ax] == 1 { 0 } else { s };
        s *= b[ax];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < a[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Some(map))
}

fn apply<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let map = broadcast_map(av.shape(), bv.shape())?;
        let data = match &map {
            None => av.data().iter().zip(bv.data()).map(|(&x, &y)| apply(kind, x, y)).collect(),
            Some(m) => av.data().iter().zip(m).map(|(&x, &j)| apply(kind, x, bv.data()[j])).collect(),
        };
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(value, Op::Binary { kind, a, b }))
    }

    /// `a + b`, with `b` broadcast onto `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::MulScalar { x, c })
    }

    /// `[m x k] * [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return shape_err("matmul", format!("{:?} x {:?} is not a 2-d product", av.shape(), bv.shape()));
        };
        if k != k2 {
            return shape_err("matmul", format!("inner extents {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, T::one(), av.data(), bv.data(), T::zero(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[r, c] = xv.shape() else {
            return shape_err("transpose", format!("rank-2 tensor expected, got {:?}", xv.shape()));
        };
        let mut d = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = xv.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], d), Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {:?}", xv.shape(), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Collapses every axis after the first: `(B, ...) -> (B, rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = shape.first().copied().unwrap_or(1);
        let rest = numel(shape) / b;
        self.reshape(x, &[b, rest])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }
}

pub(crate) fn binary_backward<T: Scalar>(
    tape: &Tape<T>,
    kind: BinaryKind,
    a: Var,
    b: Var,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let map = broadcast_map(av.shape(), bv.shape()).expect("validated in forward");
    let bj = |i: usize| map.as_ref().map_or(i, |m| m[i]);
    let gd = g.data();

    if tape.requires_grad(a) {
        let d: Vec<T> = match kind {
            BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
            BinaryKind::Mul => (0..gd.len()).map(|i| gd[i] * bv.data()[bj(i)]).collect(),
            BinaryKind::Div => (0..gd.len()).map(|i| gd[i] / bv.data()[bj(i)]).collect(),
        };
        tape.accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), d));
    }
    if tape.requires_grad(b) {
        let mut d = vec![T::zero(); bv.numel()];
        for i in 0..gd.len() {
            let j = bj(i);
            d[j] += match kind {
                BinaryKind::Add => gd[i],
                BinaryKind::Sub => -gd[i],
                BinaryKind::Mul => gd[i] * av.data()[i],
                BinaryKind::Div => {
                    let y = bv.data()[j];
                    -gd[i] * av.data()[i] / (y * y)
                }
            };
        }
        tape.accumulate(grads, b, Tensor::from_parts(bv.shape().to_vec(), d));
    }
}

pub(crate) fn matmul_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    (m, k, n): (usize, usize, usize),
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    if tape.requires_grad(a) {
        // da = g * b^T
        let mut d = vec![T::zero(); m * k];
        gemm(false, true, m, k, n, T::one(), g.data(), tape.value(b).data(), T::zero(), &mut d);
        tape.accumulate(grads, a, Tensor::from_parts(vec![m, k], d));
    }
    if tape.requires_grad(b) {
        // db = a^T * g
        let mut d = vec![T::zero(); k * n];
        gemm(true, false, k, n, m, T::one(), tape.value(a).data(), g.data(), T::zero(), &mut d);
        tape.accumulate(grads, b, Tensor::from_parts(vec![k, n], d));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn mul_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mask_broadcast_over_samples() {
        let mut tape = Tape::<f32>::new();
        let r = tape.constant(Tensor::ones([25, 16, 4, 4]));
        let p = tape.constant(Tensor::from_fn([1, 16, 4, 4], |i| i as f32));
        let y = tape.mul(r, p).unwrap();
        assert_eq!(tape.shape(y), &[25, 16, 4, 4]);
        let v = tape.value(y);
        assert_eq!(v.get(&[24, 15, 3, 3]).unwrap(), 255.0);
        assert_eq!(v.get(&[7, 1, 0, 2]).unwrap(), 18.0);
    }

    #[test]
    fn add_zero_is_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let data = vec![1.0e-30f32, 0.0, 3.5, f32::MIN_POSITIVE, -7.25e12];
        let x = tape.constant(Tensor::new([5], data.clone()).unwrap());
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, zero).unwrap();
        let bits: Vec<u32> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
        let expected: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, expected);
    }

    #[test]
    fn broadcast_middle_axis() {
        let map = broadcast_map(&[2, 3, 2], &[2, 1, 2]).unwrap().unwrap();
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::ones([3, 2]));
        assert!(tape.add(a, b).is_err());
        let c = tape.constant(Tensor::ones([2]));
        assert!(tape.mul(a, c).is_err());
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);

        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[3, 2], &[1.5, -2.0, 0.25, 9.0, 4.0, -7.5]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        assert!(tape.matmul(a, x).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_propagates_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[f64::NAN, -1.0]));
        let y = tape.relu(x);
        assert!(tape.value(y).data()[0].is_nan());
        assert_eq!(tape.value(y).data()[1], 0.0);
    }
}
