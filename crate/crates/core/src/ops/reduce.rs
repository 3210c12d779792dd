//! Normalizations, reductions, losses and row plumbing.

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// `(outer, len, inner)` strides of `axis` in a row-major shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn pair_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        (&[m, d], &[q, d2]) if d == d2 => Ok((m, q, d)),
        _ => shape_err(op, format!("expected [M x D] and [Q x D], got {a:?} and {b:?}")),
    }
}

impl<T: Scalar> Tape<T> {
    /// Max-subtracted softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return shape_err("softmax_axis", format!("axis {axis} for shape {:?}", xv.shape()));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                // Accumulated in f64 so each probability is rounded once.
                let max = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max).to_f64().unwrap_or(f64::NAN);
                let e: Vec<f64> = (0..len).map(|k| (d[at(k)].to_f64().unwrap_or(f64::NAN) - max).exp()).collect();
                let total: f64 = e.iter().sum();
                for (k, v) in e.into_iter().enumerate() {
                    out[at(k)] = T::lit(v / total);
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]` for
    /// `logits: [B x C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[b, c] = lv.shape() else {
            return shape_err("softmax_cross_entropy", format!("[B x C] logits expected, got {:?}", lv.shape()));
        };
        if targets.len() != b {
            return shape_err("softmax_cross_entropy", format!("{} targets for {b} rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index { index: bad, extent: c });
        }
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / T::lit(b as f64));
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return shape_err("mse", format!("{:?} vs target {:?}", pv.shape(), target.shape()));
        }
        let n = T::lit(pv.numel() as f64);
        let loss = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        let target = target.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::lit(xv.numel() as f64));
        self.push(value, Op::Mean { x })
    }

    /// Selects rows along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = *xv.shape().first().ok_or_else(|| TensorError::Contract("gather_rows on a scalar".into()))?;
        let stride = xv.numel() / rows;
        let mut out = Vec::with_capacity(index.len() * stride);
        for &i in index {
            if i >= rows {
                return Err(TensorError::Index { index: i, extent: rows });
            }
            out.extend_from_slice(&xv.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        if index.is_empty() {
            return shape_err("gather_rows", "empty index");
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::GatherRows { x, index: index.to_vec() }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return shape_err("concat", format!("{s:?} vs {first:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// `y[i, j] = |a_i - b_j|^2` for `a: [M x D]`, `b: [Q x D]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, q, d) = pair_dims("pairwise_sq_dist", self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * q);
        for i in 0..m {
            let ai = &ad[i * d..(i + 1) * d];
            for j in 0..q {
                let bj = &bd[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, q], out), Op::PairwiseSqDist { a, b }))
    }

    /// `y[i, j] = a_i . b_j / (|a_i| |b_j| + eps)`.
    pub fn pairwise_cosine(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (m, q, d) = pair_dims("pairwise_cosine", self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let norms = |x: &[T], n: usize| -> Vec<T> { (0..n).map(|i| x[i * d..(i + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt()).collect() };
        let (na, nb) = (norms(ad, m), norms(bd, q));
        let mut out = Vec::with_capacity(m * q);
        for i in 0..m {
            for j in 0..q {
                let dot: T = ad[i * d..(i + 1) * d].iter().zip(&bd[j * d..(j + 1) * d]).map(|(&x, &y)| x * y).sum();
                out.push(dot / (na[i] * nb[j] + eps));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, q], out), Op::PairwiseCosine { a, b, eps }))
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    axis: usize,
    y: &Tensor<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    tape.accumulate(grads, x, Tensor::from_parts(y.shape().to_vec(), dx));
}

pub(crate) fn softmax_ce_backward<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    targets: &[usize],
    probs: &[T],
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let shape = tape.shape(logits).to_vec();
    let c = shape[1];
    let scale = g.data()[0] / T::lit(targets.len() as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (r, &t) in targets.iter().enumerate() {
        d[r * c + t] -= scale;
    }
    tape.accumulate(grads, logits, Tensor::from_parts(shape, d));
}

pub(crate) fn mse_backward<T: Scalar>(tape: &Tape<T>, pred: Var, target: &[T], g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let pv = tape.value(pred);
    let scale = T::lit(2.0) * g.data()[0] / T::lit(pv.numel() as f64);
    let d = pv.data().iter().zip(target).map(|(&p, &t)| scale * (p - t)).collect();
    tape.accumulate(grads, pred, Tensor::from_parts(pv.shape().to_vec(), d));
}

pub(crate) fn gather_rows_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    index: &[usize],
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let xv = tape.value(x);
    let stride = xv.numel() / xv.shape()[0];
    let mut dx = vec![T::zero(); xv.numel()];
    for (r, &i) in index.iter().enumerate() {
        for (dst, &src) in dx[i * stride..(i + 1) * stride].iter_mut().zip(&g.data()[r * stride..(r + 1) * stride]) {
            *dst += src;
        }
    }
    tape.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
}

pub(crate) fn concat_backward<T: Scalar>(
    tape: &Tape<T>,
    parts: &[Var],
    axis: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (outer, total, inner) = axis_split(g.shape(), axis);
    let mut offset = 0;
    for &p in parts {
        let shape = tape.shape(p).to_vec();
        let chunk = shape[axis] * inner;
        if tape.requires_grad(p) {
            let mut d = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                let start = o * total * inner + offset;
                d.extend_from_slice(&g.data()[start..start + chunk]);
            }
            tape.accumulate(grads, p, Tensor::from_parts(shape, d));
        }
        offset += chunk;
    }
}

pub(crate) fn pairwise_sq_dist_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (m, d) = (av.shape()[0], av.shape()[1]);
    let q = bv.shape()[0];
    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
    let mut da = vec![T::zero(); m * d];
    let mut db = vec![T::zero(); q * d];
    let two = T::lit(2.0);
    for i in 0..m {
        for j in 0..q {
            let s = two * gd[i * q + j];
            for k in 0..d {
                let diff = s * (ad[i * d + k] - bd[j * d + k]);
                da[i * d + k] += diff;
                db[j * d + k] -= diff;
            }
        }
    }
    tape.accumulate(grads, a, Tensor::from_parts(vec![m, d], da));
    tape.accumulate(grads, b, Tensor::from_parts(vec![q, d], db));
}

pub(crate) fn pairwise_cosine_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    eps: T,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (m, d) = (av.shape()[0], av.shape()[1]);
    let q = bv.shape()[0];
    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
    let norm = |x: &[T]| x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let na: Vec<T> = (0..m).map(|i| norm(&ad[i * d..(i + 1) * d])).collect();
    let nb: Vec<T> = (0..q).map(|j| norm(&bd[j * d..(j + 1) * d])).collect();
    let mut da = vec![T::zero(); m * d];
    let mut db = vec![T::zero(); q * d];
    for i in 0..m {
        let ai = &ad[i * d..(i + 1) * d];
        for j in 0..q {
            let bj = &bd[j * d..(j + 1) * d];
            let dot: T = ai.iter().zip(bj).map(|(&x, &y)| x * y).sum();
            let den = na[i] * nb[j] + eps;
            let gij = gd[i * q + j];
            // d/da [dot / (|a||b| + eps)] = b/den - dot |b| a / (|a| den^2)
            let ca = if na[i] > T::zero() { dot * nb[j] / (na[i] * den * den) } else { T::zero() };
            let cb = if nb[j] > T::zero() { dot * na[i] / (nb[j] * den * den) } else { T::zero() };
            for k in 0..d {
                da[i * d + k] += gij * (bj[k] / den - ca * ai[k]);
                db[j * d + k] += gij * (ai[k] / den - cb * bj[k]);
            }
        }
    }
    tape.accumulate(grads, a, Tensor::from_parts(vec![m, d], da));
    tape.accumulate(grads, b, Tensor::from_parts(vec![q, d], db));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_small_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.5, 1.5]));
        let y = tape.softmax_axis(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax_axis(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn channel_softmax_normalizes_every_location() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([1, 16, 4, 4], |i| ((i * 37) % 11) as f32 - 5.0));
        let y = tape.softmax_axis(x, 1).unwrap();
        let v = tape.value(y);
        for loc in 0..16 {
            let s: f32 = (0..16).map(|c| v.data()[c * 16 + loc]).sum();
            assert!((s - 1.0).abs() < 1e-6, "location {loc} sums to {s}");
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([2, 2]));
        assert!(tape.softmax_axis(x, 2).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([3, 5], 0.7));
        let l = tape.softmax_cross_entropy(x, &[0, 4, 2]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.softmax_cross_entropy(x, &[0, 5, 1]), Err(TensorError::Index { index: 5, extent: 5 })));
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::<f64>::new();
        let target = t(&[2, 2], &[0.1, 0.9, -3.0, 4.0]);
        let x = tape.constant(target.clone());
        let l = tape.mse(x, &target).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn squared_distance_example() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let q = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let d = tape.pairwise_sq_dist(s, q).unwrap();
        assert_eq!(tape.value(d).data(), &[25.0, 0.0]);
    }

    #[test]
    fn cosine_parallel_and_orthogonal() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2], &[2.0, 0.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 0.0, 0.0, 3.0]));
        let c = tape.pairwise_cosine(a, b, 1e-8).unwrap();
        let v = tape.value(c).data();
        assert!((v[0] - 1.0).abs() < 1e-8);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn concat_and_gather() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let g = tape.gather_rows(a, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        assert!(tape.gather_rows(a, &[2]).is_err());
    }
}
