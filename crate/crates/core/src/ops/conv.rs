//! 2-d convolution (im2col + GEMM) and 2x2 max pooling on
//! `(batch, channels, height, width)` tensors.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(d: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("conv2d", "stride must be at least 1");
    }
    if k > d + 2 * pad {
        return shape_err("conv2d", format!("kernel {k} larger than padded input {}", d + 2 * pad));
    }
    Ok((d + 2 * pad - k) / stride + 1)
}

/// Unfolds one sample `(C, H, W)` into a `(C*kh*kw, oh*ow)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if x < 0 || x >= g.w as isize { T::zero() } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `(C, H, W)`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: (B, C, H, W)` with `w: (O, C, kh, kw)`,
    /// plus an optional per-channel `bias: (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[batch, in_c, h, wd], &[out_c, wc, kh, kw]) = (xv.shape(), wv.shape()) else {
            return shape_err("conv2d", format!("input {:?} / kernel {:?} must both be 4-d", xv.shape(), wv.shape()));
        };
        if wc != in_c {
            return shape_err("conv2d", format!("kernel expects {wc} input channels, input has {in_c}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_c] {
                return shape_err("conv2d", format!("bias shape {:?}, expected [{out_c}]", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch,
            in_c,
            h,
            w: wd,
            out_c,
            kh,
            kw,
            stride,
            pad,
            oh: conv_out_extent(h, kh, stride, pad)?,
            ow: conv_out_extent(wd, kw, stride, pad)?,
        };
        let (patch, p) = (geom.patch(), geom.positions());
        let mut cols = vec![T::zero(); batch * patch * p];
        let mut out = vec![T::zero(); batch * out_c * p];
        let sample = in_c * h * wd;
        for b in 0..batch {
            let c = &mut cols[b * patch * p..(b + 1) * patch * p];
            im2col(&xv.data()[b * sample..(b + 1) * sample], &geom, c);
            let o = &mut out[b * out_c * p..(b + 1) * out_c * p];
            gemm(false, false, out_c, p, patch, T::one(), wv.data(), c, T::zero(), o);
            if let Some(bv) = bias {
                for (oc, &bias) in self.value(bv).data().iter().enumerate() {
                    o[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, out_c, geom.oh, geom.ow], out);
        Ok(self.push(value, Op::Conv2d { x, w, bias, geom, cols }))
    }

    /// 2x2 window, stride 2. Odd extents are padded with -inf, so the output
    /// extent is `ceil(d / 2)`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[b, c, h, w] = xv.shape() else {
            return shape_err("maxpool2", format!("4-d input expected, got {:?}", xv.shape()));
        };
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let d = xv.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && xx < w {
                            let i = base + y * w + xx;
                            // Strict comparison keeps the first index on ties;
                            // the first NaN wins outright.
                            if !d[best].is_nan() && (d[i] > d[best] || d[i].is_nan()) {
                                best = i;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    cols: &[T],
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let (patch, p, oc) = (geom.patch(), geom.positions(), geom.out_c);
    let gd = g.data();
    if tape.requires_grad(w) {
        let mut dw = vec![T::zero(); oc * patch];
        for b in 0..geom.batch {
            let gb = &gd[b * oc * p..(b + 1) * oc * p];
            let cb = &cols[b * patch * p..(b + 1) * patch * p];
            gemm(false, true, oc, patch, p, T::one(), gb, cb, T::one(), &mut dw);
        }
        tape.accumulate(grads, w, Tensor::from_parts(tape.shape(w).to_vec(), dw));
    }
    if let Some(bv) = bias {
        if tape.requires_grad(bv) {
            let mut db = vec![T::zero(); oc];
            for b in 0..geom.batch {
                for (c, acc) in db.iter_mut().enumerate() {
                    *acc += gd[(b * oc + c) * p..(b * oc + c + 1) * p].iter().copied().sum::<T>();
                }
            }
            tape.accumulate(grads, bv, Tensor::from_parts(vec![oc], db));
        }
    }
    if tape.requires_grad(x) {
        let sample = geom.in_c * geom.h * geom.w;
        let mut dx = vec![T::zero(); geom.batch * sample];
        let mut dcols = vec![T::zero(); patch * p];
        let wv = tape.value(w).data();
        for b in 0..geom.batch {
            let gb = &gd[b * oc * p..(b + 1) * oc * p];
            gemm(true, false, patch, p, oc, T::one(), wv, gb, T::zero(), &mut dcols);
            col2im(&dcols, geom, &mut dx[b * sample..(b + 1) * sample]);
        }
        tape.accumulate(grads, x, Tensor::from_parts(tape.shape(x).to_vec(), dx));
    }
}

pub(crate) fn maxpool2_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    argmax: &[usize],
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let xv = tape.value(x);
    let mut dx = vec![T::zero(); xv.numel()];
    for (&src, &gv) in argmax.iter().zip(g.data()) {
        dx[src] += gv;
    }
    tape.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_center_sums_neighbourhood() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.get(&[0, 0, 1, 1]).unwrap(), 9.0);
        assert_eq!(v.get(&[0, 0, 0, 0]).unwrap(), 4.0);
        assert_eq!(v.get(&[0, 0, 0, 1]).unwrap(), 6.0);
    }

    #[test]
    fn strided_output_extents() {
        assert_eq!(conv_out_extent(8, 3, 2, 1).unwrap(), 4);
        assert_eq!(conv_out_extent(21, 3, 2, 0).unwrap(), 10);
        assert_eq!(conv_out_extent(21, 3, 2, 1).unwrap(), 11);
        assert!(conv_out_extent(2, 5, 1, 1).is_err());
        assert!(conv_out_extent(8, 3, 0, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 3, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 1).is_err());
    }

    #[test]
    fn bias_is_added_per_channel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([2, 1, 2, 2]));
        let w = tape.constant(Tensor::ones([2, 1, 1, 1]));
        let b = tape.constant(Tensor::new([2], vec![0.5, -1.0]).unwrap());
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(&[1, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(v.get(&[0, 1, 0, 1]).unwrap(), -1.0);
    }

    #[test]
    fn maxpool_values_and_tie_break() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::full([1, 1, 2, 2], 7.0));
        let y = tape.maxpool2(c).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(c).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_odd_extent_pads_with_neg_infinity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 3, 3], &[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0, -9.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[-1.0, -3.0, -7.0, -9.0]);
    }

    #[test]
    fn maxpool_propagates_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, f64::NAN, 9.0, f64::NAN]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert!(tape.value(y).data()[0].is_nan());
    }
}
