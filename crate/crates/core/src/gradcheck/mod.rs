//! Central finite-difference gradient checking in `f64`.

mod suite;

pub use suite::{op_suite, GRADCHECK_TOLERANCE};

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the tape's adjoint and a central
/// difference with step `h`, over every coordinate of every input.
///
/// `f` must build a one-element output from the leaves it is given and be
/// deterministic.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Contract("gradcheck needs a scalar-valued function".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64([4], &[0.3, -1.2, 2.5, 0.01]).unwrap();
        let err = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let err = gradcheck(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &[x], DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        assert!(gradcheck(|_, v| Ok(v[0]), &[x], DEFAULT_STEP).is_err());
    }
}
