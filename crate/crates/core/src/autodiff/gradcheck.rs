//! Central finite-difference verification of tape gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::DiffError;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences over every input coordinate. Returns the maximum of
/// `|analytic − fd| / max(1, |fd|)`.
pub fn gradcheck<F>(f: F, input: &Tensor, step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, DiffError>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    gradcheck_at(f, input, step, &coords)
}

/// Like [`gradcheck`] but only perturbs the listed coordinates. Useful when
/// the input is large and the forward pass expensive.
pub fn gradcheck_at<F>(
    f: F,
    input: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, DiffError>,
{
    let mut tape = Tape::new();
    let x = tape.var(input.clone());
    let out = f(&mut tape, x)?;
    if !tape.value(out).is_scalar() {
        return Err(DiffError::ShapeMismatch {
            op: "gradcheck",
            details: format!("function output {:?} is not scalar", tape.value(out).shape()),
        });
    }
    tape.value(out).check_finite("gradcheck")?;
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let eval = |data: &[f64]| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let xp = t.var(Tensor::new(input.shape().to_vec(), data.to_vec()));
        let o = f(&mut t, xp)?;
        let v = t.value(o).item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite { op: "gradcheck" });
        }
        Ok(v)
    };

    let mut max_err: f64 = 0.0;
    let base = input.data().to_vec();
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / fd.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_norm_gradient() {
        // f(x) = ||x||^2 at [1, 2]: gradient is 2x, agreement should be tight.
        let err = gradcheck(
            |tape, x| tape.sum_sq(x),
            &Tensor::vector(vec![1.0, 2.0]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "gradcheck error {err}");
    }

    #[test]
    fn rejects_non_scalar_output() {
        let r = gradcheck(
            |tape, x| Ok(tape.scale(x, 2.0)),
            &Tensor::vector(vec![1.0, 2.0]),
            DEFAULT_STEP,
        );
        assert!(r.is_err());
    }
}
