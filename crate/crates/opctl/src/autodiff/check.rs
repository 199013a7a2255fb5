//! Finite-difference gradient verification.

use crate::autodiff::tape::{Tape, Value};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds a scalar objective on a fresh tape from the given leaf tensors.
/// The inputs are registered with `requires_grad` so their gradients are
/// readable after backward.
pub trait TapeFn {
    fn build(&self, tape: &mut Tape, inputs: &[Value]) -> Result<Value>;
}

impl<F> TapeFn for F
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    fn build(&self, tape: &mut Tape, inputs: &[Value]) -> Result<Value> {
        self(tape, inputs)
    }
}

fn eval_at(f: &dyn TapeFn, point: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vals: Vec<Value> = point
        .iter()
        .map(|t| tape.input(t.clone(), false))
        .collect::<Result<_>>()?;
    let root = f.build(&mut tape, &vals)?;
    tape.value(root).item()
}

/// Compares analytic gradients against central finite differences at every
/// coordinate of every input. Returns the max over coordinates of
/// `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check(f: &dyn TapeFn, point: &[Tensor], h: f64) -> Result<f64> {
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, point, h, &coords)
}

/// As [`grad_check`], restricted to the listed `(input, flat index)` pairs.
pub fn grad_check_coords(
    f: &dyn TapeFn,
    point: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::invalid("grad_check: step h must be positive"));
    }
    let mut tape = Tape::new();
    let vals: Vec<Value> = point
        .iter()
        .map(|t| tape.input(t.clone(), true))
        .collect::<Result<_>>()?;
    let root = f.build(&mut tape, &vals)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::invalid("grad_check: objective must be scalar"));
    }
    tape.backward_free(root)?;
    let analytic: Vec<Option<Vec<f64>>> = vals
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.data().to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = point.to_vec();
    for &(i, j) in coords {
        let base = point[i].data()[j];
        perturbed[i].data_mut()[j] = base + h;
        let up = eval_at(f, &perturbed)?;
        perturbed[i].data_mut()[j] = base - h;
        let down = eval_at(f, &perturbed)?;
        perturbed[i].data_mut()[j] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::non_finite_at(
                "grad_check",
                format!("objective at perturbed input {i}[{j}]"),
            ));
        }
        let fd = (up - down) / (2.0 * h);
        let an = analytic[i].as_ref().map_or(0.0, |g| g[j]);
        let err = (an - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let f = |tape: &mut Tape, xs: &[Value]| tape.square(xs[0]);
        let err = grad_check(&f, &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn constant_has_zero_error() {
        let f = |tape: &mut Tape, _: &[Value]| tape.scalar(7.0);
        let err = grad_check(&f, &[Tensor::scalar(0.4)], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn composed_ops_match_finite_differences() {
        // exp(sum(tanh(x) * sin(x))) over a small vector
        let f = |tape: &mut Tape, xs: &[Value]| {
            let t = tape.tanh(xs[0])?;
            let s = tape.sin(xs[0])?;
            let p = tape.mul(t, s)?;
            let total = tape.sum_all(p)?;
            tape.exp(total)
        };
        let x = Tensor::vector(vec![0.3, -0.8, 1.1, 0.05]);
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err <= 1e-9, "err {err}");
    }
}
