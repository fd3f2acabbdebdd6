//! Central finite-difference gradient checking.
//!
//! The analytic gradient comes from the `f32` tape. The numeric gradient is
//! computed by evaluating the same function on an `f64` tape, so rounding in
//! the difference quotient stays far below the tolerances we check.

use crate::{Element, Result, Tape, Tensor, Var};

/// A scalar-valued function that can be evaluated at any element precision.
pub trait ScalarFn {
    fn eval<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<S: ScalarFn>(f: &S, x: &Tensor<f32>, h: f64) -> Result<f64> {
    Ok(grad_check_report(f, x, h)?.max_rel_error)
}

pub fn grad_check_report<S: ScalarFn>(f: &S, x: &Tensor<f32>, h: f64) -> Result<GradCheckReport> {
    let analytic: Vec<f64> = {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone(), true);
        let y = f.eval(&mut tape, xv)?;
        let grads = tape.backward(y)?;
        grads.get_or_zeros(&tape, xv).data().iter().map(|&g| g as f64).collect()
    };

    let base: Tensor<f64> = x.cast();
    let eval_at = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(probe, false);
        let y = f.eval(&mut tape, xv)?;
        Ok(tape.value(y).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval_at(plus)? - eval_at(minus)?) / (2.0 * h));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumFn;
    impl ScalarFn for SumFn {
        fn eval<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
            tape.sum(x)
        }
    }

    struct SoftmaxXent;
    impl ScalarFn for SoftmaxXent {
        fn eval<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
            tape.cross_entropy(x, &[2])
        }
    }

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let err = grad_check(&SumFn, &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn cross_entropy_on_logit_row() {
        let x = Tensor::matrix(1, 4, vec![0.3, -1.2, 0.8, 0.05]).unwrap();
        let err = grad_check(&SoftmaxXent, &x, 1e-3).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
