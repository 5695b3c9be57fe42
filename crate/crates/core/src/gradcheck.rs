//! Central finite-difference gradient checking.
//!
//! [`check_gradients`] is the oracle for every differentiable operation: it
//! compares the tape's analytic gradient against a two-sided difference
//! quotient, coordinate by coordinate. The function under test must be
//! smooth at the evaluation point; callers are responsible for keeping
//! random inputs away from relu/abs/clamp kinks.

use crate::error::Error;
use crate::tensor::{Graph, Tensor};
use crate::Result;

/// Max over coordinates of `|analytic - central difference| / max(1,
/// |analytic|)` for the scalar function `f` evaluated at `x`.
///
/// `f` receives a fresh graph and the tracked variable; it must return a
/// single-element tensor. `h` is the difference step, restricted to
/// `[1e-7, 1e-3]` (outside that window the quotient drowns in either
/// truncation or rounding error).
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Graph, &Tensor) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Eval {
            detail: format!("difference step {h} outside [1e-7, 1e-3]"),
        });
    }

    let eval = |values: &[f64]| -> Result<f64> {
        let g = Graph::new();
        let v = g.var(&Tensor::new(x.shape().to_vec(), values.to_vec())?);
        let y = f(&g, &v)?;
        let out = y.item()?;
        if !out.is_finite() {
            return Err(Error::Eval {
                detail: format!("function evaluated to non-finite value {out}"),
            });
        }
        Ok(out)
    };

    // Analytic pass.
    let g = Graph::new();
    let v = g.var(x);
    let y = f(&g, &v)?;
    let y0 = y.item()?;
    if !y0.is_finite() {
        return Err(Error::Eval {
            detail: format!("function evaluated to non-finite value {y0}"),
        });
    }
    let grads = g.backward(&y)?;
    let analytic: Vec<f64> = match grads.get(&v) {
        Some(buf) => buf.to_vec(),
        // The root does not depend on x at all; gradient is identically 0.
        None => vec![0.0; x.numel()],
    };

    // Central differences, one coordinate at a time.
    let mut worst = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_constant_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 4.0, 0.01, 2.2, -0.5]).unwrap();
        let err = check_gradients(|g, v| g.sum_all(v), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "sum gradient is exactly ones, got err {err}");
    }

    #[test]
    fn softmax_sum_gradient_vanishes() {
        // sum of a softmax row is identically 1, so the gradient is 0.
        let x = Tensor::new(vec![2, 3], vec![0.5, -0.25, 1.5, 2.0, 0.0, -1.0]).unwrap();
        let err = check_gradients(
            |g, v| {
                let y = g.softmax_rows(v)?;
                g.sum_all(&y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "conservation violated: err {err}");
    }

    #[test]
    fn weighted_softmax_matches_differences() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.8, 1.1, 0.2, -0.4, 0.9, 0.05, -1.3]).unwrap();
        let w = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, -1.5, 0.25, 2.0, 1.0]).unwrap();
        let err = check_gradients(
            |g, v| {
                let y = g.softmax_rows(v)?;
                let p = g.mul(&y, &w)?;
                g.sum_all(&p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "softmax gradient mismatch: {err}");
    }

    #[test]
    fn step_outside_window_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(check_gradients(|g, v| g.sum_all(v), &x, 1e-2).is_err());
        assert!(check_gradients(|g, v| g.sum_all(v), &x, 1e-9).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let x = Tensor::scalar(0.5);
        let res = check_gradients(|g, v| g.scale(v, f64::INFINITY), &x, 1e-5);
        assert!(matches!(res, Err(Error::Eval { .. })));
    }
}
