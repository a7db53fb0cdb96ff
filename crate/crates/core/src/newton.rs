//! Damped Newton ascent for a single concave parameter block.

use nalgebra::{DMatrix, DVector};

use crate::blocks::BlockEval;
use crate::linalg::solve_spd;

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub ridge: f64,
    /// Steps may not push any |pi| beyond max(pi_clamp, |pi| at the start).
    pub pi_clamp: f64,
    pub max_halvings: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct NewtonOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub clamp_hits: usize,
    pub ridge_escalations: usize,
    pub singular: bool,
}

/// Maximises a concave block objective from `x0`. `eval(x)` must return the
/// value, gradient and Hessian at `x`.
pub(crate) fn maximize<E>(eval: E, x0: &[f64], opts: &NewtonOptions) -> NewtonOutcome
where
    E: Fn(&[f64]) -> BlockEval,
{
    let mut x = x0.to_vec();
    let mut cur = eval(&x);
    let bound = opts.pi_clamp.max(cur.max_abs_pi);
    let mut out = NewtonOutcome::default();
    let k = x.len();
    for iter in 0..opts.max_iter {
        out.iterations = iter;
        if cur.grad.iter().all(|g| g.abs() <= opts.grad_tol) {
            out.converged = true;
            break;
        }
        let neg_h = DMatrix::from_row_slice(k, k, &cur.hess).map(|v| -v);
        let g = DVector::from_column_slice(&cur.grad);
        let Some((step, esc)) = solve_spd(&neg_h, &g, opts.ridge, 8) else {
            out.singular = true;
            break;
        };
        out.ridge_escalations += esc;
        let decrement = g.dot(&step);
        if !(decrement.is_finite()) {
            out.singular = true;
            break;
        }
        if decrement <= 1e-14 * cur.value.abs().max(1.0) {
            out.converged = true;
            break;
        }
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
            let e = eval(&trial);
            if e.max_abs_pi > bound {
                out.clamp_hits += 1;
            } else if e.value.is_finite() && e.value >= cur.value {
                accepted = Some((trial, e));
                break;
            }
            s *= 0.5;
        }
        match accepted {
            Some((trial, e)) => {
                x = trial;
                cur = e;
                out.iterations = iter + 1;
            }
            None => {
                // No ascent direction left at working precision.
                out.converged = true;
                break;
            }
        }
    }
    out.value = cur.value;
    out.x = x;
    out
}
