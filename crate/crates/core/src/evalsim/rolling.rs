//! Rolling validation.
//!
//! The series is cut into periods of `period_len` consecutive slices. For
//! each period after the first `window`, loadings are fitted on the `window`
//! preceding periods, the period's factors are estimated slice by slice with
//! the loadings frozen, and the reconstruction is scored against the data.

use serde::{Deserialize, Serialize};

use crate::blocks::{self, Flat};
use crate::error::{GmfmError, Result};
use crate::families;
use crate::fit::default_pi_clamp;
use crate::model::{Dataset, FactorParams};
use crate::newton::{self, NewtonOptions};

use super::Estimator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingConfig {
    /// Number of preceding periods the loadings are fitted on.
    pub window: usize,
    /// Slices per period.
    pub period_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodScore {
    /// One-based period index within the series.
    pub period: usize,
    pub mse: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingResult {
    pub method: String,
    pub periods: Vec<PeriodScore>,
    pub mse_bar: f64,
    pub rho_bar: f64,
}

/// Mean squared error and unexplained share of a period. `yhat` and `y` hold
/// the period's slices back to back; `observed` marks the cells that count.
pub fn period_scores(y: &[f64], yhat: &[f64], observed: &[bool], p1: usize, p2: usize) -> (f64, f64) {
    let n = p1 * p2;
    let q = y.len() / n;
    let mut mean = vec![0.0; n];
    let mut count = vec![0usize; n];
    for s in 0..q {
        for c in 0..n {
            if observed[s * n + c] {
                mean[c] += y[s * n + c];
                count[c] += 1;
            }
        }
    }
    for c in 0..n {
        if count[c] > 0 {
            mean[c] /= count[c] as f64;
        }
    }
    let (mut sse, mut sst, mut cells) = (0.0, 0.0, 0usize);
    for s in 0..q {
        for c in 0..n {
            let idx = s * n + c;
            if observed[idx] {
                sse += (yhat[idx] - y[idx]).powi(2);
                sst += (y[idx] - mean[c]).powi(2);
                cells += 1;
            }
        }
    }
    (sse / cells.max(1) as f64, sse / sst)
}

/// Factors of slice `t` with the loadings of `loadings` held fixed.
fn slice_factor(data: &Dataset, loadings: &Flat, t: usize, opts: &NewtonOptions) -> Vec<f64> {
    let dims = data.dims();
    let x0 = vec![0.0; loadings.k1 * loadings.k2];
    let cell = |idx: usize, pi: f64| data.cell_derivs(idx, pi);
    newton::maximize(|f| blocks::eval_factor(dims, loadings, t, f, cell, true), &x0, opts).x
}

pub fn rolling_validate(data: &Dataset, config: &RollingConfig, estimator: &Estimator) -> Result<RollingResult> {
    let (p1, p2, t) = (data.p1(), data.p2(), data.t());
    let q = config.period_len;
    if q < 2 {
        return Err(GmfmError::InvalidConfig(
            "periods need at least two slices to define a within-period mean".into(),
        ));
    }
    if config.window == 0 {
        return Err(GmfmError::InvalidConfig("window must be at least one period".into()));
    }
    if t % q != 0 {
        return Err(GmfmError::InvalidConfig(format!(
            "T = {t} is not a multiple of the period length {q}"
        )));
    }
    let n_periods = t / q;
    if n_periods <= config.window {
        return Err(GmfmError::InsufficientHistory(format!(
            "{n_periods} period(s) leave nothing to evaluate after a window of {}",
            config.window
        )));
    }
    let opts = NewtonOptions {
        max_iter: 50,
        grad_tol: 1e-8,
        ridge: 1e-8,
        pi_clamp: default_pi_clamp(data),
        max_halvings: 30,
    };
    let n = p1 * p2;
    let mut periods = Vec::new();
    for period in config.window..n_periods {
        let train = data.slices((period - config.window) * q..period * q)?;
        let fitted = estimator.fit(&train)?;
        let start = period * q;
        let mut y = Vec::with_capacity(q * n);
        let mut yhat = Vec::with_capacity(q * n);
        let mut observed = Vec::with_capacity(q * n);
        for tt in start..start + q {
            let slice_x = data.series().slice(tt);
            let f = match estimator {
                Estimator::AlphaPca { .. } => {
                    let inv = 1.0 / n as f64;
                    fitted.r.transpose() * &slice_x * &fitted.c * inv
                }
                _ => {
                    let flat = Flat::from_params(&FactorParams {
                        r: fitted.r.clone(),
                        c: fitted.c.clone(),
                        f: Vec::new(),
                    });
                    let v = slice_factor(data, &flat, tt, &opts);
                    nalgebra::DMatrix::from_column_slice(fitted.k1(), fitted.k2(), &v)
                }
            };
            let pi = &fitted.r * f * fitted.c.transpose();
            for i in 0..p1 {
                for j in 0..p2 {
                    let idx = data.series().index(i, j, tt);
                    y.push(slice_x[(i, j)]);
                    observed.push(data.is_observed(idx));
                    yhat.push(match estimator {
                        Estimator::AlphaPca { .. } => pi[(i, j)],
                        _ => families::family_mean(data.family(idx), pi[(i, j)]),
                    });
                }
            }
        }
        let (mse, rho) = period_scores(&y, &yhat, &observed, p1, p2);
        periods.push(PeriodScore {
            period: period + 1,
            mse,
            rho,
        });
    }
    let m = periods.len() as f64;
    Ok(RollingResult {
        method: estimator.name().to_string(),
        mse_bar: periods.iter().map(|p| p.mse).sum::<f64>() / m,
        rho_bar: periods.iter().map(|p| p.rho).sum::<f64>() / m,
        periods,
    })
}
