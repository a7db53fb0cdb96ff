//! Minorisation-maximisation.
//!
//! Each cell's log-likelihood is bounded below by a quadratic with curvature
//! `b_U` of its family, tangent at the current `pi`. Maximising the sum of the
//! bounds is a weighted least-squares factorisation of the working targets
//! `pi + d1 / b_U`, solved by alternating block least squares started from the
//! current iterate, so the likelihood never decreases.

use serde::{Deserialize, Serialize};

use crate::blocks::{self, Dims, Flat};
use crate::error::{GmfmError, Result};
use crate::families::{self, CellDerivatives, FamilyKind};
use crate::fit::{
    self, default_pi_clamp, random_start, restart_stream_name, validate_factor_numbers, Algo,
    FitOutput, InitStrategy, RestartRecord, RestartResult,
};
use crate::linalg::solve_spd;
use crate::model::{Dataset, FactorParams, MatrixSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmConfig {
    pub k1: usize,
    pub k2: usize,
    pub restarts: usize,
    pub max_outer: usize,
    /// Stop once the log-likelihood gains no more than this.
    pub error_tol: f64,
    pub inner_als_sweeps: usize,
    /// Run the inner factorisation to stationarity instead of a fixed number
    /// of sweeps.
    pub inner_exact: bool,
    pub pi_clamp: Option<f64>,
    pub ridge: f64,
    pub seed: u64,
    pub init: InitStrategy,
}

impl MmConfig {
    pub fn new(k1: usize, k2: usize) -> Self {
        MmConfig {
            k1,
            k2,
            restarts: 5,
            max_outer: 500,
            error_tol: 1e-6,
            inner_als_sweeps: 1,
            inner_exact: false,
            pi_clamp: None,
            ridge: 1e-10,
            seed: 0,
            init: InitStrategy::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_outer == 0 || self.inner_als_sweeps == 0 {
            return Err(GmfmError::InvalidConfig(
                "restarts, max_outer and inner_als_sweeps must be positive".into(),
            ));
        }
        for (name, v) in [("error_tol", self.error_tol), ("ridge", self.ridge)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GmfmError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(c) = self.pi_clamp {
            if !(c.is_finite() && c > 0.0) {
                return Err(GmfmError::InvalidConfig(format!("pi_clamp must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-cell curvature bounds; zero for missing cells.
pub fn curvature_weights(data: &Dataset, pi_clamp: f64) -> Result<Vec<f64>> {
    let mut table = [0.0; 5];
    for (slot, f) in FamilyKind::ALL.iter().enumerate() {
        table[slot] = families::curvature_bound(*f, pi_clamp)?;
    }
    Ok((0..data.families().len())
        .map(|idx| {
            if data.is_observed(idx) {
                let f = data.family(idx);
                table[FamilyKind::ALL.iter().position(|g| *g == f).expect("listed")]
            } else {
                0.0
            }
        })
        .collect())
}

/// Working targets `pi + d1 / b_U` for every cell (missing cells get `pi`).
pub fn surrogate_targets(data: &Dataset, theta: &FactorParams, b_u: &[f64]) -> Result<Vec<nalgebra::DMatrix<f64>>> {
    theta.check_against(data)?;
    if b_u.len() != data.families().len() {
        return Err(GmfmError::dims("curvature weights", data.families().len(), b_u.len()));
    }
    let flat = Flat::from_params(theta);
    let dims = data.dims();
    let pis = flat.natural(dims);
    let mut out = vec![0.0; pis.len()];
    targets_and_loglik(data, &pis, b_u, &mut out);
    let n = dims.p1 * dims.p2;
    Ok((0..dims.t)
        .map(|t| nalgebra::DMatrix::from_row_slice(dims.p1, dims.p2, &out[t * n..(t + 1) * n]))
        .collect())
}

/// Fills `xhat` and returns the log-likelihood at `pis`.
fn targets_and_loglik(data: &Dataset, pis: &[f64], b_u: &[f64], xhat: &mut [f64]) -> f64 {
    let mut sum = crate::linalg::KahanSum::default();
    for (idx, &pi) in pis.iter().enumerate() {
        match data.cell_derivs(idx, pi) {
            Some(d) if b_u[idx] > 0.0 => {
                sum.add(d.loglik);
                xhat[idx] = pi + d.d1 / b_u[idx];
            }
            _ => xhat[idx] = pi,
        }
    }
    sum.value()
}

#[inline]
fn ls_cell(xhat: &[f64], w: &[f64], idx: usize, pi: f64) -> Option<CellDerivatives> {
    let wi = w[idx];
    (wi > 0.0).then(|| {
        let e = xhat[idx] - pi;
        CellDerivatives {
            loglik: -0.5 * wi * e * e,
            d1: wi * e,
            d2: -wi,
        }
    })
}

/// One exact block solve of a weighted least-squares block, in place.
fn ls_step(e: blocks::BlockEval, x: &mut [f64], ridge: f64, escalations: &mut usize) {
    let k = x.len();
    let neg_h = nalgebra::DMatrix::from_row_slice(k, k, &e.hess).map(|v| -v);
    let g = nalgebra::DVector::from_column_slice(&e.grad);
    if let Some((d, esc)) = solve_spd(&neg_h, &g, ridge, 12) {
        *escalations += esc;
        if d.iter().all(|v| v.is_finite()) {
            for (a, b) in x.iter_mut().zip(d.iter()) {
                *a += b;
            }
        }
    }
}

/// One alternating sweep: rows, then slices, then columns.
fn als_sweep(dims: Dims, flat: &mut Flat, xhat: &[f64], w: &[f64], ridge: f64) -> usize {
    let (k1, k2) = (flat.k1, flat.k2);
    let cell = |idx: usize, pi: f64| ls_cell(xhat, w, idx, pi);
    let mut esc = 0;
    let design = flat.row_design(dims);
    for i in 0..dims.p1 {
        let e = blocks::eval_row(dims, &design, k1, i, flat.row(i), cell, true);
        ls_step(e, &mut flat.r[i * k1..(i + 1) * k1], ridge, &mut esc);
    }
    for t in 0..dims.t {
        let e = blocks::eval_factor(dims, flat, t, &flat.f[t], cell, true);
        let mut f = flat.f[t].clone();
        ls_step(e, &mut f, ridge, &mut esc);
        flat.f[t] = f;
    }
    let design = flat.col_design(dims);
    for j in 0..dims.p2 {
        let e = blocks::eval_col(dims, &design, k2, j, flat.col(j), cell, true);
        ls_step(e, &mut flat.c[j * k2..(j + 1) * k2], ridge, &mut esc);
    }
    esc
}

fn ls_objective(dims: Dims, flat: &Flat, xhat: &[f64], w: &[f64]) -> f64 {
    -blocks::eval_total(dims, flat, |idx, pi| ls_cell(xhat, w, idx, pi)).0
}

const EXACT_TOL: f64 = 1e-10;
const EXACT_MAX_SWEEPS: usize = 1000;

fn factorize(dims: Dims, flat: &mut Flat, xhat: &[f64], w: &[f64], sweeps: usize, exact: bool, ridge: f64) -> usize {
    let mut esc = 0;
    if exact {
        let mut prev = ls_objective(dims, flat, xhat, w);
        for _ in 0..EXACT_MAX_SWEEPS {
            esc += als_sweep(dims, flat, xhat, w, ridge);
            let cur = ls_objective(dims, flat, xhat, w);
            let done = (prev - cur).abs() <= EXACT_TOL * prev.abs().max(1e-300);
            prev = cur;
            if done {
                break;
            }
        }
    } else {
        for _ in 0..sweeps {
            esc += als_sweep(dims, flat, xhat, w, ridge);
        }
    }
    esc
}

/// Least-squares factorisation of `xhat` by `sweeps` alternating passes from
/// `init` (missing cells of `xhat` are ignored). Returns the parameters and
/// the number of ridge escalations.
pub fn ls_factorize(xhat: &MatrixSeries, init: &FactorParams, sweeps: usize) -> Result<(FactorParams, usize)> {
    if (init.p1(), init.p2(), init.t()) != (xhat.p1(), xhat.p2(), xhat.t()) {
        return Err(GmfmError::InvalidConfig("start does not match the target dimensions".into()));
    }
    let dims = Dims {
        p1: xhat.p1(),
        p2: xhat.p2(),
        t: xhat.t(),
    };
    let w: Vec<f64> = (0..xhat.len()).map(|idx| if xhat.is_observed(idx) { 1.0 } else { 0.0 }).collect();
    let mut flat = Flat::from_params(init);
    let esc = factorize(dims, &mut flat, xhat.values(), &w, sweeps, false, 1e-10);
    Ok((flat.to_params(dims), esc))
}

fn run_restart(data: &Dataset, config: &MmConfig, b_u: &[f64], pi_clamp: f64, restart: usize, start: FactorParams) -> RestartResult {
    let dims = data.dims();
    let mut record = RestartRecord::new(restart_stream_name(restart));
    let mut flat = Flat::from_params(&start);
    let mut xhat = vec![0.0; b_u.len()];
    let mut pis = flat.natural(dims);
    let mut l = targets_and_loglik(data, &pis, b_u, &mut xhat);
    let fail = |mut record: RestartRecord, msg: String| RestartResult {
        record: {
            record.failure = Some(msg);
            record
        },
        theta: None,
        stage_one: None,
    };
    if !l.is_finite() {
        return fail(record, "non-finite log-likelihood at the start".into());
    }
    for iter in 0..config.max_outer {
        record.ridge_escalations += factorize(
            dims,
            &mut flat,
            &xhat,
            b_u,
            config.inner_als_sweeps,
            config.inner_exact,
            config.ridge,
        );
        pis = flat.natural(dims);
        if pis.iter().any(|p| p.abs() > pi_clamp) {
            record.clamp_hits += 1;
        }
        let next = targets_and_loglik(data, &pis, b_u, &mut xhat);
        if !next.is_finite() {
            return fail(record, format!("non-finite log-likelihood at iteration {}", iter + 1));
        }
        record.trajectory.push(next);
        record.iterations = iter + 1;
        if next < l - 1e-10 * l.abs().max(1.0) {
            record.monotone_violations += 1;
        }
        let gain = next - l;
        l = next;
        if gain <= config.error_tol {
            record.converged = true;
            break;
        }
    }
    record.loglik = Some(l);
    RestartResult {
        record,
        theta: Some(flat.to_params(dims)),
        stage_one: None,
    }
}

pub fn mm_fit(data: &Dataset, config: &MmConfig) -> Result<FitOutput> {
    mm_fit_from(data, config, &[])
}

/// As [`mm_fit`], with the first restarts starting from `starts`.
pub fn mm_fit_from(data: &Dataset, config: &MmConfig, starts: &[FactorParams]) -> Result<FitOutput> {
    config.validate()?;
    validate_factor_numbers(data, config.k1, config.k2)?;
    for s in starts {
        s.check_against(data)?;
        if (s.k1(), s.k2()) != (config.k1, config.k2) {
            return Err(GmfmError::InvalidConfig("start has the wrong factor numbers".into()));
        }
    }
    let pi_clamp = config.pi_clamp.unwrap_or_else(|| default_pi_clamp(data));
    let b_u = curvature_weights(data, pi_clamp)?;
    let mut warnings = Vec::new();
    if data.map().contains_family(FamilyKind::Poisson) {
        warnings.push(format!(
            "poisson cells use b_U = e^{pi_clamp}; minorisation is intended for probit, logit and tobit data and converges slowly here"
        ));
    }
    let mut starts = starts.to_vec();
    if config.init == InitStrategy::AlphaPca && starts.is_empty() {
        if !data.map().is_all(FamilyKind::Gaussian) {
            return Err(GmfmError::InvalidConfig(
                "alpha-pca start requires every cell to be gaussian".into(),
            ));
        }
        starts.push(crate::evalsim::alpha_pca_fit(data.series(), config.k1, config.k2)?);
    }
    let (p1, p2, t) = (data.p1(), data.p2(), data.t());
    let results = fit::run_restarts(config.restarts, |r| {
        let start = starts
            .get(r)
            .cloned()
            .unwrap_or_else(|| random_start(config.seed, r, p1, p2, t, config.k1, config.k2));
        run_restart(data, config, &b_u, pi_clamp, r, start)
    });
    fit::finish(
        data,
        Algo::Mm,
        config.k1,
        config.k2,
        config.seed,
        pi_clamp,
        results,
        None,
        warnings,
    )
}
