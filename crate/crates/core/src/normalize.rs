//! Rotation into the identified parameterisation.
//!
//! After normalisation `R'R/p1 = I`, `C'C/p2 = I`, the averaged second
//! moments of the factor slices are diagonal with descending entries, and the
//! first non-negligible entry of every loading column is positive. The natural
//! parameters `R F_t C'` are unchanged.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GmfmError, Result};
use crate::linalg::{sym_eigen_desc, symmetrize};
use crate::model::FactorParams;

/// Singular values at or below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;
/// Entries at or below this magnitude are skipped by the sign rule.
pub const SIGN_TOL: f64 = 1e-10;
/// Adjacent eigenvalues closer than this (relative) are reported as tied.
pub const TIE_TOL: f64 = 1e-12;

/// Deviations of a parameter set from the identification constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResidual {
    /// Max-norm of `R'R/p1 - I`.
    pub r_orth: f64,
    /// Max-norm of `C'C/p2 - I`.
    pub c_orth: f64,
    /// Largest off-diagonal magnitude of `sum_t F_t F_t' / T`.
    pub f_row_diag: f64,
    /// Largest off-diagonal magnitude of `sum_t F_t' F_t / T`.
    pub f_col_diag: f64,
    pub sign_ok_r: Vec<bool>,
    pub sign_ok_c: Vec<bool>,
}

impl ConstraintResidual {
    pub fn max_residual(&self) -> f64 {
        self.r_orth
            .max(self.c_orth)
            .max(self.f_row_diag)
            .max(self.f_col_diag)
    }

    pub fn satisfied(&self, tol: f64) -> bool {
        self.max_residual() <= tol
            && self.sign_ok_r.iter().all(|s| *s)
            && self.sign_ok_c.iter().all(|s| *s)
    }
}

fn max_abs_dev_identity(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((m[(a, b)] - target).abs());
        }
    }
    worst
}

fn max_abs_off_diag(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            if a != b {
                worst = worst.max(m[(a, b)].abs());
            }
        }
    }
    worst
}

fn first_significant_positive(col: nalgebra::DVectorView<'_, f64>) -> bool {
    col.iter()
        .find(|v| v.abs() > SIGN_TOL)
        .is_none_or(|v| *v > 0.0)
}

/// Factor second moments `sum_t F_t F_t' / T` and `sum_t F_t' F_t / T`.
pub fn factor_moments(theta: &FactorParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let (k1, k2) = (theta.k1(), theta.k2());
    let mut rows = DMatrix::zeros(k1, k1);
    let mut cols = DMatrix::zeros(k2, k2);
    for f in &theta.f {
        rows += f * f.transpose();
        cols += f.transpose() * f;
    }
    let t = theta.t() as f64;
    (rows / t, cols / t)
}

pub fn constraint_residuals(theta: &FactorParams) -> ConstraintResidual {
    let rtr = theta.r.transpose() * &theta.r / theta.p1() as f64;
    let ctc = theta.c.transpose() * &theta.c / theta.p2() as f64;
    let (fr, fc) = factor_moments(theta);
    ConstraintResidual {
        r_orth: max_abs_dev_identity(&rtr),
        c_orth: max_abs_dev_identity(&ctc),
        f_row_diag: max_abs_off_diag(&fr),
        f_col_diag: max_abs_off_diag(&fc),
        sign_ok_r: theta
            .r
            .column_iter()
            .map(|c| first_significant_positive(c.as_view()))
            .collect(),
        sign_ok_c: theta
            .c
            .column_iter()
            .map(|c| first_significant_positive(c.as_view()))
            .collect(),
    }
}

/// Result of [`normalize_detailed`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub theta: FactorParams,
    /// Two factor variances were tied, so the rotation is not unique.
    pub eigen_tie: bool,
}

/// Thin SVD `m = U H V'`; returns `(U, H V')`.
fn polar_split(m: &DMatrix<f64>, name: &'static str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let svd = m.clone().svd(true, true);
    let s = &svd.singular_values;
    let largest = s.max();
    let smallest = s.min();
    if !(largest > 0.0) || smallest <= RANK_TOL * largest {
        return Err(GmfmError::Identifiability {
            matrix: name,
            smallest: smallest / largest.max(f64::MIN_POSITIVE),
        });
    }
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let q = DMatrix::from_diagonal(s) * v_t;
    Ok((u, q))
}

pub fn normalize(theta: &FactorParams) -> Result<FactorParams> {
    normalize_detailed(theta).map(|n| n.theta)
}

pub fn normalize_detailed(theta: &FactorParams) -> Result<Normalized> {
    let (p1, p2, t) = (theta.p1() as f64, theta.p2() as f64, theta.t() as f64);
    let (u_r, q_r) = polar_split(&theta.r, "R")?;
    let (u_c, q_c) = polar_split(&theta.c, "C")?;

    // G_t = Q_R F_t Q_C'
    let g: Vec<DMatrix<f64>> = theta.f.iter().map(|f| &q_r * f * q_c.transpose()).collect();
    let scale = 1.0 / (t * p1 * p2);
    let mut s1 = DMatrix::zeros(theta.k1(), theta.k1());
    let mut s2 = DMatrix::zeros(theta.k2(), theta.k2());
    for gt in &g {
        s1 += gt * gt.transpose();
        s2 += gt.transpose() * gt;
    }
    s1 *= scale;
    s2 *= scale;
    symmetrize(&mut s1);
    symmetrize(&mut s2);
    let tie_tol = |m: &DMatrix<f64>| TIE_TOL * m.diagonal().amax().max(1.0);
    let (_, mut gamma1, tie1) = sym_eigen_desc(&s1, tie_tol(&s1));
    let (_, mut gamma2, tie2) = sym_eigen_desc(&s2, tie_tol(&s2));

    // Sign rule: the first significant entry of each loading column must be
    // positive. Flipping a column of Gamma flips the loading column and the
    // matching row/column of every factor slice together.
    let mut r_hat = &u_r * &gamma1 * p1.sqrt();
    let mut c_hat = &u_c * &gamma2 * p2.sqrt();
    for k in 0..theta.k1() {
        if !first_significant_positive(r_hat.column(k).as_view()) {
            r_hat.column_mut(k).neg_mut();
            gamma1.column_mut(k).neg_mut();
        }
    }
    for k in 0..theta.k2() {
        if !first_significant_positive(c_hat.column(k).as_view()) {
            c_hat.column_mut(k).neg_mut();
            gamma2.column_mut(k).neg_mut();
        }
    }
    let f_scale = 1.0 / (p1 * p2).sqrt();
    let f_hat = g
        .iter()
        .map(|gt| gamma1.transpose() * gt * &gamma2 * f_scale)
        .collect();
    Ok(Normalized {
        theta: FactorParams {
            r: r_hat,
            c: c_hat,
            f: f_hat,
        },
        eigen_tie: tie1 || tie2,
    })
}

/// Applies the sign rule alone to loadings and factors.
pub fn apply_sign_rule(theta: &mut FactorParams) {
    for k in 0..theta.k1() {
        if !first_significant_positive(theta.r.column(k).as_view()) {
            theta.r.column_mut(k).neg_mut();
            for f in &mut theta.f {
                f.row_mut(k).neg_mut();
            }
        }
    }
    for k in 0..theta.k2() {
        if !first_significant_positive(theta.c.column(k).as_view()) {
            theta.c.column_mut(k).neg_mut();
            for f in &mut theta.f {
                f.column_mut(k).neg_mut();
            }
        }
    }
}
