//! Sandwich variance estimators for loadings and factors, and standardized
//! estimation errors against a known truth.
//!
//! For a block with regressors `a` (row `i`: `F_t c_j`; column `j`:
//! `F_t' r_i`; slice `t`: `c_j kron r_i`) the estimate is
//! `scale * B^{-1} M B^{-1}` with `B = -sum d2 a a'` and `M = sum d1^2 a a'`,
//! evaluated at the fitted natural parameters.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Flat};
use crate::error::{GmfmError, Result};
use crate::families::CellDerivatives;
use crate::linalg::{condition_number, sym_inv_sqrt, symmetrize};
use crate::model::{Dataset, FactorParams};
use crate::normalize::normalize;

/// Eigenvalue floor for the inverse square root used in standardization.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Bread matrices with a condition number above this are rejected.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Row,
    Col,
    Factor,
}

impl Entity {
    fn label(self) -> &'static str {
        match self {
            Entity::Row => "row",
            Entity::Col => "column",
            Entity::Factor => "factor",
        }
    }

    pub fn scale(self, p1: usize, p2: usize, t: usize) -> f64 {
        match self {
            Entity::Row => (p2 * t) as f64,
            Entity::Col => (p1 * t) as f64,
            Entity::Factor => (p1 * p2) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichEstimate {
    /// Inverse of the negated sum of d2-weighted outer products.
    pub bread: DMatrix<f64>,
    /// Sum of d1^2-weighted outer products.
    pub meat: DMatrix<f64>,
    /// `scale * bread * meat * bread`, symmetrized.
    pub variance: DMatrix<f64>,
    pub scale: f64,
}

/// Cell closure whose "Hessian" accumulates d1^2 instead of d2.
fn squared_score(data: &Dataset) -> impl Fn(usize, f64) -> Option<CellDerivatives> + '_ {
    move |idx, pi| {
        data.cell_derivs(idx, pi).map(|d| CellDerivatives {
            loglik: 0.0,
            d1: 0.0,
            d2: d.d1 * d.d1,
        })
    }
}

fn assemble(entity: Entity, index: usize, k: usize, hess: Vec<f64>, meat: Vec<f64>, scale: f64) -> Result<SandwichEstimate> {
    let neg_h = -DMatrix::from_row_slice(k, k, &hess);
    let meat = DMatrix::from_row_slice(k, k, &meat);
    let condition = condition_number(&neg_h);
    let singular = || GmfmError::SingularBlock {
        what: entity.label(),
        index,
        condition,
    };
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(singular());
    }
    let mut bread = neg_h.try_inverse().ok_or_else(singular)?;
    symmetrize(&mut bread);
    let mut variance = &bread * &meat * &bread * scale;
    symmetrize(&mut variance);
    Ok(SandwichEstimate {
        bread,
        meat,
        variance,
        scale,
    })
}

fn check_index(data: &Dataset, theta: &FactorParams, entity: Entity, index: usize) -> Result<()> {
    theta.check_against(data)?;
    let n = match entity {
        Entity::Row => data.p1(),
        Entity::Col => data.p2(),
        Entity::Factor => data.t(),
    };
    if index >= n {
        return Err(GmfmError::InvalidConfig(format!(
            "{} index {index} out of range 0..{n}",
            entity.label()
        )));
    }
    Ok(())
}

fn row_with(data: &Dataset, flat: &Flat, design: &[f64], i: usize) -> Result<SandwichEstimate> {
    let dims = data.dims();
    let cell = |idx: usize, pi: f64| data.cell_derivs(idx, pi);
    let h = blocks::eval_row(dims, design, flat.k1, i, flat.row(i), cell, true).hess;
    let m = blocks::eval_row(dims, design, flat.k1, i, flat.row(i), squared_score(data), true).hess;
    assemble(Entity::Row, i, flat.k1, h, m, Entity::Row.scale(dims.p1, dims.p2, dims.t))
}

fn col_with(data: &Dataset, flat: &Flat, design: &[f64], j: usize) -> Result<SandwichEstimate> {
    let dims = data.dims();
    let cell = |idx: usize, pi: f64| data.cell_derivs(idx, pi);
    let h = blocks::eval_col(dims, design, flat.k2, j, flat.col(j), cell, true).hess;
    let m = blocks::eval_col(dims, design, flat.k2, j, flat.col(j), squared_score(data), true).hess;
    assemble(Entity::Col, j, flat.k2, h, m, Entity::Col.scale(dims.p1, dims.p2, dims.t))
}

fn factor_with(data: &Dataset, flat: &Flat, t: usize) -> Result<SandwichEstimate> {
    let dims = data.dims();
    let cell = |idx: usize, pi: f64| data.cell_derivs(idx, pi);
    let h = blocks::eval_factor(dims, flat, t, &flat.f[t], cell, true).hess;
    let m = blocks::eval_factor(dims, flat, t, &flat.f[t], squared_score(data), true).hess;
    assemble(Entity::Factor, t, flat.k1 * flat.k2, h, m, Entity::Factor.scale(dims.p1, dims.p2, dims.t))
}

pub fn avar_row(data: &Dataset, theta: &FactorParams, i: usize) -> Result<SandwichEstimate> {
    check_index(data, theta, Entity::Row, i)?;
    let flat = Flat::from_params(theta);
    row_with(data, &flat, &flat.row_design(data.dims()), i)
}

pub fn avar_col(data: &Dataset, theta: &FactorParams, j: usize) -> Result<SandwichEstimate> {
    check_index(data, theta, Entity::Col, j)?;
    let flat = Flat::from_params(theta);
    col_with(data, &flat, &flat.col_design(data.dims()), j)
}

/// Variance of `vec(F_t)` (column-major).
pub fn avar_factor(data: &Dataset, theta: &FactorParams, t: usize) -> Result<SandwichEstimate> {
    check_index(data, theta, Entity::Factor, t)?;
    factor_with(data, &Flat::from_params(theta), t)
}

/// Variance estimates for every row loading, column loading and factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AllVariances {
    pub rows: Vec<SandwichEstimate>,
    pub cols: Vec<SandwichEstimate>,
    pub factors: Vec<SandwichEstimate>,
}

pub fn all_variances(data: &Dataset, theta: &FactorParams) -> Result<AllVariances> {
    theta.check_against(data)?;
    let flat = Flat::from_params(theta);
    let rd = flat.row_design(data.dims());
    let cd = flat.col_design(data.dims());
    let rows = (0..data.p1()).into_par_iter().map(|i| row_with(data, &flat, &rd, i)).collect::<Result<_>>()?;
    let cols = (0..data.p2()).into_par_iter().map(|j| col_with(data, &flat, &cd, j)).collect::<Result<_>>()?;
    let factors = (0..data.t()).into_par_iter().map(|t| factor_with(data, &flat, t)).collect::<Result<_>>()?;
    Ok(AllVariances { rows, cols, factors })
}

/// `variance^{-1/2} sqrt(scale) (estimate - truth)`.
pub fn standardize(estimate: &DVector<f64>, truth: &DVector<f64>, avar: &SandwichEstimate) -> Result<DVector<f64>> {
    let k = avar.variance.nrows();
    if estimate.len() != k {
        return Err(GmfmError::dims("estimate", k, estimate.len()));
    }
    if truth.len() != k {
        return Err(GmfmError::dims("truth", k, truth.len()));
    }
    Ok(sym_inv_sqrt(&avar.variance, EIGEN_FLOOR) * ((estimate - truth) * avar.scale.sqrt()))
}

/// Normalizes `truth` and flips its loading columns (with the matching
/// factor rows/columns) so that each has a nonnegative inner product with
/// the corresponding column of `estimate`.
pub fn align_truth(truth: &FactorParams, estimate: &FactorParams) -> Result<FactorParams> {
    if truth.k1() != estimate.k1()
        || truth.k2() != estimate.k2()
        || truth.p1() != estimate.p1()
        || truth.p2() != estimate.p2()
        || truth.t() != estimate.t()
    {
        return Err(GmfmError::InvalidConfig("truth and estimate have different shapes".into()));
    }
    let mut out = normalize(truth)?;
    for a in 0..out.k1() {
        if out.r.column(a).dot(&estimate.r.column(a)) < 0.0 {
            out.r.column_mut(a).neg_mut();
            for f in &mut out.f {
                f.row_mut(a).neg_mut();
            }
        }
    }
    for b in 0..out.k2() {
        if out.c.column(b).dot(&estimate.c.column(b)) < 0.0 {
            out.c.column_mut(b).neg_mut();
            for f in &mut out.f {
                f.column_mut(b).neg_mut();
            }
        }
    }
    Ok(out)
}

/// Standardized errors of one entity of an estimate against an aligned truth.
pub fn standardized_error(
    data: &Dataset,
    estimate: &FactorParams,
    aligned_truth: &FactorParams,
    entity: Entity,
    index: usize,
) -> Result<DVector<f64>> {
    check_index(data, aligned_truth, entity, index)?;
    let (avar, est, tru) = match entity {
        Entity::Row => (
            avar_row(data, estimate, index)?,
            estimate.r.row(index).transpose(),
            aligned_truth.r.row(index).transpose(),
        ),
        Entity::Col => (
            avar_col(data, estimate, index)?,
            estimate.c.row(index).transpose(),
            aligned_truth.c.row(index).transpose(),
        ),
        Entity::Factor => (
            avar_factor(data, estimate, index)?,
            estimate.factor_vec(index),
            aligned_truth.factor_vec(index),
        ),
    };
    standardize(&est, &tru, &avar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsim::{simulate_case, SimCase, SimulationSpec};
    use crate::families::{self, FamilyKind};
    use crate::model::{natural_params, FamilyMap, MatrixSeries};
    use crate::rng::stream;
    use crate::tsam::{tsam_fit, TsamConfig};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_theta(seed: u64, p1: usize, p2: usize, t: usize, k1: usize, k2: usize) -> FactorParams {
        let mut rng = stream(seed, "test/theta");
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let r = m(p1, k1);
        let c = m(p2, k2);
        let f = (0..t).map(|_| m(k1, k2)).collect();
        FactorParams::new(r, c, f).unwrap()
    }

    /// Gaussian data whose residuals around `theta` are exactly +-1.
    fn unit_residual_data(theta: &FactorParams) -> Dataset {
        let mut values = Vec::new();
        let mut sign = 1.0;
        for pi in natural_params(theta) {
            for i in 0..pi.nrows() {
                for j in 0..pi.ncols() {
                    values.push(pi[(i, j)] + sign);
                    sign = -sign;
                }
            }
        }
        let s = MatrixSeries::new(theta.p1(), theta.p2(), theta.t(), values).unwrap();
        Dataset::new(s, FamilyMap::uniform(FamilyKind::Gaussian)).unwrap()
    }

    #[test]
    fn unit_residuals_reduce_to_inverse_gram() {
        let theta = random_theta(1, 5, 4, 6, 2, 2);
        let data = unit_residual_data(&theta);
        let est = avar_row(&data, &theta, 2).unwrap();
        let mut gram = DMatrix::zeros(2, 2);
        for t in 0..6 {
            for j in 0..4 {
                let a = &theta.f[t] * theta.c.row(j).transpose();
                gram += &a * a.transpose();
            }
        }
        let expect = gram.try_inverse().unwrap() * 24.0;
        assert_relative_eq!(est.variance, expect, max_relative = 1e-10);
    }

    #[test]
    fn unit_everything_gives_unit_variance() {
        let theta = FactorParams::new(
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::from_element(4, 1, 1.0),
            vec![DMatrix::from_element(1, 1, 1.0); 5],
        )
        .unwrap();
        let data = unit_residual_data(&theta);
        for (v, _) in [
            (avar_row(&data, &theta, 0).unwrap(), 0),
            (avar_col(&data, &theta, 1).unwrap(), 1),
            (avar_factor(&data, &theta, 4).unwrap(), 2),
        ] {
            assert_relative_eq!(v.variance[(0, 0)], 1.0, epsilon = 1e-12);
        }
    }

    /// Straight-loop sandwich over explicit regressor vectors.
    fn brute(data: &Dataset, theta: &FactorParams, entity: Entity, index: usize) -> DMatrix<f64> {
        let (p1, p2, t) = (data.p1(), data.p2(), data.t());
        let (k1, k2) = (theta.k1(), theta.k2());
        let k = match entity {
            Entity::Row => k1,
            Entity::Col => k2,
            Entity::Factor => k1 * k2,
        };
        let mut b = DMatrix::zeros(k, k);
        let mut m = DMatrix::zeros(k, k);
        for tt in 0..t {
            for i in 0..p1 {
                for j in 0..p2 {
                    let hit = match entity {
                        Entity::Row => i == index,
                        Entity::Col => j == index,
                        Entity::Factor => tt == index,
                    };
                    let idx = (tt * p1 + i) * p2 + j;
                    if !hit || !data.is_observed(idx) {
                        continue;
                    }
                    let a: DVector<f64> = match entity {
                        Entity::Row => &theta.f[tt] * theta.c.row(j).transpose(),
                        Entity::Col => theta.f[tt].transpose() * theta.r.row(i).transpose(),
                        Entity::Factor => DVector::from_fn(k, |q, _| theta.c[(j, q / k1)] * theta.r[(i, q % k1)]),
                    };
                    let mut pi = 0.0;
                    for x in 0..k1 {
                        for y in 0..k2 {
                            pi += theta.r[(i, x)] * theta.f[tt][(x, y)] * theta.c[(j, y)];
                        }
                    }
                    let d = families::derivatives_cell(data.family(idx), data.value(idx), pi).unwrap();
                    b -= &a * a.transpose() * d.d2;
                    m += &a * a.transpose() * (d.d1 * d.d1);
                }
            }
        }
        let bi = b.try_inverse().unwrap();
        &bi * m * &bi * entity.scale(p1, p2, t)
    }

    #[test]
    fn matches_straight_loop_on_logit_instance() {
        let sim = simulate_case(&SimulationSpec::new(SimCase::Dgp1, 12, 10, 9, 7)).unwrap();
        let theta = random_theta(7, 12, 10, 9, 2, 2);
        for (entity, index) in [(Entity::Row, 3), (Entity::Col, 9), (Entity::Factor, 4)] {
            let got = match entity {
                Entity::Row => avar_row(&sim.data, &theta, index),
                Entity::Col => avar_col(&sim.data, &theta, index),
                Entity::Factor => avar_factor(&sim.data, &theta, index),
            }
            .unwrap();
            let want = brute(&sim.data, &theta, entity, index);
            assert_relative_eq!(got.variance, want, max_relative = 1e-10, epsilon = 1e-12);
            assert_eq!(got.variance, got.variance.transpose());
            let min = got.variance.clone().symmetric_eigen().eigenvalues.min();
            assert!(min >= -1e-12);
        }
    }

    #[test]
    fn gaussian_row_is_classical_least_squares_sandwich() {
        let theta = random_theta(8, 6, 5, 7, 2, 1);
        let mut rng = stream(8, "test/resid");
        let mut values = Vec::new();
        for pi in natural_params(&theta) {
            for i in 0..6 {
                for j in 0..5 {
                    values.push(pi[(i, j)] + rng.random_range(-1.0..1.0));
                }
            }
        }
        let data = Dataset::new(MatrixSeries::new(6, 5, 7, values).unwrap(), FamilyMap::uniform(FamilyKind::Gaussian)).unwrap();
        let i = 4;
        // Design X with rows F_t c_j, residuals e.
        let mut x = DMatrix::zeros(35, 2);
        let mut e = DVector::zeros(35);
        for t in 0..7 {
            for j in 0..5 {
                let a = &theta.f[t] * theta.c.row(j).transpose();
                x.set_row(t * 5 + j, &a.transpose());
                let pi = (theta.r.row(i) * &a)[(0, 0)];
                e[t * 5 + j] = data.series().get(i, j, t) - pi;
            }
        }
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let omega = DMatrix::from_diagonal(&e.map(|v| v * v));
        let hc0 = &xtx_inv * x.transpose() * omega * &x * &xtx_inv * 35.0;
        let got = avar_row(&data, &theta, i).unwrap();
        assert_relative_eq!(got.variance, hc0, max_relative = 1e-10);
    }

    #[test]
    fn zero_error_at_truth_and_singular_detection() {
        let sim = simulate_case(&SimulationSpec::new(SimCase::Dgp1, 10, 10, 10, 3)).unwrap();
        let truth = normalize(&sim.truth).unwrap();
        let aligned = align_truth(&sim.truth, &truth).unwrap();
        for entity in [Entity::Row, Entity::Col, Entity::Factor] {
            let z = standardized_error(&sim.data, &truth, &aligned, entity, 0).unwrap();
            assert!(z.amax() < 1e-9);
        }
        let mut zero = truth.clone();
        zero.f.iter_mut().for_each(|f| f.fill(0.0));
        assert!(matches!(avar_row(&sim.data, &zero, 0), Err(GmfmError::SingularBlock { .. })));
    }

    #[test]
    fn alignment_undoes_sign_flips() {
        let sim = simulate_case(&SimulationSpec::new(SimCase::Case1, 10, 9, 8, 4)).unwrap();
        let truth = normalize(&sim.truth).unwrap();
        let mut flipped = truth.clone();
        flipped.r.column_mut(1).neg_mut();
        flipped.c.column_mut(0).neg_mut();
        for f in &mut flipped.f {
            f.row_mut(1).neg_mut();
            f.column_mut(0).neg_mut();
        }
        let aligned = align_truth(&sim.truth, &flipped).unwrap();
        assert_relative_eq!(aligned.r, flipped.r, epsilon = 1e-9);
        assert_relative_eq!(aligned.c, flipped.c, epsilon = 1e-9);
        assert_relative_eq!(aligned.f[3], flipped.f[3], epsilon = 1e-9);
    }

    #[test]
    fn fitted_logit_errors_are_moderate() {
        let sim = simulate_case(&SimulationSpec::new(SimCase::Dgp1, 30, 30, 30, 11)).unwrap();
        let fit = tsam_fit(&sim.data, &TsamConfig { restarts: 2, seed: 11, ..TsamConfig::new(1, 1) }).unwrap();
        let aligned = align_truth(&sim.truth, &fit.theta).unwrap();
        let z = standardized_error(&sim.data, &fit.theta, &aligned, Entity::Row, 0).unwrap();
        assert!(z[0].abs() < 5.0, "z = {}", z[0]);
        let all = all_variances(&sim.data, &fit.theta).unwrap();
        assert_eq!((all.rows.len(), all.cols.len(), all.factors.len()), (30, 30, 30));
    }
}
