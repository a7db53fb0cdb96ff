//! Linear matrix-factor baseline: alpha-PCA with alpha = 0 (no demeaning).
//!
//! The family map is ignored and missing cells are read as zero.

use nalgebra::DMatrix;

use crate::error::{GmfmError, Result};
use crate::linalg::{sym_eigen_desc, symmetrize};
use crate::model::{FactorParams, MatrixSeries};
use crate::normalize::apply_sign_rule;

fn slice_filled(x: &MatrixSeries, t: usize) -> DMatrix<f64> {
    let mut s = x.slice(t);
    if let Some(mask) = x.mask() {
        let n = x.p1() * x.p2();
        for i in 0..x.p1() {
            for j in 0..x.p2() {
                if !mask[t * n + i * x.p2() + j] {
                    s[(i, j)] = 0.0;
                }
            }
        }
    }
    s
}

pub fn alpha_pca_fit(x: &MatrixSeries, k1: usize, k2: usize) -> Result<FactorParams> {
    let (p1, p2, t) = (x.p1(), x.p2(), x.t());
    if k1 == 0 || k2 == 0 || k1 > p1 || k2 > p2 {
        return Err(GmfmError::InvalidConfig(format!(
            "factor numbers ({k1}, {k2}) invalid for dimensions ({p1}, {p2})"
        )));
    }
    let slices: Vec<DMatrix<f64>> = (0..t).map(|tt| slice_filled(x, tt)).collect();
    let scale = 1.0 / (t * p1 * p2) as f64;
    let mut m1 = DMatrix::zeros(p1, p1);
    let mut m2 = DMatrix::zeros(p2, p2);
    for s in &slices {
        m1 += s * s.transpose();
        m2 += s.transpose() * s;
    }
    m1 *= scale;
    m2 *= scale;
    symmetrize(&mut m1);
    symmetrize(&mut m2);
    let (_, v1, _) = sym_eigen_desc(&m1, 0.0);
    let (_, v2, _) = sym_eigen_desc(&m2, 0.0);
    let r = v1.columns(0, k1).into_owned() * (p1 as f64).sqrt();
    let c = v2.columns(0, k2).into_owned() * (p2 as f64).sqrt();
    let inv = 1.0 / (p1 * p2) as f64;
    let f = slices.iter().map(|s| r.transpose() * s * &c * inv).collect();
    let mut theta = FactorParams { r, c, f };
    apply_sign_rule(&mut theta);
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsim::ccor;
    use crate::fit::random_start;
    use crate::model::natural_params;
    use crate::normalize::constraint_residuals;

    #[test]
    fn noiseless_low_rank_is_recovered() {
        let theta = random_start(1, 0, 12, 10, 15, 2, 3);
        let x = MatrixSeries::from_slices(&natural_params(&theta)).unwrap();
        let fit = alpha_pca_fit(&x, 2, 3).unwrap();
        assert!(ccor(&fit.r, &theta.r).unwrap() >= 0.9999);
        assert!(ccor(&fit.c, &theta.c).unwrap() >= 0.9999);
        let res = constraint_residuals(&fit);
        assert!(res.r_orth <= 1e-10 && res.c_orth <= 1e-10);
        assert!(res.sign_ok_r.iter().all(|s| *s));
        // Exact rank: the projection reproduces the data.
        for (a, b) in natural_params(&fit).iter().zip(natural_params(&theta)) {
            assert!((a - b).amax() < 1e-8);
        }
    }

    #[test]
    fn columns_follow_descending_eigenvalues() {
        let theta = random_start(2, 0, 8, 6, 20, 3, 2);
        let x = MatrixSeries::from_slices(&natural_params(&theta)).unwrap();
        let fit = alpha_pca_fit(&x, 3, 2).unwrap();
        let (rows, _) = crate::normalize::factor_moments(&fit);
        for k in 1..3 {
            assert!(rows[(k - 1, k - 1)] >= rows[(k, k)]);
        }
    }
}
