//! Agreement between estimated and true loadings.
//!
//! `ccor` is the smallest nonzero canonical correlation between two sets of
//! variables observed on the same units (the rows): columns are centred
//! before the column spaces are compared. `subspace_ccor` skips the
//! centring and compares the raw column spaces.

use nalgebra::DMatrix;

use crate::error::{GmfmError, Result};

/// Relative singular-value cutoff for the rank of each argument.
const RANK_TOL: f64 = 1e-10;

fn orthonormal_basis(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, false);
    let s = &svd.singular_values;
    let largest = s.max();
    if !(largest > 0.0 && largest.is_finite()) {
        return Err(GmfmError::InvalidConfig(format!("{name} has rank zero")));
    }
    let u = svd.u.expect("left singular vectors requested");
    let keep: Vec<usize> = (0..s.len()).filter(|&k| s[k] > RANK_TOL * largest).collect();
    Ok(DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])]))
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Smallest nonzero canonical correlation between the columns of `a` and
/// the columns of `b`.
pub fn ccor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(GmfmError::dims("ccor row count", a.nrows(), b.nrows()));
    }
    subspace_ccor(&center_columns(a), &center_columns(b))
}

/// Smallest nonzero singular value of `Ua' Ub` for orthonormal bases of the
/// column spaces of `a` and `b`.
pub fn subspace_ccor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(GmfmError::dims("ccor row count", a.nrows(), b.nrows()));
    }
    let ua = orthonormal_basis(a, "first argument")?;
    let ub = orthonormal_basis(b, "second argument")?;
    let rank = ua.ncols().min(ub.ncols());
    let mut sv: Vec<f64> = (ua.transpose() * ub).svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv[rank - 1].clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = stream(seed, "test/ccor");
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_and_mixed_spaces() {
        let a = random(1, 10, 3);
        assert!((ccor(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let g = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0]);
        assert!((ccor(&a, &(&a * g)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_spaces() {
        let mut a = DMatrix::zeros(6, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        let mut b = DMatrix::zeros(6, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 3.0;
        assert!(subspace_ccor(&a, &b).unwrap().abs() < 1e-12);
        // Mean-zero columns with orthogonal spans.
        let a = DMatrix::from_column_slice(6, 1, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(6, 2, &[0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, -2.0]);
        assert!(ccor(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn centring_ignores_shared_means() {
        // Same deviations around different constant shifts.
        let a = random(5, 15, 2);
        let shifted = a.map(|v| v + 3.0);
        assert!((ccor(&a, &shifted).unwrap() - 1.0).abs() < 1e-12);
        assert!(subspace_ccor(&a, &shifted).unwrap() < 1.0 - 1e-6);
        // Nearly constant columns agree as subspaces but not as variables.
        let mut rng = stream(6, "test/ccor-const");
        let x = DMatrix::from_fn(15, 1, |_, _| 1.0 + 0.01 * rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(15, 1, |_, _| 1.0 + 0.01 * rng.random_range(-1.0..1.0));
        assert!(subspace_ccor(&x, &y).unwrap() > 0.999);
        assert!(ccor(&x, &y).unwrap() < 0.9);
    }

    #[test]
    fn single_column_is_absolute_cosine() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
        assert!((subspace_ccor(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((subspace_ccor(&a, &(-&b)).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        // Centred: (2, -1, -1) / 3 against (1, 1, -2) / 3.
        assert!((ccor(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_input_is_rejected() {
        assert!(ccor(&DMatrix::zeros(4, 1), &random(2, 4, 1)).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_invariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
            let a = random(seed, 12, 3);
            let b = random(seed + 1, 12, 2);
            let v = ccor(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let mut permuted = a.clone();
            permuted.swap_columns(0, 2);
            prop_assert!((ccor(&(permuted * scale), &b).unwrap() - v).abs() < 1e-10);
            prop_assert!((ccor(&b, &a).unwrap() - v).abs() < 1e-10);
            let w = subspace_ccor(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }
}
