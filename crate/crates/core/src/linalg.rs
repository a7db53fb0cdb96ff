//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Solves `a x = b` for symmetric positive definite `a`.
///
/// A plain Cholesky factorisation is tried first. On failure a ridge of
/// `ridge * scale` (scale = mean |diagonal|, or 1 for a zero matrix) is added
/// and multiplied by 100 on every further failure, up to `max_escalations`
/// times. Returns the solution and the number of escalations used.
pub fn solve_spd(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    ridge: f64,
    max_escalations: usize,
) -> Option<(DVector<f64>, usize)> {
    if let Some(ch) = a.clone().cholesky() {
        return Some((ch.solve(b), 0));
    }
    let n = a.nrows();
    let scale = {
        let s = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    };
    let mut lambda = ridge.max(f64::EPSILON) * scale;
    for k in 1..=max_escalations {
        let mut shifted = a.clone();
        for d in 0..n {
            shifted[(d, d)] += lambda;
        }
        if let Some(ch) = shifted.cholesky() {
            return Some((ch.solve(b), k));
        }
        lambda *= 100.0;
    }
    None
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Returns `(values, vectors, tie)` where `tie` is true when
/// two adjacent eigenvalues are within `tie_tol` of each other.
pub fn sym_eigen_desc(m: &DMatrix<f64>, tie_tol: f64) -> (DVector<f64>, DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the incoming order on exact ties.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let tie = values
        .as_slice()
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() <= tie_tol);
    (values, vectors, tie)
}

/// Inverse symmetric square root with eigenvalues floored at `floor`.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|v| 1.0 / v.max(floor).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Ratio of the largest to the smallest absolute eigenvalue.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
            (lo.min(v.abs()), hi.max(v.abs()))
        });
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Copies a matrix into a row-major buffer.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Neumaier compensated sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_escalation_rescues_singular_system() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let (x, esc) = solve_spd(&a, &b, 1e-10, 6).unwrap();
        assert!(esc >= 1);
        assert!(((&a * &x) - &b).norm() < 1e-6);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let (vals, vecs, tie) = sym_eigen_desc(&m, 1e-12);
        assert_eq!(vals.as_slice(), &[3.0, 2.0, 1.0]);
        assert!(!tie);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum() {
        let mut s = KahanSum::default();
        for v in [1e16, 1.0, -1e16] {
            s.add(v);
        }
        assert_eq!(s.value(), 1.0);
    }
}
