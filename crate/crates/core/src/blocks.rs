//! Block-wise likelihood evaluation.
//!
//! The likelihood is a sum over cells of a function of `pi_ijt = r_i' F_t c_j`.
//! Holding all but one block fixed, it becomes a function of a single row
//! loading `r_i`, column loading `c_j` or factor slice `F_t` whose regressors
//! are precomputed once per pass ("designs"). The per-cell contribution is
//! supplied by a closure so the same kernels serve the family likelihoods, the
//! type-restricted sub-likelihoods and the weighted least-squares surrogate.

use crate::families::CellDerivatives;
use crate::model::FactorParams;

/// Value, gradient and Hessian (row-major, symmetric) of one block.
#[derive(Debug, Clone)]
pub(crate) struct BlockEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub max_abs_pi: f64,
    pub cells: usize,
}

impl BlockEval {
    fn new(k: usize, derivs: bool) -> Self {
        BlockEval {
            value: 0.0,
            grad: if derivs { vec![0.0; k] } else { Vec::new() },
            hess: if derivs { vec![0.0; k * k] } else { Vec::new() },
            max_abs_pi: 0.0,
            cells: 0,
        }
    }

    fn mirror_upper(&mut self, k: usize) {
        if self.hess.is_empty() {
            return;
        }
        for a in 0..k {
            for b in 0..a {
                self.hess[a * k + b] = self.hess[b * k + a];
            }
        }
    }

    fn accumulate(&mut self, d: CellDerivatives, x: &[f64], derivs: bool) {
        self.value += d.loglik;
        self.cells += 1;
        if derivs {
            let k = x.len();
            for (a, (&xa, g)) in x.iter().zip(self.grad.iter_mut()).enumerate() {
                *g += d.d1 * xa;
                let w = d.d2 * xa;
                let row = &mut self.hess[a * k + a..(a + 1) * k];
                for (h, &xb) in row.iter_mut().zip(&x[a..]) {
                    *h += w * xb;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub p1: usize,
    pub p2: usize,
    pub t: usize,
}

impl Dims {
    #[inline]
    pub fn idx(&self, i: usize, j: usize, t: usize) -> usize {
        (t * self.p1 + i) * self.p2 + j
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major copies of the parameters for the hot loops.
#[derive(Debug, Clone)]
pub(crate) struct Flat {
    pub k1: usize,
    pub k2: usize,
    /// p1 x k1, row-major.
    pub r: Vec<f64>,
    /// p2 x k2, row-major.
    pub c: Vec<f64>,
    /// T slices, each vec(F_t) column-major (index p + q * k1).
    pub f: Vec<Vec<f64>>,
}

impl Flat {
    pub fn from_params(theta: &FactorParams) -> Self {
        Flat {
            k1: theta.k1(),
            k2: theta.k2(),
            r: crate::linalg::to_row_major(&theta.r),
            c: crate::linalg::to_row_major(&theta.c),
            f: theta.f.iter().map(|m| m.as_slice().to_vec()).collect(),
        }
    }

    pub fn to_params(&self, dims: Dims) -> FactorParams {
        FactorParams {
            r: crate::linalg::from_row_major(dims.p1, self.k1, &self.r),
            c: crate::linalg::from_row_major(dims.p2, self.k2, &self.c),
            f: self
                .f
                .iter()
                .map(|v| nalgebra::DMatrix::from_column_slice(self.k1, self.k2, v))
                .collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.r[i * self.k1..(i + 1) * self.k1]
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.c[j * self.k2..(j + 1) * self.k2]
    }

    /// F_t c for a column loading `c`.
    fn f_times(&self, t: usize, c: &[f64], out: &mut [f64]) {
        let f = &self.f[t];
        for p in 0..self.k1 {
            out[p] = (0..self.k2).map(|q| f[p + q * self.k1] * c[q]).sum();
        }
    }

    /// F_t' r for a row loading `r`.
    fn ft_times(&self, t: usize, r: &[f64], out: &mut [f64]) {
        let f = &self.f[t];
        for q in 0..self.k2 {
            out[q] = (0..self.k1).map(|p| f[p + q * self.k1] * r[p]).sum();
        }
    }

    /// Regressors of the row blocks: entry (t, j) holds F_t c_j.
    pub fn row_design(&self, dims: Dims) -> Vec<f64> {
        let mut out = vec![0.0; dims.t * dims.p2 * self.k1];
        for t in 0..dims.t {
            for j in 0..dims.p2 {
                let o = (t * dims.p2 + j) * self.k1;
                self.f_times(t, self.col(j), &mut out[o..o + self.k1]);
            }
        }
        out
    }

    /// Regressors of the column blocks: entry (t, i) holds F_t' r_i.
    pub fn col_design(&self, dims: Dims) -> Vec<f64> {
        let mut out = vec![0.0; dims.t * dims.p1 * self.k2];
        for t in 0..dims.t {
            for i in 0..dims.p1 {
                let o = (t * dims.p1 + i) * self.k2;
                self.ft_times(t, self.row(i), &mut out[o..o + self.k2]);
            }
        }
        out
    }

    /// pi for every cell, laid out like the data.
    pub fn natural(&self, dims: Dims) -> Vec<f64> {
        let mut out = vec![0.0; dims.p1 * dims.p2 * dims.t];
        let mut fc = vec![0.0; dims.p2 * self.k1];
        for t in 0..dims.t {
            for j in 0..dims.p2 {
                self.f_times(t, self.col(j), &mut fc[j * self.k1..(j + 1) * self.k1]);
            }
            for i in 0..dims.p1 {
                let r = self.row(i);
                let base = dims.idx(i, 0, t);
                for j in 0..dims.p2 {
                    out[base + j] = dot(r, &fc[j * self.k1..(j + 1) * self.k1]);
                }
            }
        }
        out
    }
}

/// Row block `i` at candidate loading `r`.
pub(crate) fn eval_row<F>(
    dims: Dims,
    design: &[f64],
    k1: usize,
    i: usize,
    r: &[f64],
    cell: F,
    derivs: bool,
) -> BlockEval
where
    F: Fn(usize, f64) -> Option<CellDerivatives>,
{
    let mut out = BlockEval::new(k1, derivs);
    for t in 0..dims.t {
        let base = dims.idx(i, 0, t);
        for j in 0..dims.p2 {
            let x = &design[(t * dims.p2 + j) * k1..(t * dims.p2 + j + 1) * k1];
            let pi = dot(r, x);
            if let Some(d) = cell(base + j, pi) {
                out.max_abs_pi = out.max_abs_pi.max(pi.abs());
                out.accumulate(d, x, derivs);
            }
        }
    }
    out.mirror_upper(k1);
    out
}

/// Column block `j` at candidate loading `c`.
pub(crate) fn eval_col<F>(
    dims: Dims,
    design: &[f64],
    k2: usize,
    j: usize,
    c: &[f64],
    cell: F,
    derivs: bool,
) -> BlockEval
where
    F: Fn(usize, f64) -> Option<CellDerivatives>,
{
    let mut out = BlockEval::new(k2, derivs);
    for t in 0..dims.t {
        for i in 0..dims.p1 {
            let x = &design[(t * dims.p1 + i) * k2..(t * dims.p1 + i + 1) * k2];
            let pi = dot(c, x);
            if let Some(d) = cell(dims.idx(i, j, t), pi) {
                out.max_abs_pi = out.max_abs_pi.max(pi.abs());
                out.accumulate(d, x, derivs);
            }
        }
    }
    out.mirror_upper(k2);
    out
}

/// Factor block `t` at candidate `vec(F_t)` (column-major).
///
/// The Hessian sum over (i, j) of d2 (c_j c_j') kron (r_i r_i') is formed as
/// sum_j (c_j c_j') kron G_j with G_j = sum_i d2 r_i r_i'.
pub(crate) fn eval_factor<F>(
    dims: Dims,
    params: &Flat,
    t: usize,
    f: &[f64],
    cell: F,
    derivs: bool,
) -> BlockEval
where
    F: Fn(usize, f64) -> Option<CellDerivatives>,
{
    let (k1, k2) = (params.k1, params.k2);
    let k = k1 * k2;
    let mut out = BlockEval::new(k, derivs);
    let mut fc = vec![0.0; dims.p2 * k1];
    for j in 0..dims.p2 {
        let c = params.col(j);
        for p in 0..k1 {
            fc[j * k1 + p] = (0..k2).map(|q| f[p + q * k1] * c[q]).sum();
        }
    }
    let (mut g, mut gg) = if derivs {
        (vec![0.0; dims.p2 * k1], vec![0.0; dims.p2 * k1 * k1])
    } else {
        (Vec::new(), Vec::new())
    };
    for i in 0..dims.p1 {
        let r = params.row(i);
        let base = dims.idx(i, 0, t);
        for j in 0..dims.p2 {
            let pi = dot(r, &fc[j * k1..(j + 1) * k1]);
            if let Some(d) = cell(base + j, pi) {
                out.value += d.loglik;
                out.cells += 1;
                out.max_abs_pi = out.max_abs_pi.max(pi.abs());
                if derivs {
                    let gj = &mut g[j * k1..(j + 1) * k1];
                    let gm = &mut gg[j * k1 * k1..(j + 1) * k1 * k1];
                    for (a, (&ra, ga)) in r.iter().zip(gj.iter_mut()).enumerate() {
                        *ga += d.d1 * ra;
                        let w = d.d2 * ra;
                        for (h, &rb) in gm[a * k1 + a..(a + 1) * k1].iter_mut().zip(&r[a..]) {
                            *h += w * rb;
                        }
                    }
                }
            }
        }
    }
    if derivs {
        let mut full = vec![0.0; k1 * k1];
        for j in 0..dims.p2 {
            let c = params.col(j);
            let gj = &g[j * k1..(j + 1) * k1];
            let gm = &gg[j * k1 * k1..(j + 1) * k1 * k1];
            for q in 0..k2 {
                for p in 0..k1 {
                    out.grad[p + q * k1] += c[q] * gj[p];
                }
            }
            // G_j is accumulated upper-triangular; expand it once per column.
            for a in 0..k1 {
                for b in 0..k1 {
                    full[a * k1 + b] = if a <= b { gm[a * k1 + b] } else { gm[b * k1 + a] };
                }
            }
            for q in 0..k2 {
                for qq in q..k2 {
                    let w = c[q] * c[qq];
                    if w == 0.0 {
                        continue;
                    }
                    for p in 0..k1 {
                        let row = (p + q * k1) * k + qq * k1;
                        for (h, &gv) in out.hess[row..row + k1].iter_mut().zip(&full[p * k1..(p + 1) * k1]) {
                            *h += w * gv;
                        }
                    }
                }
            }
        }
        out.mirror_upper(k);
    }
    out
}

/// Sum of the cell contributions over the whole array.
pub(crate) fn eval_total<F>(dims: Dims, params: &Flat, cell: F) -> (f64, usize)
where
    F: Fn(usize, f64) -> Option<CellDerivatives>,
{
    let pis = params.natural(dims);
    let mut sum = crate::linalg::KahanSum::default();
    let mut n = 0;
    for (idx, &pi) in pis.iter().enumerate() {
        if let Some(d) = cell(idx, pi) {
            sum.add(d.loglik);
            n += 1;
        }
    }
    (sum.value(), n)
}
