//! Data model and likelihood objective.
//!
//! Indices in this API are zero-based. The bundle format on disk and the
//! family-map block ranges are one-based and inclusive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Dims, Flat};
use crate::error::{GmfmError, Result};
use crate::families::{self, CellDerivatives, FamilyKind};

/// T observed p1 x p2 matrices with an optional observed-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    p1: usize,
    p2: usize,
    t: usize,
    /// Cell (i, j, t) lives at `(t * p1 + i) * p2 + j`.
    values: Vec<f64>,
    observed: Option<Vec<bool>>,
}

impl MatrixSeries {
    pub fn new(p1: usize, p2: usize, t: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_mask(p1, p2, t, values, None)
    }

    pub fn with_mask(
        p1: usize,
        p2: usize,
        t: usize,
        values: Vec<f64>,
        observed: Option<Vec<bool>>,
    ) -> Result<Self> {
        if p1 < 2 || p2 < 2 || t < 1 {
            return Err(GmfmError::InvalidConfig(format!(
                "need p1, p2 >= 2 and T >= 1, got p1={p1}, p2={p2}, T={t}"
            )));
        }
        let n = p1 * p2 * t;
        if values.len() != n {
            return Err(GmfmError::dims("matrix series values", n, values.len()));
        }
        if let Some(m) = &observed {
            if m.len() != n {
                return Err(GmfmError::dims("observation mask", n, m.len()));
            }
        }
        let observed = observed.filter(|m| m.iter().any(|o| !o));
        Ok(MatrixSeries {
            p1,
            p2,
            t,
            values,
            observed,
        })
    }

    /// Builds a series from T slices of p1 x p2 matrices.
    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| GmfmError::InvalidConfig("no slices".into()))?;
        let (p1, p2) = first.shape();
        let mut values = Vec::with_capacity(p1 * p2 * slices.len());
        for s in slices {
            if s.shape() != (p1, p2) {
                return Err(GmfmError::dims("slice shape", p1 * p2, s.len()));
            }
            values.extend(crate::linalg::to_row_major(s));
        }
        Self::new(p1, p2, slices.len(), values)
    }

    pub fn p1(&self) -> usize {
        self.p1
    }

    pub fn p2(&self) -> usize {
        self.p2
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, t: usize) -> usize {
        (t * self.p1 + i) * self.p2 + j
    }

    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.values[self.index(i, j, t)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.observed.as_deref()
    }

    #[inline]
    pub fn is_observed(&self, idx: usize) -> bool {
        self.observed.as_ref().is_none_or(|m| m[idx])
    }

    pub fn n_observed(&self) -> usize {
        self.observed
            .as_ref()
            .map_or(self.values.len(), |m| m.iter().filter(|o| **o).count())
    }

    pub fn slice(&self, t: usize) -> DMatrix<f64> {
        let n = self.p1 * self.p2;
        DMatrix::from_row_slice(self.p1, self.p2, &self.values[t * n..(t + 1) * n])
    }

    /// Copy of the slices `range` (zero-based, half-open).
    pub fn slices(&self, range: std::ops::Range<usize>) -> Result<MatrixSeries> {
        if range.start >= range.end || range.end > self.t {
            return Err(GmfmError::InvalidConfig(format!(
                "slice range {range:?} outside 0..{}",
                self.t
            )));
        }
        let n = self.p1 * self.p2;
        let values = self.values[range.start * n..range.end * n].to_vec();
        let observed = self
            .observed
            .as_ref()
            .map(|m| m[range.start * n..range.end * n].to_vec());
        MatrixSeries::with_mask(self.p1, self.p2, range.len(), values, observed)
    }
}

/// One override block of a family map. Ranges are one-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyBlock {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    pub slices: [usize; 2],
    pub family: FamilyKind,
}

impl FamilyBlock {
    fn contains(&self, i: usize, j: usize, t: usize) -> bool {
        let inside = |r: [usize; 2], v: usize| (r[0]..=r[1]).contains(&(v + 1));
        inside(self.rows, i) && inside(self.cols, j) && inside(self.slices, t)
    }
}

/// Assignment of a likelihood family to every cell: a default plus override
/// blocks, where later blocks win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMap {
    pub default: FamilyKind,
    #[serde(default)]
    pub blocks: Vec<FamilyBlock>,
}

impl FamilyMap {
    pub fn uniform(family: FamilyKind) -> Self {
        FamilyMap {
            default: family,
            blocks: Vec::new(),
        }
    }

    /// Adds a block over one-based inclusive column range `cols` spanning all
    /// rows and slices.
    pub fn with_columns(mut self, cols: [usize; 2], family: FamilyKind, p1: usize, t: usize) -> Self {
        self.blocks.push(FamilyBlock {
            rows: [1, p1],
            cols,
            slices: [1, t],
            family,
        });
        self
    }

    pub fn family_at(&self, i: usize, j: usize, t: usize) -> FamilyKind {
        self.blocks
            .iter()
            .rev()
            .find(|b| b.contains(i, j, t))
            .map_or(self.default, |b| b.family)
    }

    /// Resolves the family of every cell, laid out like `MatrixSeries`.
    pub fn resolve(&self, p1: usize, p2: usize, t: usize) -> Result<Vec<FamilyKind>> {
        for (n, b) in self.blocks.iter().enumerate() {
            for (name, r, max) in [
                ("rows", b.rows, p1),
                ("cols", b.cols, p2),
                ("slices", b.slices, t),
            ] {
                if r[0] < 1 || r[0] > r[1] || r[1] > max {
                    return Err(GmfmError::InvalidConfig(format!(
                        "family block {n}: {name} range [{}, {}] not within [1, {max}]",
                        r[0], r[1]
                    )));
                }
            }
        }
        let mut out = vec![self.default; p1 * p2 * t];
        for b in &self.blocks {
            for tt in (b.slices[0] - 1)..b.slices[1] {
                for i in (b.rows[0] - 1)..b.rows[1] {
                    let base = (tt * p1 + i) * p2;
                    out[base + b.cols[0] - 1..base + b.cols[1]].fill(b.family);
                }
            }
        }
        Ok(out)
    }

    pub fn is_all(&self, family: FamilyKind) -> bool {
        self.default == family && self.blocks.iter().all(|b| b.family == family)
    }

    pub fn contains_family(&self, family: FamilyKind) -> bool {
        self.default == family || self.blocks.iter().any(|b| b.family == family)
    }
}

/// Observed series together with its resolved family map. Construction
/// checks that every observed cell lies in the support of its family.
#[derive(Debug, Clone)]
pub struct Dataset {
    series: MatrixSeries,
    map: FamilyMap,
    families: Vec<FamilyKind>,
}

impl Dataset {
    pub fn new(series: MatrixSeries, map: FamilyMap) -> Result<Self> {
        let families = map.resolve(series.p1, series.p2, series.t)?;
        for t in 0..series.t {
            for i in 0..series.p1 {
                for j in 0..series.p2 {
                    let idx = series.index(i, j, t);
                    if !series.is_observed(idx) {
                        continue;
                    }
                    let x = series.values[idx];
                    if !families::in_support(families[idx], x) {
                        return Err(GmfmError::Domain {
                            family: families[idx],
                            x,
                            cell: Some((i, j, t)),
                        });
                    }
                }
            }
        }
        Ok(Dataset {
            series,
            map,
            families,
        })
    }

    pub fn series(&self) -> &MatrixSeries {
        &self.series
    }

    pub fn map(&self) -> &FamilyMap {
        &self.map
    }

    pub fn p1(&self) -> usize {
        self.series.p1
    }

    pub fn p2(&self) -> usize {
        self.series.p2
    }

    pub fn t(&self) -> usize {
        self.series.t
    }

    pub fn n_observed(&self) -> usize {
        self.series.n_observed()
    }

    pub(crate) fn dims(&self) -> Dims {
        Dims {
            p1: self.series.p1,
            p2: self.series.p2,
            t: self.series.t,
        }
    }

    pub fn families(&self) -> &[FamilyKind] {
        &self.families
    }

    #[inline]
    pub fn family(&self, idx: usize) -> FamilyKind {
        self.families[idx]
    }

    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        self.series.values[idx]
    }

    #[inline]
    pub fn is_observed(&self, idx: usize) -> bool {
        self.series.is_observed(idx)
    }

    /// Dataset restricted to slices `range` (zero-based, half-open).
    pub fn slices(&self, range: std::ops::Range<usize>) -> Result<Dataset> {
        let start = range.start;
        let series = self.series.slices(range.clone())?;
        let n = self.p1() * self.p2();
        let families = self.families[start * n..range.end * n].to_vec();
        // Family blocks are re-expressed relative to the new slice origin.
        let map = FamilyMap {
            default: self.map.default,
            blocks: self
                .map
                .blocks
                .iter()
                .filter_map(|b| {
                    let lo = b.slices[0].max(start + 1);
                    let hi = b.slices[1].min(range.end);
                    (lo <= hi).then(|| FamilyBlock {
                        slices: [lo - start, hi - start],
                        ..*b
                    })
                })
                .collect(),
        };
        Ok(Dataset {
            series,
            map,
            families,
        })
    }

    /// Full-likelihood cell closure: every observed cell takes part.
    #[inline]
    pub(crate) fn cell_derivs(&self, idx: usize, pi: f64) -> Option<CellDerivatives> {
        self.is_observed(idx)
            .then(|| families::derivatives_unchecked(self.families[idx], self.series.values[idx], pi))
    }

    #[inline]
    pub(crate) fn cell_loglik(&self, idx: usize, pi: f64) -> Option<CellDerivatives> {
        self.is_observed(idx).then(|| CellDerivatives {
            loglik: families::loglik_unchecked(self.families[idx], self.series.values[idx], pi),
            d1: 0.0,
            d2: 0.0,
        })
    }
}

/// Row loadings R (p1 x k1), column loadings C (p2 x k2) and factor slices
/// F_t (k1 x k2).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams {
    pub r: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub f: Vec<DMatrix<f64>>,
}

impl FactorParams {
    pub fn new(r: DMatrix<f64>, c: DMatrix<f64>, f: Vec<DMatrix<f64>>) -> Result<Self> {
        let theta = FactorParams { r, c, f };
        theta.check_shape()?;
        Ok(theta)
    }

    fn check_shape(&self) -> Result<()> {
        let (k1, k2) = (self.k1(), self.k2());
        if k1 == 0 || k2 == 0 {
            return Err(GmfmError::InvalidConfig("factor numbers must be positive".into()));
        }
        if k1 > self.p1() {
            return Err(GmfmError::dims("k1 <= p1", self.p1(), k1));
        }
        if k2 > self.p2() {
            return Err(GmfmError::dims("k2 <= p2", self.p2(), k2));
        }
        if self.f.is_empty() {
            return Err(GmfmError::InvalidConfig("no factor slices".into()));
        }
        for f in &self.f {
            if f.shape() != (k1, k2) {
                return Err(GmfmError::dims("factor slice size", k1 * k2, f.len()));
            }
        }
        let finite = self.r.iter().chain(self.c.iter()).all(|v| v.is_finite())
            && self.f.iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(GmfmError::NonFinite("factor parameters".into()));
        }
        Ok(())
    }

    pub fn k1(&self) -> usize {
        self.r.ncols()
    }

    pub fn k2(&self) -> usize {
        self.c.ncols()
    }

    pub fn p1(&self) -> usize {
        self.r.nrows()
    }

    pub fn p2(&self) -> usize {
        self.c.nrows()
    }

    pub fn t(&self) -> usize {
        self.f.len()
    }

    /// Checks that the parameters fit the data dimensions.
    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        self.check_shape()?;
        if self.p1() != data.p1() {
            return Err(GmfmError::dims("row loadings rows (p1)", data.p1(), self.p1()));
        }
        if self.p2() != data.p2() {
            return Err(GmfmError::dims("column loadings rows (p2)", data.p2(), self.p2()));
        }
        if self.t() != data.t() {
            return Err(GmfmError::dims("factor slices (T)", data.t(), self.t()));
        }
        Ok(())
    }

    /// `vec(F_t)`, column-major.
    pub fn factor_vec(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(self.f[t].as_slice())
    }
}

/// R F_t C' for every slice.
pub fn natural_params(theta: &FactorParams) -> Vec<DMatrix<f64>> {
    theta
        .f
        .iter()
        .map(|f| &theta.r * f * theta.c.transpose())
        .collect()
}

/// Natural parameters clamped to `[-bound, bound]`.
pub fn natural_params_clamped(theta: &FactorParams, bound: f64) -> Vec<DMatrix<f64>> {
    natural_params(theta)
        .into_iter()
        .map(|m| m.map(|v| v.clamp(-bound, bound)))
        .collect()
}

/// Sum of the cell log-likelihoods over the observed cells.
pub fn total_loglik(data: &Dataset, theta: &FactorParams) -> Result<f64> {
    theta.check_against(data)?;
    let flat = Flat::from_params(theta);
    let (value, _) = blocks::eval_total(data.dims(), &flat, |idx, pi| data.cell_loglik(idx, pi));
    if value.is_nan() {
        return Err(GmfmError::NonFinite("log-likelihood".into()));
    }
    Ok(value)
}

/// Positive multipliers of the three penalty terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            b1: 1.0,
            b2: 1.0,
            b3: 1.0,
        }
    }
}

impl PenaltyWeights {
    pub fn new(b1: f64, b2: f64, b3: f64) -> Result<Self> {
        if [b1, b2, b3].iter().all(|b| b.is_finite() && *b > 0.0) {
            Ok(PenaltyWeights { b1, b2, b3 })
        } else {
            Err(GmfmError::InvalidConfig(
                "penalty weights must be strictly positive".into(),
            ))
        }
    }
}

/// The three penalty terms; each is <= 0 and all vanish exactly when the
/// identification constraints hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyTerms {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

impl PenaltyTerms {
    pub fn total(&self) -> f64 {
        self.p1 + self.p2 + self.p3
    }
}

fn off_diag_sq_sum(m: &DMatrix<f64>) -> f64 {
    let k = m.nrows();
    (0..k)
        .flat_map(|p| ((p + 1)..k).map(move |q| (p, q)))
        .map(|(p, q)| m[(p, q)] * m[(p, q)])
        .sum()
}

pub fn penalty_terms(theta: &FactorParams, w: &PenaltyWeights) -> PenaltyTerms {
    let (p1, p2, t) = (theta.p1() as f64, theta.p2() as f64, theta.t() as f64);
    let (k1, k2) = (theta.k1(), theta.k2());
    let rtr = theta.r.transpose() * &theta.r;
    let ctc = theta.c.transpose() * &theta.c;
    let mut ff_t = DMatrix::zeros(k1, k1);
    let mut ft_f = DMatrix::zeros(k2, k2);
    for f in &theta.f {
        ff_t += f * f.transpose();
        ft_f += f.transpose() * f;
    }
    let scale = p1 * p2 * t;

    let diag_dev = |g: &DMatrix<f64>, p: f64| -> f64 {
        (0..g.nrows()).map(|k| (g[(k, k)] - p).powi(2)).sum()
    };
    let pen1 = -w.b1
        * scale
        * (off_diag_sq_sum(&rtr) / (2.0 * p1 * p1)
            + diag_dev(&rtr, p1) / (8.0 * p1 * p1)
            + off_diag_sq_sum(&ff_t) / (2.0 * t * t));
    let pen2 = -w.b2
        * scale
        * (off_diag_sq_sum(&ctc) / (2.0 * p2 * p2)
            + diag_dev(&ctc, p2) / (8.0 * p2 * p2)
            + off_diag_sq_sum(&ft_f) / (2.0 * t * t));

    // Inner sum over i of ((r_ip^2 - 1)/2) f_pq + sum_{k != p} r_ip r_ik f_kq,
    // i.e. ((R'R)_pp - p1)/2 * F[p,q] + sum_{k != p} (R'R)_pk F[k,q].
    let mut pen3 = 0.0;
    for f in &theta.f {
        let mut s = 0.0;
        for p in 0..k1 {
            for q in 0..k2 {
                let mut inner = 0.5 * (rtr[(p, p)] - p1) * f[(p, q)];
                for k in (0..k1).filter(|&k| k != p) {
                    inner += rtr[(p, k)] * f[(k, q)];
                }
                s += inner * inner;
            }
        }
        pen3 += s / (2.0 * p1);
    }
    let pen3 = -w.b3 * p2 * pen3;
    PenaltyTerms {
        p1: pen1,
        p2: pen2,
        p3: pen3,
    }
}

pub fn penalty(theta: &FactorParams, w: &PenaltyWeights) -> f64 {
    penalty_terms(theta, w).total()
}

/// Augmented objective Q = L + P. Diagnostic only; the fitting algorithms
/// maximise L and impose the constraints by normalisation.
pub fn objective_q(data: &Dataset, theta: &FactorParams, w: &PenaltyWeights) -> Result<f64> {
    Ok(total_loglik(data, theta)? + penalty(theta, w))
}

/// Score and Hessian of the log-likelihood in one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDerivatives {
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub loglik: f64,
}

impl BlockDerivatives {
    pub(crate) fn from_eval(e: blocks::BlockEval) -> Self {
        let k = e.grad.len();
        BlockDerivatives {
            score: DVector::from_vec(e.grad),
            hessian: DMatrix::from_row_slice(k, k, &e.hess),
            loglik: e.value,
        }
    }
}

fn check_index(what: &str, idx: usize, n: usize) -> Result<()> {
    if idx >= n {
        Err(GmfmError::InvalidConfig(format!(
            "{what} index {idx} out of range 0..{n}"
        )))
    } else {
        Ok(())
    }
}

/// Derivatives of L in the row loading `r_i`.
pub fn row_block(data: &Dataset, theta: &FactorParams, i: usize) -> Result<BlockDerivatives> {
    theta.check_against(data)?;
    check_index("row", i, data.p1())?;
    let flat = Flat::from_params(theta);
    let design = flat.row_design(data.dims());
    let e = blocks::eval_row(
        data.dims(),
        &design,
        flat.k1,
        i,
        flat.row(i),
        |idx, pi| data.cell_derivs(idx, pi),
        true,
    );
    Ok(BlockDerivatives::from_eval(e))
}

/// Derivatives of L in the column loading `c_j`.
pub fn col_block(data: &Dataset, theta: &FactorParams, j: usize) -> Result<BlockDerivatives> {
    theta.check_against(data)?;
    check_index("column", j, data.p2())?;
    let flat = Flat::from_params(theta);
    let design = flat.col_design(data.dims());
    let e = blocks::eval_col(
        data.dims(),
        &design,
        flat.k2,
        j,
        flat.col(j),
        |idx, pi| data.cell_derivs(idx, pi),
        true,
    );
    Ok(BlockDerivatives::from_eval(e))
}

/// Derivatives of L in `f_t = vec(F_t)` (column-major).
pub fn factor_block(data: &Dataset, theta: &FactorParams, t: usize) -> Result<BlockDerivatives> {
    theta.check_against(data)?;
    check_index("slice", t, data.t())?;
    let flat = Flat::from_params(theta);
    let e = blocks::eval_factor(
        data.dims(),
        &flat,
        t,
        &flat.f[t],
        |idx, pi| data.cell_derivs(idx, pi),
        true,
    );
    Ok(BlockDerivatives::from_eval(e))
}
