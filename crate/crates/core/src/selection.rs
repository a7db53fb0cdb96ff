//! Choice of the factor numbers by a penalised likelihood criterion.
//!
//! For every candidate (l1, l2) the model is fitted and scored by
//! `-L / N + (l1 + l2) g(p1, p2, T)` with `N` the number of observed cells and
//! `g = (p1 + p2 + T) / (p1 p2 T) * ln(p1 p2 T / (p1 + p2 + T))`.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmfmError, Result};
use crate::evalsim::Estimator;
use crate::mm::mm_fit_from;
use crate::model::{total_loglik, Dataset, FactorParams};
use crate::rng::{derive_seed, stream};
use crate::tsam::tsam_fit_from;

pub const CRITERION_HEADER: &str = "l1,l2,negloglik_scaled,penalty,criterion";

pub fn penalty_g(p1: usize, p2: usize, t: usize) -> f64 {
    let sum = (p1 + p2 + t) as f64;
    let prod = (p1 * p2 * t) as f64;
    sum / prod * (prod / sum).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub l1_max: usize,
    pub l2_max: usize,
    /// Start each cell from the previous cell's solution padded with a small
    /// random column instead of fresh random restarts.
    pub warm: bool,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        SelectionGrid {
            l1_max: 8,
            l2_max: 8,
            warm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub l1: usize,
    pub l2: usize,
    pub loglik: f64,
    pub negloglik_scaled: f64,
    pub penalty: f64,
    /// Infinite when the fit failed.
    pub criterion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl CriterionRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.l1, self.l2, self.negloglik_scaled, self.penalty, self.criterion
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub k1: usize,
    pub k2: usize,
    pub table: Vec<CriterionRow>,
    pub boundary_hit: bool,
    /// Nested fits whose log-likelihood fell below the smaller model's.
    pub nesting_violations: usize,
    pub warnings: Vec<String>,
}

/// Seed of grid cell (l1, l2).
pub fn grid_seed(seed: u64, l1: usize, l2: usize) -> u64 {
    derive_seed(seed, &format!("grid/{l1}/{l2}"))
}

fn base_seed(est: &Estimator) -> u64 {
    match est {
        Estimator::Tsam(c) => c.seed,
        Estimator::Mm(c) => c.seed,
        Estimator::AlphaPca { .. } => 0,
    }
}

/// Appends one small random column to R or C (and the matching row/column
/// of every factor slice).
fn pad(theta: &FactorParams, grow_rows: bool, seed: u64) -> FactorParams {
    let mut rng = stream(seed, "grid/pad");
    let mut small = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-0.1..=0.1));
    if grow_rows {
        let r = theta.r.clone().insert_column(theta.k1(), 0.0);
        let mut r = r;
        r.set_column(theta.k1(), &small(theta.p1(), 1).column(0));
        let f = theta
            .f
            .iter()
            .map(|f| {
                let mut g = f.clone().insert_row(f.nrows(), 0.0);
                let extra = small(1, f.ncols());
                g.set_row(f.nrows(), &extra.row(0));
                g
            })
            .collect();
        FactorParams { r, c: theta.c.clone(), f }
    } else {
        let mut c = theta.c.clone().insert_column(theta.k2(), 0.0);
        c.set_column(theta.k2(), &small(theta.p2(), 1).column(0));
        let f = theta
            .f
            .iter()
            .map(|f| {
                let mut g = f.clone().insert_column(f.ncols(), 0.0);
                let extra = small(f.nrows(), 1);
                g.set_column(f.ncols(), &extra.column(0));
                g
            })
            .collect();
        FactorParams { r: theta.r.clone(), c, f }
    }
}

fn fit_cell(data: &Dataset, est: &Estimator, l1: usize, l2: usize, start: Option<&FactorParams>) -> Result<FactorParams> {
    let seed = grid_seed(base_seed(est), l1, l2);
    let cell = est.with_factor_numbers(l1, l2).with_seed(seed);
    let starts: Vec<FactorParams> = start.into_iter().cloned().collect();
    match &cell {
        Estimator::Tsam(c) => tsam_fit_from(data, c, &starts).map(|o| o.theta),
        Estimator::Mm(c) => mm_fit_from(data, c, &starts).map(|o| o.theta),
        Estimator::AlphaPca { .. } => cell.fit(data),
    }
}

fn row_from(data: &Dataset, l1: usize, l2: usize, g: f64, fit: &Result<FactorParams>) -> CriterionRow {
    let n = data.n_observed() as f64;
    let penalty = (l1 + l2) as f64 * g;
    let loglik = fit.as_ref().map_err(|e| e.to_string()).and_then(|th| total_loglik(data, th).map_err(|e| e.to_string()));
    match loglik {
        Ok(l) if l.is_finite() => CriterionRow {
            l1,
            l2,
            loglik: l,
            negloglik_scaled: -l / n,
            penalty,
            criterion: -l / n + penalty,
            failure: None,
        },
        Ok(l) => CriterionRow {
            l1,
            l2,
            loglik: l,
            negloglik_scaled: f64::INFINITY,
            penalty,
            criterion: f64::INFINITY,
            failure: Some("non-finite log-likelihood".into()),
        },
        Err(msg) => CriterionRow {
            l1,
            l2,
            loglik: f64::NEG_INFINITY,
            negloglik_scaled: f64::INFINITY,
            penalty,
            criterion: f64::INFINITY,
            failure: Some(msg),
        },
    }
}

pub fn select_factor_numbers(data: &Dataset, grid: &SelectionGrid, estimator: &Estimator) -> Result<Selection> {
    if grid.l1_max == 0 || grid.l2_max == 0 {
        return Err(GmfmError::InvalidConfig("grid bounds must be at least 1".into()));
    }
    if grid.l1_max > data.p1() || grid.l2_max > data.p2() {
        return Err(GmfmError::InvalidConfig(format!(
            "grid bounds ({}, {}) exceed the dimensions ({}, {})",
            grid.l1_max,
            grid.l2_max,
            data.p1(),
            data.p2()
        )));
    }
    let g = penalty_g(data.p1(), data.p2(), data.t());
    let cells: Vec<(usize, usize)> = (1..=grid.l1_max)
        .flat_map(|l1| (1..=grid.l2_max).map(move |l2| (l1, l2)))
        .collect();
    let warm = grid.warm && !matches!(estimator, Estimator::AlphaPca { .. });
    let table: Vec<CriterionRow> = if warm {
        // Row-major walk: (l1, l2) starts from (l1, l2 - 1), the first cell of
        // a row from (l1 - 1, 1).
        let mut rows = Vec::with_capacity(cells.len());
        let mut prev_row_first: Option<FactorParams> = None;
        for l1 in 1..=grid.l1_max {
            let mut prev: Option<FactorParams> = None;
            for l2 in 1..=grid.l2_max {
                let seed = grid_seed(base_seed(estimator), l1, l2);
                let start = match (&prev, &prev_row_first) {
                    (Some(p), _) => Some(pad(p, false, seed)),
                    (None, Some(p)) => Some(pad(p, true, seed)),
                    (None, None) => None,
                };
                let fit = fit_cell(data, estimator, l1, l2, start.as_ref());
                rows.push(row_from(data, l1, l2, g, &fit));
                let ok = fit.ok();
                if l2 == 1 {
                    prev_row_first = ok.clone();
                }
                prev = ok;
            }
        }
        rows
    } else {
        cells
            .par_iter()
            .map(|&(l1, l2)| {
                let fit = fit_cell(data, estimator, l1, l2, None);
                row_from(data, l1, l2, g, &fit)
            })
            .collect()
    };
    finish_selection(table, grid, data)
}

fn finish_selection(table: Vec<CriterionRow>, grid: &SelectionGrid, data: &Dataset) -> Result<Selection> {
    let best = table
        .iter()
        .filter(|r| r.criterion.is_finite())
        .min_by(|a, b| {
            a.criterion
                .total_cmp(&b.criterion)
                .then((a.l1 + a.l2).cmp(&(b.l1 + b.l2)))
                .then(a.l1.cmp(&b.l1))
        })
        .ok_or_else(|| GmfmError::FitFailed("every grid cell failed to fit".into()))?;
    let (k1, k2) = (best.l1, best.l2);
    let mut warnings = Vec::new();
    let failed = table.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        warnings.push(format!("{failed} grid cell(s) failed and were scored as infinite"));
    }
    let boundary_hit = (k1 == grid.l1_max && grid.l1_max < data.p1()) || (k2 == grid.l2_max && grid.l2_max < data.p2());
    if boundary_hit {
        warnings.push(format!(
            "selected ({k1}, {k2}) lies on the grid boundary ({}, {}); larger factor numbers were not considered",
            grid.l1_max, grid.l2_max
        ));
    }
    let at = |l1: usize, l2: usize| table.iter().find(|r| r.l1 == l1 && r.l2 == l2).map(|r| r.loglik);
    let mut nesting_violations = 0;
    for r in &table {
        for (a, b) in [(r.l1.wrapping_sub(1), r.l2), (r.l1, r.l2.wrapping_sub(1))] {
            if let Some(smaller) = at(a, b) {
                if r.loglik.is_finite() && smaller.is_finite() && r.loglik < smaller - 1e-6 * smaller.abs().max(1.0) {
                    nesting_violations += 1;
                }
            }
        }
    }
    if nesting_violations > 0 {
        warnings.push(format!(
            "{nesting_violations} nested fit(s) have a lower log-likelihood than the smaller model; those fits are under-optimised"
        ));
    }
    Ok(Selection {
        k1,
        k2,
        table,
        boundary_hit,
        nesting_violations,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsim::{simulate_case, SimCase, SimulationSpec};
    use crate::families::FamilyKind;
    use crate::model::{FamilyMap, MatrixSeries};
    use crate::tsam::TsamConfig;
    use rand_distr::StandardNormal;

    #[test]
    fn penalty_values() {
        let g = penalty_g(20, 20, 30);
        assert!((g - 70.0 / 12000.0 * (12000.0f64 / 70.0).ln()).abs() < 1e-15);
        assert!((g - 0.030005).abs() < 1e-5);
        assert!((g - 0.0300076390).abs() < 1e-10);
        assert!((penalty_g(100, 100, 100) - 0.0024335).abs() < 1e-7);
        assert_eq!(penalty_g(7, 11, 5), penalty_g(11, 7, 5));
    }

    #[test]
    fn tie_break_prefers_parsimony() {
        let row = |l1, l2, c| CriterionRow { l1, l2, loglik: 0.0, negloglik_scaled: 0.0, penalty: 0.0, criterion: c, failure: None };
        let table = vec![row(1, 2, 1.0), row(2, 1, 1.0), row(1, 1, 2.0), row(2, 2, 1.0)];
        let data = simulate_case(&SimulationSpec::new(SimCase::Case1, 4, 4, 3, 1)).unwrap().data;
        let grid = SelectionGrid { l1_max: 2, l2_max: 2, warm: false };
        let s = finish_selection(table, &grid, &data).unwrap();
        assert_eq!((s.k1, s.k2), (1, 2));
    }

    #[test]
    fn table_shape_and_boundary_warning() {
        let sim = simulate_case(&SimulationSpec::new(SimCase::Case1, 10, 10, 10, 2)).unwrap();
        let est = Estimator::Tsam(TsamConfig { restarts: 1, ..TsamConfig::new(1, 1) });
        let grid = SelectionGrid { l1_max: 1, l2_max: 1, warm: false };
        let s = select_factor_numbers(&sim.data, &grid, &est).unwrap();
        assert_eq!((s.k1, s.k2), (1, 1));
        assert!(s.boundary_hit);
        assert!(s.warnings.iter().any(|w| w.contains("boundary")));
        let grid = SelectionGrid { l1_max: 3, l2_max: 2, warm: false };
        let s = select_factor_numbers(&sim.data, &grid, &est).unwrap();
        assert_eq!(s.table.len(), 6);
    }

    #[test]
    fn pure_noise_selects_smallest_model() {
        let mut rng = stream(3, "test/noise");
        let values: Vec<f64> = (0..12 * 12 * 12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let data = Dataset::new(MatrixSeries::new(12, 12, 12, values).unwrap(), FamilyMap::uniform(FamilyKind::Gaussian)).unwrap();
        let est = Estimator::Tsam(TsamConfig { restarts: 1, ..TsamConfig::new(1, 1) });
        let s = select_factor_numbers(&data, &SelectionGrid { l1_max: 3, l2_max: 3, warm: false }, &est).unwrap();
        assert_eq!((s.k1, s.k2), (1, 1));
    }

    #[test]
    fn warm_grid_matches_truth_on_clear_signal() {
        let mut spec = SimulationSpec::new(SimCase::Case1, 20, 20, 20, 4);
        spec.seed = 4;
        let sim = simulate_case(&spec).unwrap();
        // Strengthen the signal so the tiny instance is unambiguous.
        let strong = crate::model::FactorParams { f: sim.truth.f.iter().map(|f| f * 10.0).collect(), ..sim.truth.clone() };
        let mut r = stream(4, "test/strong");
        let mut values = Vec::new();
        for pi in crate::model::natural_params(&strong) {
            for i in 0..20 {
                for j in 0..20 {
                    values.push(pi[(i, j)] + r.sample::<f64, _>(StandardNormal));
                }
            }
        }
        let data = Dataset::new(MatrixSeries::new(20, 20, 20, values).unwrap(), FamilyMap::uniform(FamilyKind::Gaussian)).unwrap();
        let est = Estimator::Tsam(TsamConfig { restarts: 1, ..TsamConfig::new(1, 1) });
        let grid = SelectionGrid { l1_max: 3, l2_max: 3, warm: true };
        let s = select_factor_numbers(&data, &grid, &est).unwrap();
        assert_eq!((s.k1, s.k2), (2, 2));
    }

    #[test]
    fn relabelling_rows_and_columns_keeps_the_choice() {
        let sim = simulate_case(&SimulationSpec::new(SimCase::Case3, 10, 8, 12, 5)).unwrap();
        let d = &sim.data;
        let perm_r: Vec<usize> = (0..10).rev().collect();
        let perm_c: Vec<usize> = vec![3, 1, 7, 0, 2, 6, 4, 5];
        let mut values = Vec::new();
        for t in 0..12 {
            for i in 0..10 {
                for j in 0..8 {
                    values.push(d.series().get(perm_r[i], perm_c[j], t));
                }
            }
        }
        let permuted = Dataset::new(MatrixSeries::new(10, 8, 12, values).unwrap(), d.map().clone()).unwrap();
        let est = Estimator::Tsam(TsamConfig { restarts: 2, ..TsamConfig::new(1, 1) });
        let grid = SelectionGrid { l1_max: 3, l2_max: 3, warm: false };
        let a = select_factor_numbers(d, &grid, &est).unwrap();
        let b = select_factor_numbers(&permuted, &grid, &est).unwrap();
        assert_eq!((a.k1, a.k2), (b.k1, b.k2));
    }
}
