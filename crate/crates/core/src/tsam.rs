//! Two-stage alternating maximisation.
//!
//! Stage one alternates column, row and slice updates, each maximising the
//! likelihood of a single-type subset of the cells in its line. Stage two
//! applies one Newton step per block on the full likelihood, with every block
//! step computed from the same stage-one estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Flat};
use crate::error::{GmfmError, Result};
use crate::families::{self, FamilyKind};
use crate::fit::{
    self, default_pi_clamp, random_start, restart_stream_name, validate_factor_numbers, Algo,
    FitOutput, InitStrategy, RestartRecord, RestartResult, SetSizes,
};
use crate::linalg::solve_spd;
use crate::model::{Dataset, FactorParams};
use crate::newton::{self, NewtonOptions};

/// Rule that picks the family whose cells drive each stage-one update.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetRule {
    /// The most frequent family in the line; ties go to the family listed
    /// first in `FamilyKind::ALL`.
    #[default]
    Modal,
    /// The first listed family present in the line, else the modal one.
    Priority(Vec<FamilyKind>),
    /// Every observed cell of the line, whatever its family.
    All,
}

impl SetRule {
    pub fn describe(&self) -> String {
        match self {
            SetRule::Modal => "modal".into(),
            SetRule::All => "all".into(),
            SetRule::Priority(list) => {
                let names: Vec<&str> = list.iter().map(|f| f.as_str()).collect();
                format!("priority:{}", names.join(","))
            }
        }
    }
}

impl std::str::FromStr for SetRule {
    type Err = GmfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modal" => Ok(SetRule::Modal),
            "all" => Ok(SetRule::All),
            _ => {
                let list = s.strip_prefix("priority:").ok_or_else(|| {
                    GmfmError::InvalidConfig(format!(
                        "unknown set rule {s:?}; expected modal, all or priority:<families>"
                    ))
                })?;
                let fams = list
                    .split(',')
                    .map(|f| f.trim().parse())
                    .collect::<Result<Vec<FamilyKind>>>()?;
                Ok(SetRule::Priority(fams))
            }
        }
    }
}

/// Family selected for every column, row and slice (`None`: all cells).
#[derive(Debug, Clone, PartialEq)]
pub struct TypedSets {
    pub columns: Vec<Option<FamilyKind>>,
    pub rows: Vec<Option<FamilyKind>>,
    pub slices: Vec<Option<FamilyKind>>,
    pub sizes: SetSizes,
}

fn pick(counts: &[usize; 5], rule: &SetRule) -> Option<FamilyKind> {
    let modal = || {
        let mut best: Option<(usize, usize)> = None;
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
                best = Some((k, n));
            }
        }
        best.map(|(k, _)| FamilyKind::ALL[k])
    };
    match rule {
        SetRule::All => None,
        SetRule::Modal => modal(),
        SetRule::Priority(list) => list
            .iter()
            .copied()
            .find(|f| counts[family_slot(*f)] > 0)
            .or_else(modal),
    }
}

fn family_slot(f: FamilyKind) -> usize {
    FamilyKind::ALL.iter().position(|g| *g == f).expect("family is listed")
}

/// Builds the single-type index sets of the alternating stage.
pub fn typed_index_sets(data: &Dataset, rule: &SetRule) -> TypedSets {
    let (p1, p2, t) = (data.p1(), data.p2(), data.t());
    let mut col_counts = vec![[0usize; 5]; p2];
    let mut row_counts = vec![[0usize; 5]; p1];
    let mut slice_counts = vec![[0usize; 5]; t];
    for tt in 0..t {
        for i in 0..p1 {
            for j in 0..p2 {
                let idx = data.series().index(i, j, tt);
                if data.is_observed(idx) {
                    let s = family_slot(data.family(idx));
                    col_counts[j][s] += 1;
                    row_counts[i][s] += 1;
                    slice_counts[tt][s] += 1;
                }
            }
        }
    }
    let choose = |counts: &Vec<[usize; 5]>| -> (Vec<Option<FamilyKind>>, Vec<usize>) {
        counts
            .iter()
            .map(|c| {
                let sel = pick(c, rule);
                let size = match sel {
                    Some(f) => c[family_slot(f)],
                    None => c.iter().sum(),
                };
                (sel, size)
            })
            .unzip()
    };
    let (columns, col_sizes) = choose(&col_counts);
    let (rows, row_sizes) = choose(&row_counts);
    let (slices, slice_sizes) = choose(&slice_counts);
    TypedSets {
        columns,
        rows,
        slices,
        sizes: SetSizes {
            rule: rule.describe(),
            columns: col_sizes,
            rows: row_sizes,
            slices: slice_sizes,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsamConfig {
    pub k1: usize,
    pub k2: usize,
    pub restarts: usize,
    pub max_outer: usize,
    pub inner_newton_iters: usize,
    /// Relative change of the full log-likelihood that ends stage one.
    pub tol: f64,
    pub grad_tol: f64,
    /// Bound on |pi| during updates; `None` picks 8 when a Poisson cell is
    /// present and 30 otherwise.
    pub pi_clamp: Option<f64>,
    pub ridge: f64,
    pub seed: u64,
    pub set_rule: SetRule,
    pub init: InitStrategy,
}

impl TsamConfig {
    pub fn new(k1: usize, k2: usize) -> Self {
        TsamConfig {
            k1,
            k2,
            restarts: 5,
            max_outer: 100,
            inner_newton_iters: 50,
            tol: 1e-6,
            grad_tol: 1e-8,
            pi_clamp: None,
            ridge: 1e-8,
            seed: 0,
            set_rule: SetRule::Modal,
            init: InitStrategy::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(GmfmError::InvalidConfig("restarts must be at least 1".into()));
        }
        if self.max_outer == 0 || self.inner_newton_iters == 0 {
            return Err(GmfmError::InvalidConfig("iteration caps must be positive".into()));
        }
        for (name, v) in [("tol", self.tol), ("grad_tol", self.grad_tol), ("ridge", self.ridge)] {
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

    fn newton_options(&self, pi_clamp: f64) -> NewtonOptions {
        NewtonOptions {
            max_iter: self.inner_newton_iters,
            grad_tol: self.grad_tol,
            ridge: self.ridge,
            pi_clamp,
            max_halvings: 30,
        }
    }
}

#[inline]
fn selected(data: &Dataset, idx: usize, sel: Option<FamilyKind>) -> bool {
    data.is_observed(idx) && sel.is_none_or(|f| data.family(idx) == f)
}

fn cell_for(data: &Dataset, sel: Option<FamilyKind>) -> impl Fn(usize, f64) -> Option<families::CellDerivatives> + '_ {
    move |idx, pi| {
        selected(data, idx, sel).then(|| families::derivatives_unchecked(data.family(idx), data.value(idx), pi))
    }
}

fn full_loglik(data: &Dataset, flat: &Flat) -> f64 {
    blocks::eval_total(data.dims(), flat, |idx, pi| data.cell_loglik(idx, pi)).0
}

/// Counters gathered while running Newton sub-problems.
#[derive(Default)]
struct Tally {
    clamp_hits: usize,
    ridge_escalations: usize,
}

impl Tally {
    fn add(&mut self, o: &newton::NewtonOutcome) {
        self.clamp_hits += o.clamp_hits;
        self.ridge_escalations += o.ridge_escalations;
    }
}

/// One Gauss-Seidel pass: columns, then rows, then slices.
fn outer_pass(data: &Dataset, sets: &TypedSets, flat: &mut Flat, opts: &NewtonOptions, tally: &mut Tally) -> Result<()> {
    let dims = data.dims();
    let (k1, k2) = (flat.k1, flat.k2);

    let design = flat.col_design(dims);
    for j in 0..dims.p2 {
        let cell = cell_for(data, sets.columns[j]);
        let out = newton::maximize(
            |c| blocks::eval_col(dims, &design, k2, j, c, &cell, true),
            flat.col(j),
            opts,
        );
        check_finite(out.value, "column", j)?;
        tally.add(&out);
        flat.c[j * k2..(j + 1) * k2].copy_from_slice(&out.x);
    }

    let design = flat.row_design(dims);
    for i in 0..dims.p1 {
        let cell = cell_for(data, sets.rows[i]);
        let out = newton::maximize(
            |r| blocks::eval_row(dims, &design, k1, i, r, &cell, true),
            flat.row(i),
            opts,
        );
        check_finite(out.value, "row", i)?;
        tally.add(&out);
        flat.r[i * k1..(i + 1) * k1].copy_from_slice(&out.x);
    }

    for t in 0..dims.t {
        let cell = cell_for(data, sets.slices[t]);
        let x0 = flat.f[t].clone();
        let out = newton::maximize(|f| blocks::eval_factor(dims, flat, t, f, &cell, true), &x0, opts);
        check_finite(out.value, "slice", t)?;
        tally.add(&out);
        flat.f[t] = out.x;
    }
    Ok(())
}

fn check_finite(v: f64, what: &str, idx: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(GmfmError::FitFailed(format!(
            "non-finite sub-likelihood in {what} update {}",
            idx + 1
        )))
    }
}

/// Stage one from `init`. The record collects the trajectory and counters.
pub fn alternating_stage(
    data: &Dataset,
    config: &TsamConfig,
    init: &FactorParams,
    sets: &TypedSets,
) -> Result<(FactorParams, RestartRecord)> {
    init.check_against(data)?;
    let mut record = RestartRecord::new(String::new());
    let mut flat = Flat::from_params(init);
    let pi_clamp = config.pi_clamp.unwrap_or_else(|| default_pi_clamp(data));
    run_stage(data, config, sets, &mut flat, pi_clamp, &mut record)?;
    Ok((flat.to_params(data.dims()), record))
}

fn run_stage(
    data: &Dataset,
    config: &TsamConfig,
    sets: &TypedSets,
    flat: &mut Flat,
    pi_clamp: f64,
    record: &mut RestartRecord,
) -> Result<()> {
    let opts = config.newton_options(pi_clamp);
    let mut tally = Tally::default();
    let mut prev = full_loglik(data, flat);
    for iter in 0..config.max_outer {
        outer_pass(data, sets, flat, &opts, &mut tally)?;
        let l = full_loglik(data, flat);
        if !l.is_finite() {
            return Err(GmfmError::FitFailed(format!(
                "non-finite log-likelihood after outer iteration {}",
                iter + 1
            )));
        }
        record.trajectory.push(l);
        record.iterations = iter + 1;
        if l < prev - 1e-10 * prev.abs().max(1.0) {
            record.monotone_violations += 1;
        }
        let rel = (l - prev).abs() / prev.abs().max(1.0);
        prev = l;
        if rel < config.tol {
            record.converged = true;
            break;
        }
    }
    record.clamp_hits += tally.clamp_hits;
    record.ridge_escalations += tally.ridge_escalations;
    record.stage_one_loglik = Some(prev);
    Ok(())
}

/// Block counts of a correction step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorrectionInfo {
    pub skipped: usize,
    pub ridge_escalations: usize,
}

/// One Newton step per block on the full likelihood, all from `theta`.
pub fn one_step_correction(data: &Dataset, theta: &FactorParams, ridge: f64) -> Result<(FactorParams, CorrectionInfo)> {
    theta.check_against(data)?;
    let flat = Flat::from_params(theta);
    let (out, info) = correct_flat(data, &flat, ridge);
    Ok((out.to_params(data.dims()), info))
}

fn correct_flat(data: &Dataset, flat: &Flat, ridge: f64) -> (Flat, CorrectionInfo) {
    let dims = data.dims();
    let (k1, k2) = (flat.k1, flat.k2);
    let cell = |idx: usize, pi: f64| data.cell_derivs(idx, pi);
    let mut info = CorrectionInfo::default();
    let mut step = |e: blocks::BlockEval, x: &[f64]| -> Vec<f64> {
        let k = x.len();
        let neg_h = DMatrix::from_row_slice(k, k, &e.hess).map(|v| -v);
        let g = DVector::from_column_slice(&e.grad);
        match solve_spd(&neg_h, &g, ridge, 4) {
            Some((d, esc)) if d.iter().all(|v| v.is_finite()) => {
                info.ridge_escalations += esc;
                x.iter().zip(d.iter()).map(|(a, b)| a + b).collect()
            }
            _ => {
                info.skipped += 1;
                x.to_vec()
            }
        }
    };
    let mut out = flat.clone();
    let row_design = flat.row_design(dims);
    for i in 0..dims.p1 {
        let e = blocks::eval_row(dims, &row_design, k1, i, flat.row(i), cell, true);
        let x = step(e, flat.row(i));
        out.r[i * k1..(i + 1) * k1].copy_from_slice(&x);
    }
    for t in 0..dims.t {
        let e = blocks::eval_factor(dims, flat, t, &flat.f[t], cell, true);
        out.f[t] = step(e, &flat.f[t]);
    }
    let col_design = flat.col_design(dims);
    for j in 0..dims.p2 {
        let e = blocks::eval_col(dims, &col_design, k2, j, flat.col(j), cell, true);
        let x = step(e, flat.col(j));
        out.c[j * k2..(j + 1) * k2].copy_from_slice(&x);
    }
    (out, info)
}

fn run_restart(
    data: &Dataset,
    config: &TsamConfig,
    sets: &TypedSets,
    pi_clamp: f64,
    restart: usize,
    start: FactorParams,
) -> RestartResult {
    let mut record = RestartRecord::new(restart_stream_name(restart));
    let mut flat = Flat::from_params(&start);
    if let Err(e) = run_stage(data, config, sets, &mut flat, pi_clamp, &mut record) {
        record.failure = Some(e.to_string());
        return RestartResult {
            record,
            theta: None,
            stage_one: None,
        };
    }
    let (mut corrected, info) = correct_flat(data, &flat, config.ridge);
    record.ridge_escalations += info.ridge_escalations;
    record.skipped_corrections = info.skipped;
    let mut l = full_loglik(data, &corrected);
    if !l.is_finite() {
        // The corrected point left the domain where the likelihood is finite.
        corrected = flat.clone();
        l = record.stage_one_loglik.unwrap_or(f64::NAN);
        record.skipped_corrections = data.p1() + data.p2() + data.t();
    }
    record.loglik = Some(l);
    let dims = data.dims();
    RestartResult {
        record,
        theta: Some(corrected.to_params(dims)),
        stage_one: Some(flat.to_params(dims)),
    }
}

pub fn tsam_fit(data: &Dataset, config: &TsamConfig) -> Result<FitOutput> {
    tsam_fit_from(data, config, &[])
}

/// As [`tsam_fit`], with the first restarts starting from `starts` instead of
/// random draws.
pub fn tsam_fit_from(data: &Dataset, config: &TsamConfig, starts: &[FactorParams]) -> Result<FitOutput> {
    config.validate()?;
    validate_factor_numbers(data, config.k1, config.k2)?;
    for s in starts {
        s.check_against(data)?;
        if (s.k1(), s.k2()) != (config.k1, config.k2) {
            return Err(GmfmError::InvalidConfig("start has the wrong factor numbers".into()));
        }
    }
    let pi_clamp = config.pi_clamp.unwrap_or_else(|| default_pi_clamp(data));
    let sets = typed_index_sets(data, &config.set_rule);
    let mut warnings = Vec::new();
    let mut starts = starts.to_vec();
    if config.init == InitStrategy::AlphaPca && starts.is_empty() {
        if !data.map().is_all(FamilyKind::Gaussian) {
            return Err(GmfmError::InvalidConfig(
                "alpha-pca start requires every cell to be gaussian".into(),
            ));
        }
        starts.push(crate::evalsim::alpha_pca_fit(data.series(), config.k1, config.k2)?);
    }
    let degenerate = degenerate_lines(data);
    if degenerate > 0 {
        warnings.push(format!(
            "{degenerate} binary row/column line(s) are constant; their sub-likelihoods are flat"
        ));
    }
    let (p1, p2, t) = (data.p1(), data.p2(), data.t());
    let results = fit::run_restarts(config.restarts, |r| {
        let start = starts
            .get(r)
            .cloned()
            .unwrap_or_else(|| random_start(config.seed, r, p1, p2, t, config.k1, config.k2));
        run_restart(data, config, &sets, pi_clamp, r, start)
    });
    fit::finish(
        data,
        Algo::Tsam,
        config.k1,
        config.k2,
        config.seed,
        pi_clamp,
        results,
        Some(sets.sizes),
        warnings,
    )
}

/// Number of rows and columns whose binary cells all share one value.
fn degenerate_lines(data: &Dataset) -> usize {
    let (p1, p2, t) = (data.p1(), data.p2(), data.t());
    let constant = |cells: &mut dyn Iterator<Item = usize>| {
        let mut seen: Option<f64> = None;
        let mut any = false;
        for idx in cells {
            if !data.is_observed(idx) || !data.family(idx).is_binary() {
                continue;
            }
            any = true;
            let x = data.value(idx);
            match seen {
                None => seen = Some(x),
                Some(v) if v != x => return false,
                _ => {}
            }
        }
        any
    };
    let rows = (0..p1)
        .filter(|&i| constant(&mut (0..t).flat_map(|tt| (0..p2).map(move |j| (tt * p1 + i) * p2 + j))))
        .count();
    let cols = (0..p2)
        .filter(|&j| constant(&mut (0..t).flat_map(|tt| (0..p1).map(move |i| (tt * p1 + i) * p2 + j))))
        .count();
    rows + cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{natural_params, row_block, total_loglik, FamilyBlock, FamilyMap, MatrixSeries};
    use crate::rng::stream;
    use rand::Rng;

    fn rank_one_gaussian(p1: usize, p2: usize, t: usize) -> (Dataset, FactorParams) {
        let mut rng = stream(1, "test/tsam/rank1");
        let r = DMatrix::from_fn(p1, 1, |_, _| rng.random_range(0.5..1.5));
        let c = DMatrix::from_fn(p2, 1, |_, _| rng.random_range(0.5..1.5));
        let f: Vec<_> = (0..t).map(|_| DMatrix::from_element(1, 1, rng.random_range(-2.0..2.0))).collect();
        let theta = FactorParams::new(r, c, f).unwrap();
        let data = Dataset::new(
            MatrixSeries::from_slices(&natural_params(&theta)).unwrap(),
            FamilyMap::uniform(FamilyKind::Gaussian),
        )
        .unwrap();
        (data, theta)
    }

    fn sampled(theta: &FactorParams, map: FamilyMap, seed: u64) -> Dataset {
        let mut rng = stream(seed, "test/tsam/data");
        let fams = map.resolve(theta.p1(), theta.p2(), theta.t()).unwrap();
        let mut values = Vec::new();
        let mut n = 0;
        for pi in natural_params(theta) {
            for i in 0..theta.p1() {
                for j in 0..theta.p2() {
                    values.push(families::sample_cell(fams[n], pi[(i, j)], &mut rng));
                    n += 1;
                }
            }
        }
        Dataset::new(MatrixSeries::new(theta.p1(), theta.p2(), theta.t(), values).unwrap(), map).unwrap()
    }

    #[test]
    fn uniform_map_sets_are_full() {
        let (data, _) = rank_one_gaussian(4, 3, 5);
        let sets = typed_index_sets(&data, &SetRule::Modal);
        assert!(sets.sizes.columns.iter().all(|&n| n == 4 * 5));
        assert!(sets.sizes.rows.iter().all(|&n| n == 3 * 5));
        assert!(sets.columns.iter().all(|f| *f == Some(FamilyKind::Gaussian)));
    }

    #[test]
    fn quadrant_slice_sets_match_counts() {
        let (p1, p2, t) = (5, 7, 2);
        let map = FamilyMap {
            default: FamilyKind::Gaussian,
            blocks: vec![
                FamilyBlock { rows: [1, 2], cols: [4, 7], slices: [1, 2], family: FamilyKind::Poisson },
                FamilyBlock { rows: [3, 5], cols: [1, 3], slices: [1, 2], family: FamilyKind::Poisson },
                FamilyBlock { rows: [3, 5], cols: [4, 7], slices: [1, 2], family: FamilyKind::Logit },
            ],
        };
        let series = MatrixSeries::new(p1, p2, t, vec![0.0; p1 * p2 * t]).unwrap();
        let data = Dataset::new(series, map).unwrap();
        let sets = typed_index_sets(&data, &SetRule::Modal);
        let fams = data.families();
        for tt in 0..t {
            let mut counts = [0usize; 5];
            for n in 0..p1 * p2 {
                counts[family_slot(fams[tt * p1 * p2 + n])] += 1;
            }
            assert_eq!(sets.sizes.slices[tt], *counts.iter().max().unwrap());
            assert_eq!(sets.slices[tt], Some(FamilyKind::Poisson));
        }
        // Column 1 mixes 2 gaussian rows and 3 poisson rows.
        assert_eq!(sets.columns[0], Some(FamilyKind::Poisson));
        assert_eq!(sets.sizes.columns[0], 3 * t);
        let prio = typed_index_sets(&data, &SetRule::Priority(vec![FamilyKind::Gaussian]));
        assert_eq!(prio.columns[0], Some(FamilyKind::Gaussian));
        assert_eq!(prio.columns[6], Some(FamilyKind::Logit));
        let all = typed_index_sets(&data, &SetRule::All);
        assert!(all.columns.iter().all(|c| c.is_none()));
    }

    #[test]
    fn modal_ties_follow_family_order() {
        let mut counts = [0usize; 5];
        counts[family_slot(FamilyKind::Poisson)] = 4;
        counts[family_slot(FamilyKind::Gaussian)] = 4;
        assert_eq!(pick(&counts, &SetRule::Modal), Some(FamilyKind::Gaussian));
        assert_eq!("priority:poisson,logit".parse::<SetRule>().unwrap(), SetRule::Priority(vec![FamilyKind::Poisson, FamilyKind::Logit]));
    }

    #[test]
    fn noiseless_rank_one_is_recovered() {
        let (data, theta) = rank_one_gaussian(6, 5, 8);
        let cfg = TsamConfig { restarts: 2, tol: 1e-12, max_outer: 500, ..TsamConfig::new(1, 1) };
        let out = tsam_fit(&data, &cfg).unwrap();
        let want = natural_params(&theta);
        let got = natural_params(&out.theta);
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).amax() < 1e-6, "{}", (a - b).amax());
        }
    }

    #[test]
    fn stationary_start_is_unchanged() {
        let (data, theta) = rank_one_gaussian(4, 4, 3);
        let sets = typed_index_sets(&data, &SetRule::Modal);
        let cfg = TsamConfig { max_outer: 1, ..TsamConfig::new(1, 1) };
        let (out, _) = alternating_stage(&data, &cfg, &theta, &sets).unwrap();
        assert!((&out.r - &theta.r).amax() < 1e-12);
        assert!((&out.c - &theta.c).amax() < 1e-12);
        let (corr, info) = one_step_correction(&data, &theta, 1e-8).unwrap();
        assert_eq!(info.skipped, 0);
        assert!((&corr.r - &theta.r).amax() < 1e-12);
    }

    #[test]
    fn gaussian_correction_is_least_squares_block_solve() {
        let mut rng = stream(3, "test/tsam/ls");
        let theta = random_start(3, 0, 5, 4, 6, 2, 2);
        let values: Vec<f64> = (0..5 * 4 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = Dataset::new(MatrixSeries::new(5, 4, 6, values).unwrap(), FamilyMap::uniform(FamilyKind::Gaussian)).unwrap();
        let (corr, _) = one_step_correction(&data, &theta, 1e-8).unwrap();
        // Closed-form LS for row 2: (sum z z')^{-1} sum x z with z = F_t c_j.
        let i = 2;
        let mut a = DMatrix::zeros(2, 2);
        let mut b = DVector::zeros(2);
        for t in 0..6 {
            for j in 0..4 {
                let z = &theta.f[t] * theta.c.row(j).transpose();
                a += &z * z.transpose();
                b += &z * data.series().get(i, j, t);
            }
        }
        let want = a.lu().solve(&b).unwrap();
        for k in 0..2 {
            assert!((corr.r[(i, k)] - want[k]).abs() < 1e-9);
        }
        // Corrections are taken from the same point: the row step does not
        // see the corrected columns.
        let rb = row_block(&data, &theta, i).unwrap();
        assert!(rb.score.amax() > 1e-6);
    }

    #[test]
    fn logit_stage_one_is_audited() {
        let theta = random_start(5, 0, 12, 10, 15, 1, 1);
        let data = sampled(&theta, FamilyMap::uniform(FamilyKind::Logit), 5);
        let cfg = TsamConfig { restarts: 1, seed: 9, ..TsamConfig::new(1, 1) };
        let out = tsam_fit(&data, &cfg).unwrap();
        let rec = out.report.best();
        assert_eq!(rec.monotone_violations, 0, "{:?}", rec.trajectory);
        assert!(rec.trajectory.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()));
        let recomputed = total_loglik(&data, &out.theta).unwrap();
        assert!((recomputed - out.report.loglik).abs() <= 1e-8 * recomputed.abs().max(1.0));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let theta = random_start(6, 0, 8, 7, 10, 2, 1);
        let data = sampled(&theta, FamilyMap::uniform(FamilyKind::Poisson), 6);
        let cfg = TsamConfig { restarts: 2, seed: 4, ..TsamConfig::new(2, 1) };
        let a = tsam_fit(&data, &cfg).unwrap();
        let b = tsam_fit(&data, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn poisson_fit_reports_clamp_and_bounds() {
        let theta = random_start(7, 0, 8, 6, 10, 1, 1);
        let data = sampled(&theta, FamilyMap::uniform(FamilyKind::Poisson), 7);
        let out = tsam_fit(&data, &TsamConfig { restarts: 1, ..TsamConfig::new(1, 1) }).unwrap();
        assert_eq!(out.report.pi_clamp, 8.0);
        let note = &out.report.curvature_bounds[0];
        assert!(note.domain_restricted);
        assert!((note.b_u - 8f64.exp()).abs() < 1e-9);
        assert!(out.report.residuals_after.satisfied(1e-10));
    }

    #[test]
    fn alpha_pca_start_needs_gaussian_data() {
        let theta = random_start(8, 0, 6, 6, 5, 1, 1);
        let data = sampled(&theta, FamilyMap::uniform(FamilyKind::Poisson), 8);
        let cfg = TsamConfig { init: InitStrategy::AlphaPca, ..TsamConfig::new(1, 1) };
        assert!(matches!(tsam_fit(&data, &cfg), Err(GmfmError::InvalidConfig(_))));
    }

    #[test]
    fn constant_binary_column_is_flagged() {
        let theta = random_start(9, 0, 6, 5, 8, 1, 1);
        let mut data = sampled(&theta, FamilyMap::uniform(FamilyKind::Logit), 9);
        let mut values = data.series().values().to_vec();
        for t in 0..8 {
            for i in 0..6 {
                values[(t * 6 + i) * 5] = 0.0;
            }
        }
        data = Dataset::new(MatrixSeries::new(6, 5, 8, values).unwrap(), FamilyMap::uniform(FamilyKind::Logit)).unwrap();
        let out = tsam_fit(&data, &TsamConfig { restarts: 1, ..TsamConfig::new(1, 1) }).unwrap();
        assert!(out.report.warnings.iter().any(|w| w.contains("constant")));
        assert!(out.report.loglik.is_finite());
    }
}
