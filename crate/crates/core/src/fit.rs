//! Pieces shared by the fitting algorithms: reports, initialisation and the
//! final restart selection.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmfmError, Result};
use crate::families::{self, FamilyKind};
use crate::model::{total_loglik, Dataset, FactorParams};
use crate::normalize::{constraint_residuals, normalize_detailed, ConstraintResidual};
use crate::rng::stream;

/// Default bound on |pi| when a Poisson cell takes part in the fit.
pub const POISSON_PI_CLAMP: f64 = 8.0;
/// Default bound on |pi| otherwise.
pub const DEFAULT_PI_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Tsam,
    Mm,
}

impl Algo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Tsam => "tsam",
            Algo::Mm => "mm",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = GmfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsam" => Ok(Algo::Tsam),
            "mm" => Ok(Algo::Mm),
            other => Err(GmfmError::InvalidConfig(format!(
                "unknown algorithm {other:?}; expected tsam or mm"
            ))),
        }
    }
}

/// How the starting values of each restart are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Entries iid uniform on [-1, 1].
    #[default]
    Random,
    /// The first restart starts from the linear alpha-PCA estimate; the
    /// others are random. Only allowed when every cell is Gaussian.
    AlphaPca,
}

impl std::str::FromStr for InitStrategy {
    type Err = GmfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(InitStrategy::Random),
            "alpha-pca" => Ok(InitStrategy::AlphaPca),
            other => Err(GmfmError::InvalidConfig(format!(
                "unknown initialisation {other:?}; expected random or alpha-pca"
            ))),
        }
    }
}

/// Per-restart bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    /// Name of the random stream that produced the start.
    pub stream: String,
    /// Final log-likelihood of this restart, `None` if it failed.
    pub loglik: Option<f64>,
    /// Log-likelihood at the end of the alternating stage (two-stage fits).
    pub stage_one_loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<String>,
    /// Full log-likelihood after every outer iteration.
    pub trajectory: Vec<f64>,
    /// Outer iterations whose log-likelihood fell below the previous one.
    pub monotone_violations: usize,
    pub clamp_hits: usize,
    pub ridge_escalations: usize,
    /// Blocks whose one-step correction was skipped (singular Hessian).
    pub skipped_corrections: usize,
}

impl RestartRecord {
    pub(crate) fn new(stream: String) -> Self {
        RestartRecord {
            stream,
            loglik: None,
            stage_one_loglik: None,
            iterations: 0,
            converged: false,
            failure: None,
            trajectory: Vec::new(),
            monotone_violations: 0,
            clamp_hits: 0,
            ridge_escalations: 0,
            skipped_corrections: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureNote {
    pub family: FamilyKind,
    pub b_u: f64,
    /// True when the bound only holds on the clamped domain |pi| <= pi_clamp.
    pub domain_restricted: bool,
}

/// Sizes of the single-type index sets used by the alternating stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizes {
    pub rule: String,
    pub columns: Vec<usize>,
    pub rows: Vec<usize>,
    pub slices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub algo: Algo,
    pub k1: usize,
    pub k2: usize,
    pub n_observed: usize,
    pub seed: u64,
    pub pi_clamp: f64,
    pub restarts: Vec<RestartRecord>,
    pub best_restart: usize,
    /// Log-likelihood of the returned (normalised) parameters.
    pub loglik: f64,
    pub residuals_before: ConstraintResidual,
    pub residuals_after: ConstraintResidual,
    pub curvature_bounds: Vec<CurvatureNote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_sizes: Option<SetSizes>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn best(&self) -> &RestartRecord {
        &self.restarts[self.best_restart]
    }

    pub fn total_iterations(&self) -> usize {
        self.restarts.iter().map(|r| r.iterations).sum()
    }
}

/// Fitted parameters with their report.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub theta: FactorParams,
    pub report: FitReport,
    /// Normalised end-of-stage-one estimate of the best restart (two-stage
    /// fits only).
    pub stage_one: Option<FactorParams>,
}

pub(crate) fn validate_factor_numbers(data: &Dataset, k1: usize, k2: usize) -> Result<()> {
    if k1 == 0 || k2 == 0 {
        return Err(GmfmError::InvalidConfig("k1 and k2 must be at least 1".into()));
    }
    if k1 > data.p1() || k2 > data.p2() {
        return Err(GmfmError::InvalidConfig(format!(
            "factor numbers ({k1}, {k2}) exceed the dimensions ({}, {})",
            data.p1(),
            data.p2()
        )));
    }
    Ok(())
}

pub(crate) fn default_pi_clamp(data: &Dataset) -> f64 {
    if data.map().contains_family(FamilyKind::Poisson) {
        POISSON_PI_CLAMP
    } else {
        DEFAULT_PI_CLAMP
    }
}

pub(crate) fn families_present(data: &Dataset) -> Vec<FamilyKind> {
    FamilyKind::ALL
        .into_iter()
        .filter(|f| data.families().contains(f))
        .collect()
}

pub(crate) fn curvature_notes(data: &Dataset, pi_clamp: f64) -> Result<Vec<CurvatureNote>> {
    families_present(data)
        .into_iter()
        .map(|family| {
            Ok(CurvatureNote {
                family,
                b_u: families::curvature_bound(family, pi_clamp)?,
                domain_restricted: matches!(family, FamilyKind::Poisson | FamilyKind::Tobit),
            })
        })
        .collect()
}

pub fn restart_stream_name(restart: usize) -> String {
    format!("restart/{restart}")
}

/// Random start with entries iid uniform on [-1, 1].
pub fn random_start(seed: u64, restart: usize, p1: usize, p2: usize, t: usize, k1: usize, k2: usize) -> FactorParams {
    let mut rng = stream(seed, &restart_stream_name(restart));
    let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0));
    let r = m(p1, k1);
    let c = m(p2, k2);
    let f = (0..t).map(|_| m(k1, k2)).collect();
    FactorParams { r, c, f }
}

/// Restart record together with its raw (unnormalised) parameters.
pub(crate) struct RestartResult {
    pub record: RestartRecord,
    pub theta: Option<FactorParams>,
    pub stage_one: Option<FactorParams>,
}

/// Picks the restart with the largest likelihood and normalises it.
pub(crate) fn finish(
    data: &Dataset,
    algo: Algo,
    k1: usize,
    k2: usize,
    seed: u64,
    pi_clamp: f64,
    results: Vec<RestartResult>,
    set_sizes: Option<SetSizes>,
    mut warnings: Vec<String>,
) -> Result<FitOutput> {
    let best = results
        .iter()
        .enumerate()
        .filter_map(|(n, r)| r.record.loglik.filter(|l| l.is_finite()).map(|l| (n, l)))
        // First restart wins exact ties.
        .fold(None, |acc: Option<(usize, f64)>, (n, l)| match acc {
            Some((_, bl)) if bl >= l => acc,
            _ => Some((n, l)),
        });
    let records: Vec<RestartRecord> = results.iter().map(|r| r.record.clone()).collect();
    let Some((best, _)) = best else {
        let reasons: Vec<String> = records
            .iter()
            .map(|r| format!("{}: {}", r.stream, r.failure.as_deref().unwrap_or("no likelihood")))
            .collect();
        return Err(GmfmError::FitFailed(format!(
            "all {} restarts failed ({})",
            records.len(),
            reasons.join("; ")
        )));
    };
    let mut results = results;
    let raw = results[best].theta.take().expect("successful restart keeps parameters");
    let residuals_before = constraint_residuals(&raw);
    let normalized = normalize_detailed(&raw)?;
    if normalized.eigen_tie {
        warnings.push("tied factor variances: normalising rotation is not unique".into());
    }
    let stage_one = match results[best].stage_one.take() {
        Some(s) => normalize_detailed(&s).ok().map(|n| n.theta),
        None => None,
    };
    let theta = normalized.theta;
    let loglik = total_loglik(data, &theta)?;
    for r in &records {
        if r.monotone_violations > 0 && algo == Algo::Mm {
            warnings.push(format!(
                "{}: log-likelihood decreased in {} iteration(s)",
                r.stream, r.monotone_violations
            ));
        }
    }
    if records[best].clamp_hits > 0 {
        warnings.push(format!(
            "{}: {} step(s) limited by the |pi| <= {pi_clamp} clamp",
            records[best].stream, records[best].clamp_hits
        ));
    }
    if !records[best].converged {
        warnings.push(format!(
            "{}: stopped at the iteration cap before converging",
            records[best].stream
        ));
    }
    let report = FitReport {
        algo,
        k1,
        k2,
        n_observed: data.n_observed(),
        seed,
        pi_clamp,
        residuals_before,
        residuals_after: constraint_residuals(&theta),
        curvature_bounds: curvature_notes(data, pi_clamp)?,
        restarts: records,
        best_restart: best,
        loglik,
        set_sizes,
        warnings,
    };
    Ok(FitOutput {
        theta,
        report,
        stage_one,
    })
}

/// Runs `f` over restarts, in parallel on the current rayon pool; results
/// come back in restart order.
pub(crate) fn run_restarts<F>(n: usize, f: F) -> Vec<RestartResult>
where
    F: Fn(usize) -> RestartResult + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}
