//! Monte Carlo comparison grid over cases, dimensions and repetitions.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::derive_seed;
use crate::tsam::TsamConfig;

use super::{ccor, simulate_case, Estimator, SimCase, SimulationSpec};

pub const BENCH_HEADER: &str = "case,p1,p2,T,rep,method,ccorR,ccorC,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub cases: Vec<SimCase>,
    /// (p1, p2, T) triples.
    pub dims: Vec<(usize, usize, usize)>,
    pub reps: usize,
    pub seed: u64,
    /// Estimators to run; factor numbers are replaced by each case's truth.
    pub methods: Vec<Estimator>,
}

impl BenchConfig {
    /// TSAM against the alpha-PCA baseline.
    pub fn standard(cases: Vec<SimCase>, dims: Vec<(usize, usize, usize)>, reps: usize, seed: u64) -> Self {
        BenchConfig {
            cases,
            dims,
            reps,
            seed,
            methods: vec![
                Estimator::Tsam(TsamConfig::new(1, 1)),
                Estimator::AlphaPca { k1: 1, k2: 1 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: SimCase,
    pub p1: usize,
    pub p2: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub rep: usize,
    pub method: String,
    #[serde(rename = "ccorR")]
    pub ccor_r: f64,
    #[serde(rename = "ccorC")]
    pub ccor_c: f64,
    pub seconds: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6}",
            self.case.as_str(),
            self.p1,
            self.p2,
            self.t,
            self.rep + 1,
            self.method,
            self.ccor_r,
            self.ccor_c,
            self.seconds
        )
    }
}

/// Seed of one repetition of one design cell.
pub fn design_seed(seed: u64, case: SimCase, dims: (usize, usize, usize), rep: usize) -> u64 {
    derive_seed(
        seed,
        &format!("bench/{}/{}x{}x{}/rep/{rep}", case.as_str(), dims.0, dims.1, dims.2),
    )
}

fn one_rep(config: &BenchConfig, case: SimCase, dims: (usize, usize, usize), rep: usize) -> Result<Vec<BenchRow>> {
    let seed = design_seed(config.seed, case, dims, rep);
    let sim = simulate_case(&SimulationSpec::new(case, dims.0, dims.1, dims.2, seed))?;
    let (k1, k2) = case.factor_numbers();
    config
        .methods
        .iter()
        .map(|m| {
            let est = m.with_factor_numbers(k1, k2).with_seed(derive_seed(seed, "fit"));
            let start = Instant::now();
            let fit = est.fit(&sim.data)?;
            let seconds = start.elapsed().as_secs_f64();
            Ok(BenchRow {
                case,
                p1: dims.0,
                p2: dims.1,
                t: dims.2,
                rep,
                method: est.name().to_string(),
                ccor_r: ccor(&fit.r, &sim.truth.r)?,
                ccor_c: ccor(&fit.c, &sim.truth.c)?,
                seconds,
            })
        })
        .collect()
}

/// Runs the grid; repetitions run in parallel, rows come back ordered by
/// case, dimensions, repetition and method.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    let jobs: Vec<(SimCase, (usize, usize, usize), usize)> = config
        .cases
        .iter()
        .flat_map(|&c| config.dims.iter().flat_map(move |&d| (0..config.reps).map(move |r| (c, d, r))))
        .collect();
    let rows: Vec<Result<Vec<BenchRow>>> = jobs
        .par_iter()
        .map(|&(c, d, r)| one_rep(config, c, d, r))
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}
