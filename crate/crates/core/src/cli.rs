//! Command-line front end.
//!
//! Exit codes: 0 success, 2 input or usage error, 3 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{GmfmError, Result};
use crate::evalsim::{
    ccor, rolling_validate, run_bench, simulate_case, BenchConfig, Estimator, RollingConfig, SimCase,
    SimulationSpec, BENCH_HEADER,
};
use crate::fit::{Algo, FitOutput, InitStrategy};
use crate::inference::all_variances;
use crate::io::{self, FitFile, TruthFile};
use crate::mm::{mm_fit, MmConfig};
use crate::model::total_loglik;
use crate::normalize::{constraint_residuals, ConstraintResidual};
use crate::selection::{select_factor_numbers, SelectionGrid};
use crate::tsam::{tsam_fit, SetRule, TsamConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gmfm", version, about = "Generalized matrix factor models for mixed-type matrix sequences")]
pub struct Cli {
    /// Worker threads for restarts, grid cells and repetitions.
    #[arg(long, global = true, env = "GMFM_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit loadings and factors for given factor numbers.
    Fit(FitArgs),
    /// Choose the factor numbers over a grid.
    Select(SelectArgs),
    /// Write a simulated data bundle with its ground truth.
    Simulate(SimulateArgs),
    /// Monte Carlo comparison against the linear baseline.
    Bench(BenchArgs),
    /// Rolling out-of-period reconstruction scores.
    Validate(ValidateArgs),
    /// Summarise a fit file, optionally against data and truth.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// tsam or mm.
    #[arg(long, default_value = "tsam")]
    pub algo: Algo,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative log-likelihood change (tsam) or absolute gain (mm) that ends
    /// the outer loop.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Bound on |pi| during updates.
    #[arg(long)]
    pub pi_clamp: Option<f64>,
    /// Type-set rule for the alternating stage: modal, all or
    /// priority:<family>,<family>,...
    #[arg(long, default_value = "modal")]
    pub set_rule: SetRule,
    /// random or alpha-pca.
    #[arg(long, default_value = "random")]
    pub init: InitStrategy,
    /// Run the inner least-squares step of mm to stationarity.
    #[arg(long)]
    pub inner_exact: bool,
}

impl SolverArgs {
    pub fn estimator(&self, k1: usize, k2: usize) -> Estimator {
        match self.algo {
            Algo::Tsam => {
                let mut c = TsamConfig::new(k1, k2);
                c.restarts = self.restarts;
                c.seed = self.seed;
                c.pi_clamp = self.pi_clamp;
                c.set_rule = self.set_rule.clone();
                c.init = self.init;
                if let Some(t) = self.tol {
                    c.tol = t;
                }
                if let Some(m) = self.max_outer {
                    c.max_outer = m;
                }
                Estimator::Tsam(c)
            }
            Algo::Mm => {
                let mut c = MmConfig::new(k1, k2);
                c.restarts = self.restarts;
                c.seed = self.seed;
                c.pi_clamp = self.pi_clamp;
                c.init = self.init;
                c.inner_exact = self.inner_exact;
                if let Some(t) = self.tol {
                    c.error_tol = t;
                }
                if let Some(m) = self.max_outer {
                    c.max_outer = m;
                }
                Estimator::Mm(c)
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k1: usize,
    #[arg(long)]
    pub k2: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Add sandwich variance blocks for every loading and factor.
    #[arg(long)]
    pub with_se: bool,
    #[arg(long, default_value = "fit.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub l1_max: usize,
    #[arg(long, default_value_t = 8)]
    pub l2_max: usize,
    /// Start each grid cell from its neighbour's solution.
    #[arg(long)]
    pub warm_grid: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value = "criterion.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// 1-6 or dgp1-dgp3.
    #[arg(long)]
    pub case: SimCase,
    #[arg(long)]
    pub p1: usize,
    #[arg(long)]
    pub p2: usize,
    #[arg(long = "T")]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub cases: Vec<SimCase>,
    #[arg(long, default_value_t = 20)]
    pub p1: usize,
    #[arg(long, default_value_t = 20)]
    pub p2: usize,
    #[arg(long = "T", default_value_t = 30)]
    pub t: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Any of gmfm, gmfm-mm, alpha-pca.
    #[arg(long, value_delimiter = ',', default_value = "gmfm,alpha-pca")]
    pub methods: Vec<String>,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Preceding periods used to fit the loadings.
    #[arg(long)]
    pub window: usize,
    /// Slices per period.
    #[arg(long, default_value_t = 4)]
    pub period_len: usize,
    /// Sets both factor numbers.
    #[arg(long, conflicts_with_all = ["k1", "k2"])]
    pub k: Option<usize>,
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub k2: Option<usize>,
    /// Use the alpha-PCA baseline instead of the likelihood fit.
    #[arg(long)]
    pub baseline: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Bundle to recompute the log-likelihood on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// truth.json to compare the loadings with.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub k1: usize,
    pub k2: usize,
    pub loglik: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglik_recomputed: Option<f64>,
    #[serde(rename = "ccorR", skip_serializing_if = "Option::is_none")]
    pub ccor_r: Option<f64>,
    #[serde(rename = "ccorC", skip_serializing_if = "Option::is_none")]
    pub ccor_c: Option<f64>,
    pub residuals: ConstraintResidual,
    pub warnings: Vec<String>,
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn fit_with(data: &crate::model::Dataset, est: &Estimator) -> Result<FitOutput> {
    match est {
        Estimator::Tsam(c) => tsam_fit(data, c),
        Estimator::Mm(c) => mm_fit(data, c),
        Estimator::AlphaPca { .. } => unreachable!("solver arguments never name the baseline"),
    }
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let bundle = io::read_bundle(&a.data)?;
    let out = fit_with(&bundle.data, &a.solver.estimator(a.k1, a.k2))?;
    let variances = if a.with_se {
        Some(all_variances(&bundle.data, &out.theta)?)
    } else {
        None
    };
    warn_all(&out.report.warnings);
    let file = FitFile::new(&out.theta, out.report, variances.as_ref());
    io::write_json(&a.out, &file)?;
    println!(
        "loglik={:.6} iterations={} best_restart={} residual={:.3e}",
        file.report.loglik,
        file.report.total_iterations(),
        file.report.best_restart + 1,
        file.report.residuals_after.max_residual()
    );
    Ok(())
}

fn cmd_select(a: &SelectArgs) -> Result<()> {
    let bundle = io::read_bundle(&a.data)?;
    let grid = SelectionGrid {
        l1_max: a.l1_max,
        l2_max: a.l2_max,
        warm: a.warm_grid,
    };
    let s = select_factor_numbers(&bundle.data, &grid, &a.solver.estimator(1, 1))?;
    warn_all(&s.warnings);
    io::write_criterion_csv(&a.out, &s.table)?;
    println!("k1={} k2={}", s.k1, s.k2);
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let sim = simulate_case(&SimulationSpec::new(a.case, a.p1, a.p2, a.t, a.seed))?;
    io::write_simulated(&a.out, &sim)?;
    println!("wrote {} ({} cells)", a.out.display(), sim.data.n_observed());
    Ok(())
}

fn bench_method(name: &str, restarts: usize) -> Result<Estimator> {
    match name {
        "gmfm" | "tsam" => Ok(Estimator::Tsam(TsamConfig {
            restarts,
            ..TsamConfig::new(1, 1)
        })),
        "gmfm-mm" | "mm" => Ok(Estimator::Mm(MmConfig {
            restarts,
            ..MmConfig::new(1, 1)
        })),
        "alpha-pca" => Ok(Estimator::AlphaPca { k1: 1, k2: 1 }),
        other => Err(GmfmError::InvalidConfig(format!(
            "unknown method {other:?}; expected gmfm, gmfm-mm or alpha-pca"
        ))),
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| bench_method(m, a.restarts))
        .collect::<Result<Vec<_>>>()?;
    let config = BenchConfig {
        cases: a.cases.clone(),
        dims: vec![(a.p1, a.p2, a.t)],
        reps: a.reps,
        seed: a.seed,
        methods,
    };
    let rows = run_bench(&config)?;
    let mut text = String::from(BENCH_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    io::write_output(a.out.as_ref(), &text)
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let bundle = io::read_bundle(&a.data)?;
    let (k1, k2) = match (a.k, a.k1, a.k2) {
        (Some(k), _, _) => (k, k),
        (None, Some(k1), Some(k2)) => (k1, k2),
        _ => {
            return Err(GmfmError::InvalidConfig(
                "give either --k or both --k1 and --k2".into(),
            ))
        }
    };
    let est = if a.baseline {
        Estimator::AlphaPca { k1, k2 }
    } else {
        a.solver.estimator(k1, k2)
    };
    let config = RollingConfig {
        window: a.window,
        period_len: a.period_len,
    };
    let res = rolling_validate(&bundle.data, &config, &est)?;
    let text = serde_json::to_string_pretty(&res).expect("rolling result serialises");
    io::write_output(a.out.as_ref(), &(text + "\n"))
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let file: FitFile = io::read_json(&a.fit)?;
    let theta = file.theta()?;
    let loglik_recomputed = match &a.data {
        Some(dir) => Some(total_loglik(&io::read_bundle(dir)?.data, &theta)?),
        None => None,
    };
    let (ccor_r, ccor_c) = match &a.truth {
        Some(path) => {
            let truth: TruthFile = io::read_json(path)?;
            let truth = truth.params.to_params()?;
            (Some(ccor(&theta.r, &truth.r)?), Some(ccor(&theta.c, &truth.c)?))
        }
        None => (None, None),
    };
    let summary = ReportSummary {
        k1: file.k1,
        k2: file.k2,
        loglik: file.report.loglik,
        loglik_recomputed,
        ccor_r,
        ccor_c,
        residuals: constraint_residuals(&theta),
        warnings: file.report.warnings.clone(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("report serialises");
    io::write_output(a.out.as_ref(), &(text + "\n"))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Exit code for an error.
pub fn exit_code(err: &GmfmError) -> i32 {
    if err.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_NUMERICAL
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_INPUT;
        }
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(p) => p.install(|| dispatch(&cli)),
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_NUMERICAL;
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
