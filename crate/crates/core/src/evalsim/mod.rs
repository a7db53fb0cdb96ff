//! Evaluation metrics, simulation designs, the linear baseline, rolling
//! validation and the benchmark grid.

mod alpha_pca;
mod bench;
mod metrics;
mod rolling;
mod simulate;

pub use alpha_pca::alpha_pca_fit;
pub use bench::{run_bench, BenchConfig, BenchRow, BENCH_HEADER};
pub use metrics::{ccor, subspace_ccor};
pub use rolling::{period_scores, rolling_validate, PeriodScore, RollingConfig, RollingResult};
pub use simulate::{simulate_case, simulate_truth, SimCase, Simulated, SimulationSpec};

use crate::error::Result;
use crate::mm::{mm_fit, MmConfig};
use crate::model::{Dataset, FactorParams};
use crate::rng::derive_seed;
use crate::tsam::{tsam_fit, TsamConfig};

/// A way of estimating loadings and factors.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    Tsam(TsamConfig),
    Mm(MmConfig),
    AlphaPca { k1: usize, k2: usize },
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Tsam(_) => "gmfm",
            Estimator::Mm(_) => "gmfm-mm",
            Estimator::AlphaPca { .. } => "alpha-pca",
        }
    }

    pub fn factor_numbers(&self) -> (usize, usize) {
        match self {
            Estimator::Tsam(c) => (c.k1, c.k2),
            Estimator::Mm(c) => (c.k1, c.k2),
            Estimator::AlphaPca { k1, k2 } => (*k1, *k2),
        }
    }

    /// Same estimator with other factor numbers.
    pub fn with_factor_numbers(&self, k1: usize, k2: usize) -> Estimator {
        match self {
            Estimator::Tsam(c) => Estimator::Tsam(TsamConfig { k1, k2, ..c.clone() }),
            Estimator::Mm(c) => Estimator::Mm(MmConfig { k1, k2, ..c.clone() }),
            Estimator::AlphaPca { .. } => Estimator::AlphaPca { k1, k2 },
        }
    }

    /// Same estimator with another seed (no effect on the baseline).
    pub fn with_seed(&self, seed: u64) -> Estimator {
        match self {
            Estimator::Tsam(c) => Estimator::Tsam(TsamConfig { seed, ..c.clone() }),
            Estimator::Mm(c) => Estimator::Mm(MmConfig { seed, ..c.clone() }),
            other => other.clone(),
        }
    }

    pub fn fit(&self, data: &Dataset) -> Result<FactorParams> {
        match self {
            Estimator::Tsam(c) => tsam_fit(data, c).map(|o| o.theta),
            Estimator::Mm(c) => mm_fit(data, c).map(|o| o.theta),
            Estimator::AlphaPca { k1, k2 } => alpha_pca_fit(data.series(), *k1, *k2),
        }
    }
}

/// Seed of Monte Carlo repetition `rep` under `seed`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, &format!("rep/{rep}"))
}
