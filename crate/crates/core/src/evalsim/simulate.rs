//! Synthetic designs.
//!
//! Cases 1-6 draw loadings iid U(0,1) and factors from the AR(1) recursion
//! `f_t = 0.2 f_{t-1} + 0.2 e_t` (after a burn-in). DGPs 1-3 use k1 = k2 = 1
//! with iid standard normal factors. The drawn loadings are rescaled to
//! `R'R / p1 = I` and `C'C / p2 = I` before the data are generated; the
//! returned truth is then put in the identified parameterisation used by
//! fits, which leaves every natural parameter unchanged.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GmfmError, Result};
use crate::families::{self, FamilyKind};
use crate::linalg::sym_inv_sqrt;
use crate::model::{natural_params, Dataset, FactorParams, FamilyBlock, FamilyMap, MatrixSeries};
use crate::normalize::normalize;
use crate::rng::stream;

/// AR(1) burn-in before the first kept factor.
pub const BURN_IN: usize = 100;
pub const AR_COEF: f64 = 0.2;
pub const AR_INNOVATION_SCALE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimCase {
    Case1,
    Case2,
    Case3,
    Case4,
    Case5,
    Case6,
    Dgp1,
    Dgp2,
    Dgp3,
}

impl SimCase {
    pub const ALL: [SimCase; 9] = [
        SimCase::Case1,
        SimCase::Case2,
        SimCase::Case3,
        SimCase::Case4,
        SimCase::Case5,
        SimCase::Case6,
        SimCase::Dgp1,
        SimCase::Dgp2,
        SimCase::Dgp3,
    ];

    /// True factor numbers (k1, k2).
    pub fn factor_numbers(&self) -> (usize, usize) {
        match self {
            SimCase::Case1 => (2, 2),
            SimCase::Case2 => (1, 3),
            SimCase::Case3 => (3, 3),
            SimCase::Case4 => (4, 4),
            SimCase::Case5 => (5, 5),
            SimCase::Case6 => (6, 6),
            SimCase::Dgp1 | SimCase::Dgp2 | SimCase::Dgp3 => (1, 1),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SimCase::Case1 => "case1",
            SimCase::Case2 => "case2",
            SimCase::Case3 => "case3",
            SimCase::Case4 => "case4",
            SimCase::Case5 => "case5",
            SimCase::Case6 => "case6",
            SimCase::Dgp1 => "dgp1",
            SimCase::Dgp2 => "dgp2",
            SimCase::Dgp3 => "dgp3",
        }
    }

    fn is_dgp(&self) -> bool {
        matches!(self, SimCase::Dgp1 | SimCase::Dgp2 | SimCase::Dgp3)
    }

    /// Family layout over a p1 x p2 x T array.
    pub fn family_map(&self, p1: usize, p2: usize, t: usize) -> FamilyMap {
        let (h1, h2) = (p1 / 2, p2 / 2);
        let block = |rows: [usize; 2], cols: [usize; 2], family| FamilyBlock {
            rows,
            cols,
            slices: [1, t],
            family,
        };
        match self {
            SimCase::Case1 | SimCase::Case2 => FamilyMap::uniform(FamilyKind::Gaussian),
            SimCase::Case3 => FamilyMap::uniform(FamilyKind::Poisson),
            SimCase::Case4 => FamilyMap {
                default: FamilyKind::Poisson,
                blocks: vec![block([1, p1], [h2 + 1, p2], FamilyKind::Logit)],
            },
            SimCase::Case5 => FamilyMap {
                default: FamilyKind::Gaussian,
                blocks: vec![block([1, p1], [h2 + 1, p2], FamilyKind::Poisson)],
            },
            SimCase::Case6 => FamilyMap {
                default: FamilyKind::Gaussian,
                blocks: vec![
                    block([1, h1], [h2 + 1, p2], FamilyKind::Poisson),
                    block([h1 + 1, p1], [1, h2], FamilyKind::Poisson),
                    block([h1 + 1, p1], [h2 + 1, p2], FamilyKind::Logit),
                ],
            },
            SimCase::Dgp1 => FamilyMap::uniform(FamilyKind::Logit),
            SimCase::Dgp2 => FamilyMap::uniform(FamilyKind::Probit),
            SimCase::Dgp3 => {
                let (a, b) = (p2 / 3, 2 * p2 / 3);
                FamilyMap {
                    default: FamilyKind::Gaussian,
                    blocks: vec![
                        block([1, p1], [a + 1, b], FamilyKind::Logit),
                        block([1, p1], [b + 1, p2], FamilyKind::Probit),
                    ],
                }
            }
        }
    }
}

impl fmt::Display for SimCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimCase {
    type Err = GmfmError;

    /// Accepts "1".."6", "case1".."case6" and "dgp1".."dgp3".
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let key = match lower.as_str() {
            "1" | "2" | "3" | "4" | "5" | "6" => format!("case{lower}"),
            _ => lower,
        };
        SimCase::ALL
            .into_iter()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| GmfmError::InvalidConfig(format!("unknown simulation case {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub case: SimCase,
    pub p1: usize,
    pub p2: usize,
    pub t: usize,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn new(case: SimCase, p1: usize, p2: usize, t: usize, seed: u64) -> Self {
        SimulationSpec { case, p1, p2, t, seed }
    }
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub spec: SimulationSpec,
    pub data: Dataset,
    /// Normalised true parameters.
    pub truth: FactorParams,
    /// Per-column noise standard deviations (Case 2 only).
    pub column_scales: Option<Vec<f64>>,
}

fn ar1_factors(seed: u64, t: usize, k1: usize, k2: usize) -> Vec<DMatrix<f64>> {
    let mut rng = stream(seed, "sim/factors");
    let mut f = DMatrix::zeros(k1, k2);
    let mut out = Vec::with_capacity(t);
    for step in 0..BURN_IN + t {
        let eps = DMatrix::from_fn(k1, k2, |_, _| rng.sample::<f64, _>(StandardNormal));
        f = &f * AR_COEF + eps * AR_INNOVATION_SCALE;
        if step >= BURN_IN {
            out.push(f.clone());
        }
    }
    out
}

fn iid_factors(seed: u64, t: usize, k1: usize, k2: usize) -> Vec<DMatrix<f64>> {
    let mut rng = stream(seed, "sim/factors");
    (0..t)
        .map(|_| DMatrix::from_fn(k1, k2, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// `a (a'a / n)^{-1/2}`, so that the result has `a'a / n = I`.
fn standardize_loadings(a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    let gram = a.transpose() * &a / n;
    &a * sym_inv_sqrt(&gram, 0.0)
}

/// Draws the true parameters of a case (normalised).
pub fn simulate_truth(spec: &SimulationSpec) -> Result<FactorParams> {
    let (k1, k2) = spec.case.factor_numbers();
    if spec.p1 < 2 || spec.p2 < 2 || spec.t < 1 || spec.p1 < k1 || spec.p2 < k2 {
        return Err(GmfmError::InvalidConfig(format!(
            "{} needs p1 >= {}, p2 >= {} (and p1, p2 >= 2, T >= 1); got p1={}, p2={}, T={}",
            spec.case,
            k1.max(2),
            k2.max(2),
            spec.p1,
            spec.p2,
            spec.t
        )));
    }
    let mut rng = stream(spec.seed, "sim/loadings");
    let r = standardize_loadings(DMatrix::from_fn(spec.p1, k1, |_, _| rng.random::<f64>()));
    let c = standardize_loadings(DMatrix::from_fn(spec.p2, k2, |_, _| rng.random::<f64>()));
    let f = if spec.case.is_dgp() {
        iid_factors(spec.seed, spec.t, k1, k2)
    } else {
        ar1_factors(spec.seed, spec.t, k1, k2)
    };
    normalize(&FactorParams::new(r, c, f)?)
}

pub fn simulate_case(spec: &SimulationSpec) -> Result<Simulated> {
    let truth = simulate_truth(spec)?;
    let (p1, p2, t) = (spec.p1, spec.p2, spec.t);
    let map = spec.case.family_map(p1, p2, t);
    let fams = map.resolve(p1, p2, t)?;
    let column_scales = (spec.case == SimCase::Case2).then(|| {
        let mut rng = stream(spec.seed, "sim/column-scales");
        (0..p2).map(|_| 0.1 + 2.0 * rng.random::<f64>()).collect::<Vec<f64>>()
    });
    let mut rng = stream(spec.seed, "sim/cells");
    let mut values = Vec::with_capacity(p1 * p2 * t);
    for (tt, pi) in natural_params(&truth).iter().enumerate() {
        for i in 0..p1 {
            for j in 0..p2 {
                let idx = (tt * p1 + i) * p2 + j;
                let v = match &column_scales {
                    Some(s) => families::sample_gaussian_scaled(pi[(i, j)], s[j], &mut rng),
                    None => families::sample_cell(fams[idx], pi[(i, j)], &mut rng),
                };
                values.push(v);
            }
        }
    }
    let data = Dataset::new(MatrixSeries::new(p1, p2, t, values)?, map)?;
    Ok(Simulated {
        spec: *spec,
        data,
        truth,
        column_scales,
    })
}
