//! Per-cell likelihood families.
//!
//! Each family supplies the log-density of one observation given its natural
//! parameter `pi`, the first two derivatives in `pi`, an upper bound on the
//! curvature `-d2` over a clamped `pi` domain, and a sampler.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GmfmError, Result};
use crate::special::{
    inv_mills, ln_factorial, ln_norm_cdf, logistic_variance, norm_cdf, norm_pdf, sigmoid, softplus,
};

/// Likelihood family of a cell. None of them carries a free parameter;
/// `Gaussian` is the unit-variance quasi-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Poisson,
    Logit,
    Probit,
    Tobit,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 5] = [
        FamilyKind::Gaussian,
        FamilyKind::Poisson,
        FamilyKind::Logit,
        FamilyKind::Probit,
        FamilyKind::Tobit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Logit => "logit",
            FamilyKind::Probit => "probit",
            FamilyKind::Tobit => "tobit",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, FamilyKind::Logit | FamilyKind::Probit)
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyKind {
    type Err = GmfmError;

    fn from_str(s: &str) -> Result<Self> {
        FamilyKind::ALL
            .into_iter()
            .find(|f| f.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| GmfmError::InvalidConfig(format!("unknown family '{s}'")))
    }
}

/// Log-likelihood of one cell and its first two derivatives in `pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDerivatives {
    pub loglik: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn in_support(family: FamilyKind, x: f64) -> bool {
    if !x.is_finite() {
        return false;
    }
    match family {
        FamilyKind::Gaussian => true,
        FamilyKind::Poisson => x >= 0.0 && x.fract() == 0.0,
        FamilyKind::Logit | FamilyKind::Probit => x == 0.0 || x == 1.0,
        FamilyKind::Tobit => x >= 0.0,
    }
}

fn validate(family: FamilyKind, x: f64, pi: f64) -> Result<()> {
    if !pi.is_finite() {
        return Err(GmfmError::NonFinite(format!("natural parameter {pi}")));
    }
    if !in_support(family, x) {
        return Err(GmfmError::Domain {
            family,
            x,
            cell: None,
        });
    }
    Ok(())
}

pub fn loglik_cell(family: FamilyKind, x: f64, pi: f64) -> Result<f64> {
    validate(family, x, pi)?;
    Ok(loglik_unchecked(family, x, pi))
}

pub fn derivatives_cell(family: FamilyKind, x: f64, pi: f64) -> Result<CellDerivatives> {
    validate(family, x, pi)?;
    Ok(derivatives_unchecked(family, x, pi))
}

/// Log-likelihood without support checks; callers guarantee `x` is valid.
pub(crate) fn loglik_unchecked(family: FamilyKind, x: f64, pi: f64) -> f64 {
    match family {
        FamilyKind::Gaussian => -0.5 * (x - pi) * (x - pi),
        FamilyKind::Poisson => -pi.exp() + x * pi - ln_factorial(x),
        FamilyKind::Logit => x * pi - softplus(pi),
        FamilyKind::Probit => {
            if x > 0.5 {
                ln_norm_cdf(pi)
            } else {
                ln_norm_cdf(-pi)
            }
        }
        FamilyKind::Tobit => {
            if x > 0.0 {
                -0.5 * (x - pi) * (x - pi)
            } else {
                ln_norm_cdf(-pi)
            }
        }
    }
}

/// Derivatives of the censored/binary normal branch `ln Phi(s * pi)` in `pi`.
fn ln_phi_branch(pi: f64, sign: f64) -> CellDerivatives {
    let z = sign * pi;
    let m = inv_mills(z);
    CellDerivatives {
        loglik: ln_norm_cdf(z),
        d1: sign * m,
        d2: -m * (z + m),
    }
}

pub(crate) fn derivatives_unchecked(family: FamilyKind, x: f64, pi: f64) -> CellDerivatives {
    match family {
        FamilyKind::Gaussian => CellDerivatives {
            loglik: -0.5 * (x - pi) * (x - pi),
            d1: x - pi,
            d2: -1.0,
        },
        FamilyKind::Poisson => {
            let rate = pi.exp();
            CellDerivatives {
                loglik: -rate + x * pi - ln_factorial(x),
                d1: x - rate,
                d2: -rate,
            }
        }
        FamilyKind::Logit => CellDerivatives {
            loglik: x * pi - softplus(pi),
            d1: x - sigmoid(pi),
            d2: -logistic_variance(pi),
        },
        FamilyKind::Probit => {
            if x > 0.5 {
                ln_phi_branch(pi, 1.0)
            } else {
                ln_phi_branch(pi, -1.0)
            }
        }
        FamilyKind::Tobit => {
            if x > 0.0 {
                CellDerivatives {
                    loglik: -0.5 * (x - pi) * (x - pi),
                    d1: x - pi,
                    d2: -1.0,
                }
            } else {
                ln_phi_branch(pi, -1.0)
            }
        }
    }
}

/// Grid spacing used to bound the censored-branch curvature of the Tobit family.
const TOBIT_GRID_STEP: f64 = 1e-3;

/// Upper bound `b_U` on `-d2(x, pi)` over all valid `x` and `|pi| <= pi_bound`.
pub fn curvature_bound(family: FamilyKind, pi_bound: f64) -> Result<f64> {
    if !(pi_bound.is_finite() && pi_bound > 0.0) {
        return Err(GmfmError::InvalidConfig(format!(
            "pi bound must be positive and finite, got {pi_bound}"
        )));
    }
    Ok(match family {
        FamilyKind::Gaussian => 1.0,
        FamilyKind::Logit => 0.25,
        FamilyKind::Probit => 1.0,
        FamilyKind::Poisson => pi_bound.exp(),
        FamilyKind::Tobit => {
            // Uncensored cells contribute exactly 1; the censored branch is
            // maximised on a grid.
            let steps = (2.0 * pi_bound / TOBIT_GRID_STEP).ceil() as usize;
            (0..=steps)
                .map(|s| (-pi_bound + s as f64 * TOBIT_GRID_STEP).min(pi_bound))
                .map(|pi| -ln_phi_branch(pi, -1.0).d2)
                .fold(1.0, f64::max)
        }
    })
}

/// Mean of the observation given `pi`; used to reconstruct data.
pub fn family_mean(family: FamilyKind, pi: f64) -> f64 {
    match family {
        FamilyKind::Gaussian => pi,
        FamilyKind::Poisson => pi.exp(),
        FamilyKind::Logit => sigmoid(pi),
        FamilyKind::Probit => norm_cdf(pi),
        FamilyKind::Tobit => pi * norm_cdf(pi) + norm_pdf(pi),
    }
}

/// Draws one observation from the family given `pi`.
pub fn sample_cell<R: Rng + ?Sized>(family: FamilyKind, pi: f64, rng: &mut R) -> f64 {
    match family {
        FamilyKind::Gaussian => pi + rng.sample::<f64, _>(StandardNormal),
        FamilyKind::Poisson => {
            let rate = pi.exp();
            if rate <= 0.0 {
                0.0
            } else {
                Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0)
            }
        }
        FamilyKind::Logit => f64::from(u8::from(rng.random::<f64>() < sigmoid(pi))),
        FamilyKind::Probit => f64::from(u8::from(rng.random::<f64>() < norm_cdf(pi))),
        FamilyKind::Tobit => (pi + rng.sample::<f64, _>(StandardNormal)).max(0.0),
    }
}

/// Gaussian draw with standard deviation `scale` (heteroscedastic designs).
pub fn sample_gaussian_scaled<R: Rng + ?Sized>(pi: f64, scale: f64, rng: &mut R) -> f64 {
    pi + scale * rng.sample::<f64, _>(StandardNormal)
}
