//! Standard normal and logistic helpers with stable tails.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// ln(sqrt(2 pi))
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Beyond this |x| the normal tail goes through the Mills-ratio continued fraction.
const TAIL_SWITCH: f64 = 6.0;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Mills ratio (1 - Phi(z)) / phi(z) for z >= TAIL_SWITCH, by backward
/// evaluation of the continued fraction 1/(z+1/(z+2/(z+3/(z+...)))).
fn mills_ratio_tail(z: f64) -> f64 {
    let mut acc = z;
    for k in (1..=80).rev() {
        acc = z + k as f64 / acc;
    }
    1.0 / acc
}

/// ln Phi(x).
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x >= -TAIL_SWITCH {
        norm_cdf(x).ln()
    } else {
        ln_norm_pdf(x) + mills_ratio_tail(-x).ln()
    }
}

/// Inverse Mills ratio phi(x) / Phi(x).
pub fn inv_mills(x: f64) -> f64 {
    if x >= -TAIL_SWITCH {
        norm_pdf(x) / norm_cdf(x)
    } else {
        1.0 / mills_ratio_tail(-x)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x)
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// sigmoid(x) * (1 - sigmoid(x)) without cancellation.
pub fn logistic_variance(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

pub fn ln_factorial(k: f64) -> f64 {
    libm::lgamma(k + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tail_branch_is_continuous_at_switch() {
        let below = ln_norm_pdf(-6.0) + mills_ratio_tail(6.0).ln();
        let above = norm_cdf(-6.0).ln();
        assert_relative_eq!(below, above, max_relative = 1e-12);
        assert_relative_eq!(
            1.0 / mills_ratio_tail(6.0),
            norm_pdf(-6.0) / norm_cdf(-6.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn deep_tail_matches_asymptotic_series() {
        // ln Phi(-40) = ln phi(40) - ln 40 + ln(1 - 1/40^2 + 3/40^4 - ...)
        let z: f64 = 40.0;
        let series = 1.0 - 1.0 / z.powi(2) + 3.0 / z.powi(4) - 15.0 / z.powi(6);
        let expect = ln_norm_pdf(z) - z.ln() + series.ln();
        assert_relative_eq!(ln_norm_cdf(-40.0), expect, max_relative = 1e-12);
        assert!(ln_norm_cdf(-40.0).is_finite());
    }

    #[test]
    fn logistic_pieces() {
        assert_relative_eq!(sigmoid(0.0), 0.5);
        assert_relative_eq!(softplus(0.0), std::f64::consts::LN_2);
        assert_relative_eq!(softplus(800.0), 800.0);
        assert_relative_eq!(logistic_variance(0.0), 0.25);
        assert_relative_eq!(ln_factorial(4.0), 24f64.ln(), max_relative = 1e-13);
    }
}
