//! Extreme-value, logistic and normal primitives.
//!
//! The standard smallest extreme value type I (SEVI) law has
//! `F(a) = 1 - exp(-exp(a))`; the largest extreme value type I (LEVI, Gumbel)
//! law is its mirror image. Both have variance `pi^2 / 6` and means `-gamma`
//! and `+gamma` respectively.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::error::{Error, Result};
use crate::rng::open_unit;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Variance shared by the standard SEVI and LEVI laws.
pub const EV_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;

// exp(a) is clamped here; beyond it the CDF is exactly 0 or 1.
const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Evd {
    Sevi,
    Levi,
    Logistic,
    Normal { variance: f64 },
}

impl Evd {
    /// Normal law with the extreme-value variance `pi^2 / 6`.
    pub fn matched_normal() -> Self {
        Evd::Normal {
            variance: EV_VARIANCE,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Evd::Sevi => -EULER_GAMMA,
            Evd::Levi => EULER_GAMMA,
            Evd::Logistic | Evd::Normal { .. } => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Evd::Sevi | Evd::Levi => EV_VARIANCE,
            Evd::Logistic => std::f64::consts::PI * std::f64::consts::PI / 3.0,
            Evd::Normal { variance } => *variance,
        }
    }

    pub fn cdf(&self, a: f64) -> Result<f64> {
        if !a.is_finite() {
            return Err(Error::domain(format!("cdf argument must be finite, got {a}")));
        }
        Ok(match self {
            Evd::Sevi => sevi_cdf(a),
            Evd::Levi => 1.0 - sevi_cdf(-a),
            Evd::Logistic => logistic_cdf(a),
            Evd::Normal { variance } => std_normal_cdf(a / variance.sqrt()),
        })
    }

    pub fn pdf(&self, a: f64) -> Result<f64> {
        if !a.is_finite() {
            return Err(Error::domain(format!("pdf argument must be finite, got {a}")));
        }
        Ok(match self {
            Evd::Sevi => sevi_pdf(a),
            Evd::Levi => sevi_pdf(-a),
            Evd::Logistic => {
                let e = (-a.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Evd::Normal { variance } => {
                let sd = variance.sqrt();
                let z = a / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
        })
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("quantile needs p in (0, 1), got {p}")));
        }
        Ok(match self {
            // ln(-ln(1 - p)), with ln(1 - p) taken through ln_1p
            Evd::Sevi => (-(-p).ln_1p()).ln(),
            Evd::Levi => -(-p.ln()).ln(),
            Evd::Logistic => (p / (1.0 - p)).ln(),
            Evd::Normal { variance } => variance.sqrt() * std_normal_quantile(p),
        })
    }

    /// One inverse-CDF draw.
    #[inline]
    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open_unit(rng);
        match self {
            Evd::Sevi => (-(-u).ln_1p()).ln(),
            Evd::Levi => -(-u.ln()).ln(),
            Evd::Logistic => (u / (1.0 - u)).ln(),
            Evd::Normal { variance } => variance.sqrt() * std_normal_quantile(u),
        }
    }

    /// `n` inverse-CDF draws from `rng`.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

#[inline]
fn sevi_cdf(a: f64) -> f64 {
    if a > EXP_CLAMP.ln() {
        // exp(a) would exceed the clamp
        return 1.0;
    }
    -(-a.exp()).exp_m1()
}

#[inline]
fn sevi_pdf(a: f64) -> f64 {
    let e = a.min(EXP_CLAMP).exp();
    (a - e).exp()
}

#[inline]
fn logistic_cdf(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, polished by one Newton step on the CDF.
pub fn std_normal_quantile(p: f64) -> f64 {
    let x = std_normal_quantile_fast(p);
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if density > 0.0 && x.is_finite() {
        x - (std_normal_cdf(x) - p) / density
    } else {
        x
    }
}

/// Standard normal quantile straight from `erfc_inv` (about 1e-11 relative
/// accuracy); used inside the GHK recursion.
#[inline]
pub fn std_normal_quantile_fast(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}
