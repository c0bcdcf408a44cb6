//! Multinomial probit with iid `N(0, pi^2/6)` errors via the GHK simulator.
//!
//! Errors are differenced against the target alternative, giving a
//! `(m - 1)`-dimensional normal vector with covariance `(pi^2/6)(I + 11')`.
//! Its Cholesky factor turns the orthant probability into a product of
//! univariate truncations sampled recursively.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evd::{std_normal_cdf, std_normal_quantile_fast, EV_VARIANCE};
use crate::kernel::{bits, UtilityVector};
use crate::rng::{open_unit, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhkConfig {
    pub draws: usize,
    pub seed: u64,
    /// Pair every uniform vector `u` with `1 - u`.
    pub antithetic: bool,
    /// Rescale simulated probabilities to sum to one per situation.
    pub renormalize: bool,
}

impl Default for GhkConfig {
    fn default() -> Self {
        Self {
            draws: 500,
            seed: 0,
            antithetic: true,
            renormalize: true,
        }
    }
}

impl GhkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws < 100 {
            return Err(Error::domain(format!(
                "GHK needs at least 100 draws, got {}",
                self.draws
            )));
        }
        Ok(())
    }
}

/// Lower Cholesky factor of `(pi^2/6)(I + 11')` in dimension `d`.
fn difference_cholesky(d: usize) -> DMatrix<f64> {
    let cov = DMatrix::from_fn(d, d, |i, k| EV_VARIANCE * if i == k { 2.0 } else { 1.0 });
    cov.cholesky()
        .expect("I + 11' is positive definite")
        .l()
}

/// Uniform draws shared by every alternative of one situation.
struct Uniforms {
    rows: usize,
    dim: usize,
    u: Vec<f64>,
}

impl Uniforms {
    fn new(cfg: &GhkConfig, dim: usize, stream_id: u64) -> Self {
        let mut rng = stream(cfg.seed, stream_id);
        let rows = cfg.draws;
        let mut u = vec![0.0; rows * dim];
        if cfg.antithetic {
            let half = rows.div_ceil(2);
            for r in 0..half {
                for t in 0..dim {
                    let x = open_unit(&mut rng);
                    u[r * dim + t] = x;
                    if half + r < rows {
                        u[(half + r) * dim + t] = 1.0 - x;
                    }
                }
            }
        } else {
            for x in &mut u {
                *x = open_unit(&mut rng as &mut dyn RngCore);
            }
        }
        Self { rows, dim, u }
    }
}

fn ghk_one(v: &[f64], avail: u64, j: usize, chol: &DMatrix<f64>, uni: &Uniforms) -> f64 {
    let others: Vec<usize> = bits(avail & !(1u64 << j)).collect();
    let d = others.len();
    debug_assert_eq!(d, uni.dim);
    let bounds: Vec<f64> = others.iter().map(|&k| v[j] - v[k]).collect();
    let mut z = vec![0.0; d];
    let mut total = 0.0;
    for r in 0..uni.rows {
        let row = &uni.u[r * d..(r + 1) * d];
        let mut weight = 1.0;
        for t in 0..d {
            let mut partial = 0.0;
            for s in 0..t {
                partial += chol[(t, s)] * z[s];
            }
            let c = (bounds[t] - partial) / chol[(t, t)];
            let p = std_normal_cdf(c);
            weight *= p;
            if weight == 0.0 {
                break;
            }
            // keep the draw strictly inside the truncation region
            let q = (row[t] * p).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            z[t] = std_normal_quantile_fast(q).min(c);
        }
        total += weight;
    }
    total / uni.rows as f64
}

/// GHK probabilities for every alternative of one situation, with uniforms
/// drawn from stream `stream_id` of `cfg.seed`.
pub fn probs_norm_stream(v: &UtilityVector, cfg: &GhkConfig, stream_id: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = v.n_available();
    let mut out = vec![0.0; v.len()];
    if m == 1 {
        out[v.available_indices()[0]] = 1.0;
        return Ok(out);
    }
    let chol = difference_cholesky(m - 1);
    let uni = Uniforms::new(cfg, m - 1, stream_id);
    for j in bits(v.mask()) {
        out[j] = ghk_one(v.values(), v.mask(), j, &chol, &uni);
    }
    if cfg.renormalize {
        let total: f64 = out.iter().sum();
        if total > 0.0 {
            out.iter_mut().for_each(|p| *p /= total);
        }
    }
    Ok(out)
}

/// GHK probability of `j` for one situation identified by `stream_id`.
pub fn prob_norm_stream(v: &UtilityVector, j: usize, cfg: &GhkConfig, stream_id: u64) -> Result<f64> {
    if !v.is_available(j) {
        return Err(Error::domain(format!("alternative {j} is not available")));
    }
    if cfg.renormalize {
        return Ok(probs_norm_stream(v, cfg, stream_id)?[j]);
    }
    cfg.validate()?;
    let m = v.n_available();
    if m == 1 {
        return Ok(1.0);
    }
    let chol = difference_cholesky(m - 1);
    let uni = Uniforms::new(cfg, m - 1, stream_id);
    Ok(ghk_one(v.values(), v.mask(), j, &chol, &uni))
}

/// GHK probability of `j`.
pub fn prob_norm(v: &UtilityVector, j: usize, cfg: &GhkConfig) -> Result<f64> {
    prob_norm_stream(v, j, cfg, 0)
}

/// GHK probabilities of every alternative.
pub fn probs_norm(v: &UtilityVector, cfg: &GhkConfig) -> Result<Vec<f64>> {
    probs_norm_stream(v, cfg, 0)
}

/// Reusable per-dimension Cholesky factors for batch likelihood evaluation.
#[derive(Debug, Default)]
pub(crate) struct GhkCache {
    factors: Vec<Option<DMatrix<f64>>>,
}

impl GhkCache {
    fn factor(&mut self, d: usize) -> &DMatrix<f64> {
        if self.factors.len() <= d {
            self.factors.resize(d + 1, None);
        }
        self.factors[d].get_or_insert_with(|| difference_cholesky(d))
    }

    /// Simulated probability of the chosen alternative `c`.
    pub(crate) fn chosen(&mut self, v: &[f64], avail: u64, c: usize, cfg: &GhkConfig, stream_id: u64) -> f64 {
        let m = avail.count_ones() as usize;
        if m == 1 {
            return 1.0;
        }
        let uni = Uniforms::new(cfg, m - 1, stream_id);
        let chol = self.factor(m - 1).clone();
        if cfg.renormalize {
            let mut total = 0.0;
            let mut pc = 0.0;
            for j in bits(avail) {
                let p = ghk_one(v, avail, j, &chol, &uni);
                total += p;
                if j == c {
                    pc = p;
                }
            }
            if total > 0.0 {
                pc / total
            } else {
                0.0
            }
        } else {
            ghk_one(v, avail, c, &chol, &uni)
        }
    }
}
