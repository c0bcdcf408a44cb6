//! Surplus functions, compensating variation, average partial effects and
//! share inversion.
//!
//! Surpluses are normalized so that `W(0) = 0`; their gradient is the
//! choice-probability vector. Expected maxima of the raw errors are
//! available separately through [`raw_expected_max`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::accum::NeumaierSum;
use crate::error::{Error, Result};
use crate::evd::EULER_GAMMA;
use crate::kernel::{self, bits, ErrorFamily, TruncationPolicy, UtilityVector};
use crate::subset::gosper;

/// What changes between the baseline and the counterfactual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// The price of `alt` rises by `delta` currency units.
    PriceChange { alt: usize, delta: f64 },
    /// Alternative `alt` is removed from the choice set.
    Removal { alt: usize },
}

/// Utility rows, marginal utility of income and a counterfactual.
#[derive(Debug, Clone)]
pub struct WelfareQuery {
    pub rows: Vec<UtilityVector>,
    pub lambda: f64,
    pub scenario: Scenario,
}

fn unsupported(op: &'static str, family: ErrorFamily) -> Error {
    Error::UnsupportedFamily {
        op,
        family: family.to_string(),
    }
}

/// Log-sum-exp over the available entries of `v`, scaled by `sign`.
fn lse(v: &UtilityVector, sign: f64) -> f64 {
    let max = bits(v.mask())
        .map(|k| sign * v.values()[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = bits(v.mask()).map(|k| (sign * v.values()[k] - max).exp()).sum();
    max + s.ln()
}

/// Surplus `W(v)`, normalized to `W(0) = 0`.
///
/// SEVI: `sum_l (-1)^l sum_{|S| = l} ln[(1/l) sum_{k in S} exp(-v_k)]`.
/// LEVI: `ln[(1/m) sum_k exp(v_k)]` over the `m` available alternatives.
pub fn surplus(v: &UtilityVector, family: ErrorFamily) -> Result<f64> {
    family.validate()?;
    match family {
        ErrorFamily::Levi => Ok(lse(v, 1.0) - (v.n_available() as f64).ln()),
        ErrorFamily::Sevi => Ok(surplus_sevi(v)),
        ErrorFamily::Mixed(rho) => {
            Ok(rho * surplus_sevi(v) + (1.0 - rho) * (lse(v, 1.0) - (v.n_available() as f64).ln()))
        }
        ErrorFamily::Norm => Err(unsupported("surplus", family)),
    }
}

fn surplus_sevi(v: &UtilityVector) -> f64 {
    let idx = v.available_indices();
    let vals: Vec<f64> = idx.iter().map(|&k| v.values()[k]).collect();
    let m = vals.len();
    let mut acc = NeumaierSum::new();
    for layer in 1..=m {
        let ln_l = (layer as f64).ln();
        let mut lacc = NeumaierSum::new();
        let mut mask = (1u64 << layer) - 1;
        loop {
            // ln sum exp(-v) shifted by the subset minimum
            let lo = bits(mask).map(|k| vals[k]).fold(f64::INFINITY, f64::min);
            let s: f64 = bits(mask).map(|k| (lo - vals[k]).exp()).sum();
            lacc.add(-lo + s.ln() - ln_l);
            match gosper(mask, m) {
                Some(next) => mask = next,
                None => break,
            }
        }
        let s = lacc.value();
        acc.add(if layer % 2 == 1 { -s } else { s });
    }
    acc.value()
}

/// `E[max_k eps_k]` for `n` iid standard errors.
///
/// SEVI: `-gamma + sum_{l=1}^{n} (-1)^l C(n, l) ln l`; the alternating sum
/// is replaced by an equivalent integral once cancellation would bite.
/// LEVI: `gamma + ln n`.
pub fn raw_expected_max(n: usize, family: ErrorFamily) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("expected maximum needs at least one alternative"));
    }
    family.validate()?;
    match family {
        ErrorFamily::Levi => Ok(EULER_GAMMA + (n as f64).ln()),
        ErrorFamily::Sevi => Ok(-EULER_GAMMA + alternating_log_sum(n)),
        ErrorFamily::Mixed(rho) => {
            let s = -EULER_GAMMA + alternating_log_sum(n);
            let l = EULER_GAMMA + (n as f64).ln();
            Ok(rho * s + (1.0 - rho) * l)
        }
        ErrorFamily::Norm => Err(unsupported("raw_expected_max", family)),
    }
}

/// `sum_{l=1}^{n} (-1)^l C(n, l) ln l`.
fn alternating_log_sum(n: usize) -> f64 {
    if n <= 16 {
        alternating_log_sum_direct(n)
    } else {
        alternating_log_sum_integral(n)
    }
}

fn alternating_log_sum_direct(n: usize) -> f64 {
    let mut acc = NeumaierSum::new();
    let mut c = 1.0f64;
    for l in 1..=n {
        c = c * (n + 1 - l) as f64 / l as f64;
        let term = c.round() * (l as f64).ln();
        acc.add(if l % 2 == 1 { -term } else { term });
    }
    acc.value()
}

/// Frullani's integral turns the alternating sum into
/// `int_0^inf [1 - e^{-t} - (1 - e^{-t})^n] / t dt`; with `t = e^s` the
/// integrand decays exponentially on both sides and the trapezoid rule
/// converges geometrically.
fn alternating_log_sum_integral(n: usize) -> f64 {
    let h = 1.0 / 256.0;
    let (lo, hi) = (-40.0f64, 6.0f64);
    let steps = ((hi - lo) / h).round() as usize;
    let mut acc = NeumaierSum::new();
    for i in 0..=steps {
        let s = lo + h * i as f64;
        let t = s.exp();
        let one_minus = -(-t).exp_m1();
        let g = one_minus - (n as f64 * one_minus.ln()).exp();
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        acc.add(w * g);
    }
    acc.value() * h
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!(
            "marginal utility of income must be positive, got {lambda}"
        )));
    }
    Ok(())
}

/// Compensating variation for a price rise of `delta` on `alt`, in currency.
///
/// `(1/lambda) [W(v) - W(v - e_alt * delta * lambda)]`; positive for a price
/// rise.
pub fn cv_price(v: &UtilityVector, alt: usize, delta: f64, lambda: f64, family: ErrorFamily) -> Result<f64> {
    check_lambda(lambda)?;
    if !v.is_available(alt) {
        return Err(Error::domain(format!("alternative {alt} is not available")));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    let mut shifted = v.values().to_vec();
    shifted[alt] -= delta * lambda;
    let after = UtilityVector::with_mask(shifted, v.mask())?;
    Ok((surplus(v, family)? - surplus(&after, family)?) / lambda)
}

/// Compensating variation for removing `alt`, in currency.
///
/// Equals `(1/lambda) (E max over all - E max without alt)`. The SEVI value
/// is evaluated as the alternating sum of `ln(1 + sum_{t in T} e^{v_alt - v_t})`
/// over nonempty subsets `T` of the remaining alternatives, which equals the
/// surplus-plus-constants form but never subtracts two large surpluses.
pub fn cv_removal(v: &UtilityVector, alt: usize, lambda: f64, family: ErrorFamily) -> Result<f64> {
    check_lambda(lambda)?;
    if !v.is_available(alt) {
        return Err(Error::domain(format!("alternative {alt} is not available")));
    }
    if v.n_available() < 2 {
        return Err(Error::domain("removing the only available alternative leaves an empty set"));
    }
    family.validate()?;
    let rest = v.restricted(!(1u64 << alt))?;
    let levi = || (v.values()[alt] - lse(&rest, 1.0)).exp().ln_1p() / lambda;
    match family {
        ErrorFamily::Levi => Ok(levi()),
        ErrorFamily::Sevi => Ok(removal_sevi(v, alt) / lambda),
        ErrorFamily::Mixed(rho) => Ok(rho * removal_sevi(v, alt) / lambda + (1.0 - rho) * levi()),
        ErrorFamily::Norm => Err(unsupported("cv_removal", family)),
    }
}

fn removal_sevi(v: &UtilityVector, alt: usize) -> f64 {
    let vk = v.values()[alt];
    let d: Vec<f64> = bits(v.mask() & !(1u64 << alt))
        .map(|t| vk - v.values()[t])
        .collect();
    let n = d.len();
    let mut acc = NeumaierSum::new();
    for layer in 1..=n {
        let mut lacc = NeumaierSum::new();
        let mut mask = (1u64 << layer) - 1;
        loop {
            lacc.add(log1p_sum_exp(bits(mask).map(|k| d[k])));
            match gosper(mask, n) {
                Some(next) => mask = next,
                None => break,
            }
        }
        let s = lacc.value();
        acc.add(if layer % 2 == 1 { s } else { -s });
    }
    acc.value().max(0.0)
}

/// `ln(1 + sum exp(d))`, accurate for both tiny and huge sums.
fn log1p_sum_exp(d: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = d.clone().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        d.map(f64::exp).sum::<f64>().ln_1p()
    } else {
        let s: f64 = (-max).exp() + d.map(|x| (x - max).exp()).sum::<f64>();
        max + s.ln()
    }
}

/// Averages the scenario's compensating variation over the query rows.
pub fn expected_cv(q: &WelfareQuery, family: ErrorFamily) -> Result<f64> {
    if q.rows.is_empty() {
        return Err(Error::domain("welfare query has no rows"));
    }
    let mut acc = NeumaierSum::new();
    for row in &q.rows {
        acc.add(match q.scenario {
            Scenario::PriceChange { alt, delta } => cv_price(row, alt, delta, q.lambda, family)?,
            Scenario::Removal { alt } => cv_removal(row, alt, q.lambda, family)?,
        });
    }
    Ok(acc.value() / q.rows.len() as f64)
}

/// Average partial effect of an attribute with coefficient `beta_attr` on
/// each alternative's own choice probability.
pub fn ape(
    rows: &[UtilityVector],
    family: ErrorFamily,
    beta_attr: f64,
    policy: TruncationPolicy,
) -> Result<Vec<f64>> {
    let j = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if rows.is_empty() {
        return Err(Error::domain("no rows for average partial effects"));
    }
    policy.validate()?;
    let mut acc = vec![NeumaierSum::new(); j];
    for row in rows {
        match family {
            ErrorFamily::Levi => {
                for k in row.available_indices() {
                    let p = kernel::prob_levi(row, k)?;
                    acc[k].add(p * (1.0 - p));
                }
            }
            ErrorFamily::Sevi | ErrorFamily::Mixed(_) => {
                for k in row.available_indices() {
                    acc[k].add(own_derivative(row, k, family, policy)?);
                }
            }
            ErrorFamily::Norm => return Err(unsupported("ape", family)),
        }
    }
    let n = rows.len() as f64;
    Ok(acc.iter().map(|a| a.value() / n * beta_attr).collect())
}

fn own_derivative(v: &UtilityVector, k: usize, family: ErrorFamily, policy: TruncationPolicy) -> Result<f64> {
    if policy == TruncationPolicy::Full {
        return Ok(kernel::dprob_dv(v, k, family)?[k]);
    }
    let mut g = vec![0.0; v.len()];
    kernel::chosen_with_gradient(v.values(), v.mask(), k, family, policy, &mut g);
    Ok(g[k])
}

/// Settings for [`invert_shares`].
#[derive(Debug, Clone, Copy)]
pub struct InvertOptions {
    pub max_iter: usize,
    /// Target for the largest share residual.
    pub tol: f64,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-13,
        }
    }
}

/// Utilities (last entry fixed at zero) whose choice probabilities equal
/// `target`.
///
/// Newton's method on the convex objective `W(v) - target . v` with
/// step halving, started from the logit inverse.
pub fn invert_shares(target: &[f64], family: ErrorFamily, opts: InvertOptions) -> Result<UtilityVector> {
    let j = target.len();
    if j < 2 {
        return Err(Error::domain("share inversion needs at least two alternatives"));
    }
    if target.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::domain("target shares must lie strictly between 0 and 1"));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("target shares sum to {total}, not 1")));
    }
    let start: Vec<f64> = target.iter().map(|s| (s / target[j - 1]).ln()).collect();
    match family {
        ErrorFamily::Levi => UtilityVector::new(start),
        ErrorFamily::Sevi => newton_inversion(target, start, opts),
        _ => Err(unsupported("invert_shares", family)),
    }
}

fn newton_inversion(target: &[f64], start: Vec<f64>, opts: InvertOptions) -> Result<UtilityVector> {
    let j = target.len();
    let fam = ErrorFamily::Sevi;
    let ghk = crate::probit::GhkConfig::default();
    let objective = |v: &UtilityVector| -> Result<f64> {
        let dot: f64 = v.values().iter().zip(target).map(|(a, b)| a * b).sum();
        Ok(surplus(v, fam)? - dot)
    };
    let mut v = UtilityVector::new(start)?;
    let mut f = objective(&v)?;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let p = kernel::probabilities(&v, fam, TruncationPolicy::Full, &ghk)?;
        let grad: Vec<f64> = p.iter().zip(target).map(|(p, t)| p - t).collect();
        residual = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if residual <= opts.tol {
            return Ok(v);
        }
        let jac = kernel::jacobian(&v, fam)?;
        let h = DMatrix::from_fn(j - 1, j - 1, |a, b| jac[(a, b)]);
        let g = DVector::from_fn(j - 1, |a, _| grad[a]);
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::numeric("singular Hessian in share inversion"))?,
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut cand = v.values().to_vec();
            for a in 0..j - 1 {
                cand[a] -= t * step[a];
            }
            let cv = UtilityVector::new(cand)?;
            let fc = objective(&cv)?;
            // near the optimum the decrease drops below the rounding of the
            // surplus; there a smaller share residual decides
            let accept = fc <= f
                || (fc <= f + 1e-12 * (1.0 + f.abs()) && {
                    let pc = kernel::probabilities(&cv, fam, TruncationPolicy::Full, &ghk)?;
                    pc.iter().zip(target).fold(0.0f64, |m, (p, t)| m.max((p - t).abs())) < residual
                });
            if accept {
                v = cv;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let p = kernel::probabilities(&v, fam, TruncationPolicy::Full, &ghk)?;
    residual = residual.min(p.iter().zip(target).fold(0.0f64, |m, (p, t)| m.max((p - t).abs())));
    if residual <= 1e-10 {
        return Ok(v);
    }
    Err(Error::Numeric(format!(
        "share inversion did not converge; largest share residual {residual:e}"
    )))
}
