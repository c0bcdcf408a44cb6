//! Model comparison: information criteria, the Vuong test and the
//! Hausman-McFadden IIA test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::estimation::{chi2_critical, chi2_sf, fit, inverse_hessian, FitOptions, FitResult};
use crate::evd::std_normal_cdf;
use crate::kernel::ErrorFamily;

/// One-sided 5% critical value of the standard normal.
pub const Z_ONE_SIDED_5: f64 = 1.644_853_626_951_472_2;

/// Per-observation variance below which the Vuong statistic is degenerate.
const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VuongDecision {
    /// The first model fits significantly better.
    FavorFirst,
    /// The second model fits significantly better.
    FavorSecond,
    Indistinguishable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VuongReport {
    pub first: String,
    pub second: String,
    /// `nll_first - nll_second`; negative favours the first model.
    pub lr: f64,
    /// Standardized statistic; zero when degenerate.
    pub statistic: f64,
    pub degenerate: bool,
    pub decision_5pct: VuongDecision,
    /// Two-sided p-value of the statistic.
    pub p_value: f64,
    #[serde(skip)]
    pub per_obs_diffs: Vec<f64>,
}

fn same_data(a: &FitResult, b: &FitResult) -> Result<()> {
    if a.fingerprint != b.fingerprint || a.n != b.n {
        return Err(Error::domain("fits were computed on different datasets"));
    }
    Ok(())
}

/// Vuong test of `first` against `second`.
///
/// With `d_i = ln P_second,i - ln P_first,i`, the statistic is
/// `sum d_i / sqrt(sum (d_i - LR/n)^2)`. Negative values favour `first`.
pub fn vuong(first: &FitResult, second: &FitResult) -> Result<VuongReport> {
    same_data(first, second)?;
    if first.n_params() != second.n_params() || first.rho_hat.is_some() != second.rho_hat.is_some() {
        return Err(Error::domain("Vuong test needs models with equal parameter counts"));
    }
    if first.loglik.len() != first.n || second.loglik.len() != second.n {
        return Err(Error::domain("fits carry no per-observation log-likelihoods"));
    }
    let diffs: Vec<f64> = first
        .loglik
        .iter()
        .zip(&second.loglik)
        .map(|(a, b)| b - a)
        .collect();
    let n = diffs.len() as f64;
    let lr: f64 = diffs.iter().sum();
    let centre = lr / n;
    let ss: f64 = diffs.iter().map(|d| (d - centre) * (d - centre)).sum();
    let degenerate = ss / n < DEGENERATE_VARIANCE;
    let statistic = if degenerate { 0.0 } else { lr / ss.sqrt() };
    let decision_5pct = if degenerate {
        VuongDecision::Indistinguishable
    } else if statistic < -Z_ONE_SIDED_5 {
        VuongDecision::FavorFirst
    } else if statistic > Z_ONE_SIDED_5 {
        VuongDecision::FavorSecond
    } else {
        VuongDecision::Indistinguishable
    };
    Ok(VuongReport {
        first: first.family.to_string(),
        second: second.family.to_string(),
        lr,
        statistic,
        degenerate,
        decision_5pct,
        p_value: 2.0 * std_normal_cdf(-statistic.abs()),
        per_obs_diffs: diffs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcRow {
    pub family: String,
    pub nll: f64,
    pub aic: f64,
    pub bic: f64,
    /// 1 for the smallest AIC.
    pub rank: usize,
}

/// Information criteria ranked by ascending AIC (ties keep input order).
pub fn ic_table(fits: &[FitResult]) -> Result<Vec<IcRow>> {
    let Some(first) = fits.first() else {
        return Ok(Vec::new());
    };
    for f in &fits[1..] {
        same_data(first, f)?;
    }
    let mut rows: Vec<IcRow> = fits
        .iter()
        .map(|f| IcRow {
            family: f.family.to_string(),
            nll: f.nll,
            aic: f.aic(),
            bic: f.bic(),
            rank: 0,
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].aic.total_cmp(&rows[b].aic));
    for (r, &i) in order.iter().enumerate() {
        rows[i].rank = r + 1;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HausmanReport {
    pub wald: f64,
    pub dof: usize,
    pub p_value: f64,
    pub critical_5pct: f64,
    pub reject_5pct: bool,
    pub beta_full: Vec<f64>,
    pub beta_subset: Vec<f64>,
    pub n_full: usize,
    pub n_subset: usize,
    /// Eigenvalues of `V_subset - V_full` below -1e-8.
    pub negative_eigenvalues: Vec<f64>,
    /// True when the variance difference was not positive definite.
    pub pseudoinverse: bool,
}

/// Hausman-McFadden test of IIA for a LEVI model.
///
/// The full sample is compared with the situations that chose inside
/// `subset`, refitted with choice sets cut down to `subset`. Both variances
/// are inverse observed information matrices.
pub fn hausman_mcfadden(design: &DesignMatrix, subset: u64, opts: &FitOptions) -> Result<HausmanReport> {
    let j = design.n_alternatives();
    if j < 3 {
        return Err(Error::domain("the IIA test needs at least three alternatives"));
    }
    let all = if j == 64 { u64::MAX } else { (1u64 << j) - 1 };
    let subset = subset & all;
    if subset.count_ones() < 2 || subset == all {
        return Err(Error::domain("subset must hold at least two but not all alternatives"));
    }
    let fit_opts = FitOptions {
        compute_vcov: false,
        ..opts.clone()
    };
    let full = fit(design, ErrorFamily::Levi, &fit_opts)?;
    let restricted = design.restrict_to(subset)?;
    if restricted.n() <= design.n_params() {
        return Err(Error::Identification {
            message: format!("only {} situations chose inside the subset", restricted.n()),
            columns: Vec::new(),
        });
    }
    let sub = fit(&restricted, ErrorFamily::Levi, &fit_opts)?;
    if !full.converged || !sub.converged {
        return Err(Error::NonConvergence {
            iterations: full.iterations.max(sub.iterations),
            residual: full.gradient_norm.max(sub.gradient_norm),
        });
    }
    let v_full = inverse_hessian(design, &full)?;
    let v_sub = inverse_hessian(&restricted, &sub)?;
    let diff = &v_sub - &v_full;
    let diff = (&diff + diff.transpose()) * 0.5;
    let d = DVector::from_column_slice(&sub.beta_hat) - DVector::from_column_slice(&full.beta_hat);

    let eig = diff.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = top * 1e-10 * diff.nrows() as f64;
    let negative_eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().filter(|&x| x < -1e-8).collect();
    let pd = eig.eigenvalues.iter().all(|&x| x > tol);
    // positive part of the spectrum; directions with zero or negative
    // variance difference carry no information
    let mut pinv = DMatrix::zeros(diff.nrows(), diff.ncols());
    let mut dof = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tol {
            let u = eig.eigenvectors.column(k);
            pinv += (u * u.transpose()) / lam;
            dof += 1;
        }
    }
    let wald = (d.transpose() * pinv * &d)[(0, 0)].max(0.0);
    let critical_5pct = chi2_critical(0.05, dof);
    Ok(HausmanReport {
        wald,
        dof,
        p_value: chi2_sf(wald, dof),
        critical_5pct,
        reject_5pct: dof > 0 && wald > critical_5pct,
        beta_full: full.beta_hat,
        beta_subset: sub.beta_hat,
        n_full: design.n(),
        n_subset: restricted.n(),
        negative_eigenvalues,
        pseudoinverse: !pd,
    })
}
