//! Maximum likelihood estimation and variance estimators.
//!
//! Scores follow the minimization convention `S_i = d(-ln P_i)/d beta`, so
//! their column sums equal the gradient of the negative log-likelihood.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::accum::NeumaierSum;
use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::kernel::{chosen_with_gradient, ErrorFamily, TruncationPolicy, PROB_FLOOR};
use crate::optim::{minimize, BfgsOptions};
use crate::probit::{GhkCache, GhkConfig};

/// Situations per work unit. Partial sums are combined in chunk order, so
/// results do not depend on the thread count.
const CHUNK: usize = 32;

/// Cap on the logit of the mixing probability.
pub const THETA_CAP: f64 = 15.0;

/// Mixing estimates with `|theta|` above `ln 999` are reported as boundary.
const BOUNDARY_THETA: f64 = 6.906_754_778_648_554;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeKind {
    #[default]
    Plain,
    Sandwich,
    Cluster,
}

impl fmt::Display for SeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeKind::Plain => "plain",
            SeKind::Sandwich => "sandwich",
            SeKind::Cluster => "cluster",
        })
    }
}

impl FromStr for SeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(SeKind::Plain),
            "sandwich" | "robust" => Ok(SeKind::Sandwich),
            "cluster" => Ok(SeKind::Cluster),
            other => Err(Error::validation(format!(
                "unknown standard error kind '{other}' (expected plain, sandwich or cluster)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Starting coefficients; zeros when absent.
    pub start: Option<Vec<f64>>,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// SEVI truncation; chosen from the number of alternatives when absent.
    pub policy: Option<TruncationPolicy>,
    pub ghk: GhkConfig,
    pub se: SeKind,
    pub compute_vcov: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            start: None,
            max_iter: 500,
            grad_tol: 1e-6,
            policy: None,
            // the simulated likelihood uses the raw chosen-alternative GHK
            ghk: GhkConfig {
                renormalize: false,
                ..GhkConfig::default()
            },
            se: SeKind::Plain,
            compute_vcov: true,
        }
    }
}

impl FitOptions {
    fn policy_for(&self, design: &DesignMatrix) -> TruncationPolicy {
        self.policy
            .unwrap_or_else(|| TruncationPolicy::default_for(design.n_alternatives()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: ErrorFamily,
    pub columns: Vec<String>,
    pub beta_hat: Vec<f64>,
    /// Covariance of `beta_hat`; empty when it could not be computed.
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub se_kind: SeKind,
    pub nll: f64,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub rel_change: f64,
    /// Situations whose probability hit the floor inside the logarithm.
    pub floored: usize,
    pub truncation: TruncationPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghk: Option<GhkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_se: Option<f64>,
    #[serde(default)]
    pub rho_boundary: bool,
    pub fingerprint: String,
    /// Per-situation log-likelihood contributions `ln P_i`.
    #[serde(skip)]
    pub loglik: Vec<f64>,
    /// Per-situation scores, row-major `n x p` (p includes the mixing
    /// logit when it is estimated).
    #[serde(skip)]
    pub scores: Vec<f64>,
}

impl FitResult {
    pub fn n_params(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn vcov_matrix(&self) -> Option<DMatrix<f64>> {
        let l = self.beta_hat.len();
        if self.vcov.len() != l {
            return None;
        }
        Some(DMatrix::from_fn(l, l, |a, b| self.vcov[a][b]))
    }

    /// Score rows as an `n x p` matrix.
    pub fn score_matrix(&self) -> DMatrix<f64> {
        let p = self.scores.len().checked_div(self.n).unwrap_or(0);
        DMatrix::from_row_slice(self.n, p, &self.scores)
    }

    /// `2 nll + 2 L`
    pub fn aic(&self) -> f64 {
        2.0 * self.nll + 2.0 * self.total_params() as f64
    }

    /// `2 nll + L ln n`
    pub fn bic(&self) -> f64 {
        2.0 * self.nll + self.total_params() as f64 * (self.n as f64).ln()
    }

    fn total_params(&self) -> usize {
        self.beta_hat.len() + usize::from(self.rho_hat.is_some())
    }
}

/// Parameterization of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Model {
    Fixed(ErrorFamily),
    /// Mixed SEVI/LEVI with the mixing logit as the last parameter.
    MixedTheta,
}

impl Model {
    fn n_params(&self, design: &DesignMatrix) -> usize {
        design.n_params() + usize::from(*self == Model::MixedTheta)
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[derive(Debug, Default)]
struct Eval {
    nll: f64,
    grad: Vec<f64>,
    loglik: Vec<f64>,
    scores: Vec<f64>,
    floored: usize,
}

#[derive(Clone, Copy)]
struct Want {
    grad: bool,
    scores: bool,
    /// Fail on probabilities below the floor instead of flooring them.
    strict: bool,
}

fn chunks(n: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

fn combine(parts: Vec<Eval>, p: usize, n: usize) -> Eval {
    let mut nll = NeumaierSum::new();
    let mut out = Eval {
        grad: vec![0.0; p],
        loglik: Vec::with_capacity(n),
        ..Eval::default()
    };
    for part in parts {
        nll.add(part.nll);
        for (g, x) in out.grad.iter_mut().zip(&part.grad) {
            *g += x;
        }
        out.loglik.extend(part.loglik);
        out.scores.extend(part.scores);
        out.floored += part.floored;
    }
    out.nll = nll.value();
    out
}

fn evaluate(
    design: &DesignMatrix,
    params: &[f64],
    model: Model,
    policy: TruncationPolicy,
    want: Want,
) -> Result<Eval> {
    let l = design.n_params();
    let p = model.n_params(design);
    let j = design.n_alternatives();
    let (beta, theta) = params.split_at(l);
    let mixing = theta.first().map(|t| {
        let tc = t.clamp(-THETA_CAP, THETA_CAP);
        (sigmoid(tc), t.abs() < THETA_CAP)
    });
    let parts: Vec<Eval> = chunks(design.n())
        .into_par_iter()
        .map(|range| {
            let mut v = vec![0.0; j];
            let mut gv = vec![0.0; j];
            let mut gl = vec![0.0; j];
            let mut nll = NeumaierSum::new();
            let mut part = Eval {
                grad: vec![0.0; p],
                ..Eval::default()
            };
            let mut s = vec![0.0; p];
            for i in range {
                let sit = &design.situations()[i];
                design.utilities_into(i, beta, &mut v)?;
                let (prob, dtheta) = match (model, mixing) {
                    (Model::Fixed(fam), _) => (
                        chosen_with_gradient(&v, sit.available, sit.chosen, fam, policy, &mut gv),
                        0.0,
                    ),
                    (Model::MixedTheta, Some((rho, free))) => {
                        let ps = chosen_with_gradient(&v, sit.available, sit.chosen, ErrorFamily::Sevi, policy, &mut gv);
                        let pl = chosen_with_gradient(&v, sit.available, sit.chosen, ErrorFamily::Levi, policy, &mut gl);
                        for (a, b) in gv.iter_mut().zip(&gl) {
                            *a = rho * *a + (1.0 - rho) * b;
                        }
                        let dt = if free { rho * (1.0 - rho) * (ps - pl) } else { 0.0 };
                        (rho * ps + (1.0 - rho) * pl, dt)
                    }
                    (Model::MixedTheta, None) => unreachable!(),
                };
                s.iter_mut().for_each(|x| *x = 0.0);
                if prob >= PROB_FLOOR {
                    nll.add(-prob.ln());
                    part.loglik.push(prob.ln());
                    if want.grad || want.scores {
                        for k in crate::kernel::bits(sit.available) {
                            if gv[k] == 0.0 {
                                continue;
                            }
                            let w = gv[k] / prob;
                            for (sl, x) in s[..l].iter_mut().zip(design.row(i, k)) {
                                *sl -= w * x;
                            }
                        }
                        if p > l {
                            s[l] = -dtheta / prob;
                        }
                    }
                } else if want.strict {
                    return Err(Error::Numeric(format!(
                        "situation {}: choice probability {prob:e} underflows",
                        sit.id
                    )));
                } else {
                    part.floored += 1;
                    nll.add(-PROB_FLOOR.ln());
                    part.loglik.push(PROB_FLOOR.ln());
                }
                if want.grad {
                    for (g, x) in part.grad.iter_mut().zip(&s) {
                        *g += x;
                    }
                }
                if want.scores {
                    part.scores.extend_from_slice(&s);
                }
            }
            part.nll = nll.value();
            Ok(part)
        })
        .collect::<Result<_>>()?;
    let out = combine(parts, p, design.n());
    if !out.nll.is_finite() {
        return Err(Error::numeric("negative log-likelihood is not finite"));
    }
    Ok(out)
}

/// Simulated log-likelihood contributions for the probit family. Situation
/// `i` always uses GHK stream `i`, so the objective is smooth in `beta`.
fn norm_loglik(design: &DesignMatrix, beta: &[f64], ghk: &GhkConfig) -> Result<(Vec<f64>, usize)> {
    ghk.validate()?;
    let j = design.n_alternatives();
    let parts: Vec<(Vec<f64>, usize)> = chunks(design.n())
        .into_par_iter()
        .map(|range| {
            let mut cache = GhkCache::default();
            let mut v = vec![0.0; j];
            let mut ll = Vec::with_capacity(range.len());
            let mut floored = 0;
            for i in range {
                let sit = &design.situations()[i];
                design.utilities_into(i, beta, &mut v)?;
                let p = cache.chosen(&v, sit.available, sit.chosen, ghk, i as u64);
                if p >= PROB_FLOOR {
                    ll.push(p.ln());
                } else {
                    floored += 1;
                    ll.push(PROB_FLOOR.ln());
                }
            }
            Ok((ll, floored))
        })
        .collect::<Result<_>>()?;
    let mut ll = Vec::with_capacity(design.n());
    let mut floored = 0;
    for (part, f) in parts {
        ll.extend(part);
        floored += f;
    }
    Ok((ll, floored))
}

fn neg_sum(ll: &[f64]) -> f64 {
    -ll.iter().copied().collect::<NeumaierSum>().value()
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central finite-difference gradient of the simulated probit nll.
fn norm_nll_grad(design: &DesignMatrix, beta: &[f64], ghk: &GhkConfig) -> Result<(f64, Vec<f64>, usize)> {
    let (ll, floored) = norm_loglik(design, beta, ghk)?;
    let mut grad = vec![0.0; beta.len()];
    let mut b = beta.to_vec();
    for l in 0..beta.len() {
        let h = fd_step(beta[l]);
        b[l] = beta[l] + h;
        let up = neg_sum(&norm_loglik(design, &b, ghk)?.0);
        b[l] = beta[l] - h;
        let down = neg_sum(&norm_loglik(design, &b, ghk)?.0);
        b[l] = beta[l];
        grad[l] = (up - down) / (2.0 * h);
    }
    Ok((neg_sum(&ll), grad, floored))
}

/// Per-situation probit scores by central differences of `ln P_i`.
fn norm_scores(design: &DesignMatrix, beta: &[f64], ghk: &GhkConfig) -> Result<Vec<f64>> {
    let n = design.n();
    let l = beta.len();
    let mut scores = vec![0.0; n * l];
    let mut b = beta.to_vec();
    for c in 0..l {
        let h = fd_step(beta[c]);
        b[c] = beta[c] + h;
        let up = norm_loglik(design, &b, ghk)?.0;
        b[c] = beta[c] - h;
        let down = norm_loglik(design, &b, ghk)?.0;
        b[c] = beta[c];
        for i in 0..n {
            scores[i * l + c] = -(up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok(scores)
}

fn check_dims(design: &DesignMatrix, beta: &[f64]) -> Result<()> {
    if beta.len() != design.n_params() {
        return Err(Error::domain(format!(
            "coefficient vector has length {}, design has {} columns",
            beta.len(),
            design.n_params()
        )));
    }
    Ok(())
}

/// Negative log-likelihood `-sum_i ln P_i` with probabilities floored at
/// 1e-12. The probit family uses the default GHK configuration.
pub fn nll(design: &DesignMatrix, beta: &[f64], family: ErrorFamily, policy: TruncationPolicy) -> Result<f64> {
    Ok(-nll_contributions(design, beta, family, policy)?
        .iter()
        .copied()
        .collect::<NeumaierSum>()
        .value())
}

/// Per-situation log-likelihood contributions `ln P_i`.
pub fn nll_contributions(
    design: &DesignMatrix,
    beta: &[f64],
    family: ErrorFamily,
    policy: TruncationPolicy,
) -> Result<Vec<f64>> {
    check_dims(design, beta)?;
    family.validate()?;
    policy.validate()?;
    if family == ErrorFamily::Norm {
        return Ok(norm_loglik(design, beta, &GhkConfig::default())?.0);
    }
    let want = Want {
        grad: false,
        scores: false,
        strict: false,
    };
    Ok(evaluate(design, beta, Model::Fixed(family), policy, want)?.loglik)
}

/// Simulated probit negative log-likelihood under an explicit GHK setup.
pub fn nll_norm(design: &DesignMatrix, beta: &[f64], ghk: &GhkConfig) -> Result<f64> {
    check_dims(design, beta)?;
    Ok(neg_sum(&norm_loglik(design, beta, ghk)?.0))
}

/// Analytic per-situation scores (`n x L`) for SEVI, LEVI or Mixed(rho).
pub fn score(design: &DesignMatrix, beta: &[f64], family: ErrorFamily, policy: TruncationPolicy) -> Result<DMatrix<f64>> {
    check_dims(design, beta)?;
    family.validate()?;
    policy.validate()?;
    if family == ErrorFamily::Norm {
        return Err(Error::UnsupportedFamily {
            op: "score",
            family: family.to_string(),
        });
    }
    let want = Want {
        grad: false,
        scores: true,
        strict: true,
    };
    let e = evaluate(design, beta, Model::Fixed(family), policy, want)?;
    Ok(DMatrix::from_row_slice(design.n(), design.n_params(), &e.scores))
}

/// Gradient of the negative log-likelihood (column sums of [`score`]).
pub fn gradient(design: &DesignMatrix, beta: &[f64], family: ErrorFamily, policy: TruncationPolicy) -> Result<Vec<f64>> {
    check_dims(design, beta)?;
    if family == ErrorFamily::Norm {
        return Ok(norm_nll_grad(design, beta, &GhkConfig::default())?.1);
    }
    let want = Want {
        grad: true,
        scores: false,
        strict: false,
    };
    Ok(evaluate(design, beta, Model::Fixed(family), policy, want)?.grad)
}

struct Objective<'a> {
    design: &'a DesignMatrix,
    model: Model,
    policy: TruncationPolicy,
    ghk: GhkConfig,
}

impl Objective<'_> {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.model {
            Model::Fixed(ErrorFamily::Norm) => {
                let (f, g, _) = norm_nll_grad(self.design, x, &self.ghk)?;
                Ok((f, g))
            }
            model => {
                let want = Want {
                    grad: true,
                    scores: false,
                    strict: false,
                };
                let e = evaluate(self.design, x, model, self.policy, want)?;
                Ok((e.nll, e.grad))
            }
        }
    }

    /// Log-likelihood contributions, scores and floored count at `x`.
    fn scores(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        match self.model {
            Model::Fixed(ErrorFamily::Norm) => {
                let (ll, floored) = norm_loglik(self.design, x, &self.ghk)?;
                Ok((ll, norm_scores(self.design, x, &self.ghk)?, floored))
            }
            model => {
                let want = Want {
                    grad: false,
                    scores: true,
                    strict: false,
                };
                let e = evaluate(self.design, x, model, self.policy, want)?;
                Ok((e.loglik, e.scores, e.floored))
            }
        }
    }

    /// Hessian of the nll by central differences of the gradient.
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let p = x.len();
        let mut h = DMatrix::zeros(p, p);
        let mut y = x.to_vec();
        let scale = if self.model == Model::Fixed(ErrorFamily::Norm) { 10.0 } else { 1.0 };
        for c in 0..p {
            let step = scale * fd_step(x[c]);
            y[c] = x[c] + step;
            let up = self.value_grad(&y)?.1;
            y[c] = x[c] - step;
            let down = self.value_grad(&y)?.1;
            y[c] = x[c];
            for r in 0..p {
                h[(r, c)] = (up[r] - down[r]) / (2.0 * step);
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}

fn invert_pd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let finite = m.iter().all(|x| x.is_finite());
    match m.clone().cholesky() {
        Some(ch) if finite => Ok(ch.inverse()),
        _ => Err(Error::Numeric(format!(
            "{what} is singular or indefinite; consider rescaling covariates"
        ))),
    }
}

fn outer_sum(scores: &[f64], p: usize, groups: Option<(&[usize], usize)>) -> DMatrix<f64> {
    let rows: Vec<DVector<f64>> = match groups {
        None => scores.chunks(p).map(DVector::from_column_slice).collect(),
        Some((idx, n_groups)) => {
            let mut g = vec![DVector::zeros(p); n_groups];
            for (row, &c) in scores.chunks(p).zip(idx) {
                g[c] += DVector::from_column_slice(row);
            }
            g
        }
    };
    let mut b = DMatrix::zeros(p, p);
    for r in &rows {
        b += r * r.transpose();
    }
    b
}

fn covariance(obj: &Objective, x: &[f64], scores: &[f64], kind: SeKind) -> Result<DMatrix<f64>> {
    let p = x.len();
    let design = obj.design;
    let opg = outer_sum(scores, p, None);
    let v = match kind {
        SeKind::Plain => invert_pd(&opg, "outer product of scores")?,
        SeKind::Sandwich | SeKind::Cluster => {
            let hinv = invert_pd(&obj.hessian(x)?, "Hessian")?;
            let meat = if kind == SeKind::Sandwich {
                opg
            } else {
                let idx: Vec<usize> = design.situations().iter().map(|s| s.cluster).collect();
                outer_sum(scores, p, Some((&idx, design.cluster_ids().len())))
            };
            &hinv * meat * &hinv
        }
    };
    Ok((&v + v.transpose()) * 0.5)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn se_of(v: &DMatrix<f64>) -> Vec<f64> {
    (0..v.nrows()).map(|k| v[(k, k)].max(0.0).sqrt()).collect()
}

fn validate_options(design: &DesignMatrix, opts: &FitOptions, p: usize) -> Result<()> {
    if let Some(s) = &opts.start {
        if s.len() != p {
            return Err(Error::domain(format!(
                "start vector has length {}, expected {p}",
                s.len()
            )));
        }
    }
    if opts.se == SeKind::Cluster && design.cluster_ids().is_empty() {
        return Err(Error::validation("cluster standard errors need cluster ids"));
    }
    if design.n() == 0 {
        return Err(Error::validation("no choice situations"));
    }
    opts.policy_for(design).validate()
}

/// Maximum likelihood fit of one error family (a fixed mixing probability
/// for `Mixed`). The probit family is fitted by simulated likelihood.
pub fn fit(design: &DesignMatrix, family: ErrorFamily, opts: &FitOptions) -> Result<FitResult> {
    family.validate()?;
    validate_options(design, opts, design.n_params())?;
    design.check_rank()?;
    if family == ErrorFamily::Norm {
        opts.ghk.validate()?;
    }
    let obj = Objective {
        design,
        model: Model::Fixed(family),
        policy: opts.policy_for(design),
        ghk: opts.ghk,
    };
    let start = opts.start.clone().unwrap_or_else(|| vec![0.0; design.n_params()]);
    let out = minimize(
        |x| obj.value_grad(x),
        &start,
        BfgsOptions {
            max_iter: opts.max_iter,
            grad_tol: opts.grad_tol,
            rel_tol: 1e-10,
        },
    )?;
    let (loglik, scores, floored) = obj.scores(&out.x)?;
    let mut res = FitResult {
        family,
        columns: design.columns().to_vec(),
        beta_hat: out.x.clone(),
        vcov: Vec::new(),
        se: Vec::new(),
        se_kind: opts.se,
        nll: out.value,
        n: design.n(),
        converged: out.converged,
        iterations: out.iterations,
        gradient_norm: out.gradient_norm,
        rel_change: out.rel_change,
        floored,
        truncation: obj.policy,
        ghk: (family == ErrorFamily::Norm).then_some(opts.ghk),
        rho_hat: None,
        rho_se: None,
        rho_boundary: false,
        fingerprint: design.fingerprint(),
        loglik,
        scores,
    };
    if opts.compute_vcov {
        match covariance(&obj, &out.x, &res.scores, opts.se) {
            Ok(v) => {
                res.se = se_of(&v);
                res.vcov = rows(&v);
            }
            Err(e) if res.converged => return Err(e),
            Err(_) => {}
        }
    }
    Ok(res)
}

/// Joint fit of the coefficients and the SEVI share `rho` of a mixed
/// SEVI/LEVI model, with `rho = 1 / (1 + exp(-theta))`. The default start is
/// the LEVI estimate with `theta = 0`.
pub fn fit_mixed(design: &DesignMatrix, opts: &FitOptions) -> Result<FitResult> {
    let l = design.n_params();
    validate_options(design, opts, l + 1).or_else(|e| {
        // a start of length L is also accepted
        match &opts.start {
            Some(s) if s.len() == l => Ok(()),
            _ => Err(e),
        }
    })?;
    design.check_rank()?;
    let policy = opts.policy_for(design);
    let start = match &opts.start {
        Some(s) if s.len() == l + 1 => s.clone(),
        Some(s) => [s.as_slice(), &[0.0]].concat(),
        None => {
            let levi = fit(
                design,
                ErrorFamily::Levi,
                &FitOptions {
                    compute_vcov: false,
                    ..opts.clone()
                },
            )?;
            [levi.beta_hat.as_slice(), &[0.0]].concat()
        }
    };
    let obj = Objective {
        design,
        model: Model::MixedTheta,
        policy,
        ghk: opts.ghk,
    };
    let out = minimize(
        |x| obj.value_grad(x),
        &start,
        BfgsOptions {
            max_iter: opts.max_iter,
            grad_tol: opts.grad_tol,
            rel_tol: 1e-10,
        },
    )?;
    let theta = out.x[l].clamp(-THETA_CAP, THETA_CAP);
    let rho = sigmoid(theta);
    let boundary = theta.abs() > BOUNDARY_THETA;
    let beta = out.x[..l].to_vec();
    let (loglik, scores, floored) = obj.scores(&out.x)?;
    let mut res = FitResult {
        family: ErrorFamily::Mixed(rho),
        columns: design.columns().to_vec(),
        beta_hat: beta.clone(),
        vcov: Vec::new(),
        se: Vec::new(),
        se_kind: opts.se,
        nll: out.value,
        n: design.n(),
        converged: out.converged,
        iterations: out.iterations,
        gradient_norm: out.gradient_norm,
        rel_change: out.rel_change,
        floored,
        truncation: policy,
        ghk: None,
        rho_hat: Some(rho),
        rho_se: None,
        rho_boundary: boundary,
        fingerprint: design.fingerprint(),
        loglik,
        scores,
    };
    if opts.compute_vcov {
        let v = if boundary {
            // coefficients only, holding rho at its estimate
            let fixed = Objective {
                model: Model::Fixed(ErrorFamily::Mixed(rho)),
                ..obj
            };
            let (_, s, _) = fixed.scores(&beta)?;
            covariance(&fixed, &beta, &s, opts.se)
        } else {
            covariance(&obj, &out.x, &res.scores, opts.se)
        };
        match v {
            Ok(v) => {
                let full = se_of(&v);
                res.se = full[..l].to_vec();
                res.vcov = rows(&v.view((0, 0), (l, l)).into_owned());
                if !boundary {
                    res.rho_se = Some(rho * (1.0 - rho) * full[l]);
                }
            }
            Err(e) if res.converged => return Err(e),
            Err(_) => {}
        }
    }
    Ok(res)
}

/// Covariance of a fit's estimates (`p x p`, mixing logit last when it was
/// estimated) recomputed with another estimator.
pub fn vcov(design: &DesignMatrix, result: &FitResult, kind: SeKind) -> Result<DMatrix<f64>> {
    if design.fingerprint() != result.fingerprint {
        return Err(Error::domain("fit was computed on a different dataset"));
    }
    let (model, x) = match result.rho_hat {
        Some(rho) if !result.rho_boundary => {
            let theta = (rho / (1.0 - rho)).ln();
            (Model::MixedTheta, [result.beta_hat.as_slice(), &[theta]].concat())
        }
        Some(rho) => (Model::Fixed(ErrorFamily::Mixed(rho)), result.beta_hat.clone()),
        None => (Model::Fixed(result.family), result.beta_hat.clone()),
    };
    let obj = Objective {
        design,
        model,
        policy: result.truncation,
        ghk: result.ghk.unwrap_or_default(),
    };
    let (_, scores, _) = obj.scores(&x)?;
    covariance(&obj, &x, &scores, kind)
}

/// Inverse of the observed information (finite-difference Hessian of the
/// nll) at a fit's estimates.
pub fn inverse_hessian(design: &DesignMatrix, result: &FitResult) -> Result<DMatrix<f64>> {
    if design.fingerprint() != result.fingerprint {
        return Err(Error::domain("fit was computed on a different dataset"));
    }
    let obj = Objective {
        design,
        model: Model::Fixed(result.family),
        policy: result.truncation,
        ghk: result.ghk.unwrap_or_default(),
    };
    let v = invert_pd(&obj.hessian(&result.beta_hat)?, "Hessian")?;
    Ok((&v + v.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Wald test of `R beta = r` given the covariance `vcov` of `beta`.
pub fn wald(beta: &[f64], vcov: &DMatrix<f64>, r_mat: &DMatrix<f64>, r: &[f64]) -> Result<WaldTest> {
    let l = beta.len();
    if vcov.shape() != (l, l) || r_mat.ncols() != l || r_mat.nrows() != r.len() || r.is_empty() {
        return Err(Error::domain("inconsistent dimensions in Wald test"));
    }
    let d = r_mat * DVector::from_column_slice(beta) - DVector::from_column_slice(r);
    let middle = r_mat * vcov * r_mat.transpose();
    let inv = invert_pd(&((&middle + middle.transpose()) * 0.5), "restriction covariance")?;
    let statistic = (d.transpose() * inv * &d)[(0, 0)];
    let dof = r.len();
    Ok(WaldTest {
        statistic,
        dof,
        p_value: chi2_sf(statistic, dof),
    })
}

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    if dof == 0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    let chi = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    chi.sf(x.max(0.0))
}

/// Upper `alpha` critical value of the chi-squared distribution.
pub fn chi2_critical(alpha: f64, dof: usize) -> f64 {
    let chi = ChiSquared::new(dof.max(1) as f64).expect("positive degrees of freedom");
    chi.inverse_cdf(1.0 - alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Situation;
    use crate::evd::Evd;
    use crate::rng::stream;

    /// Logit-friendly random design with `l` generic covariates.
    fn random_design(n: usize, j: usize, l: usize, beta: &[f64], family: Evd, seed: u64) -> DesignMatrix {
        let mut rng = stream(seed, 0);
        let normal = Evd::Normal { variance: 1.0 };
        let situations = (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..j * l).map(|_| normal.draw(&mut rng)).collect();
                let mut best = 0;
                let mut top = f64::NEG_INFINITY;
                for k in 0..j {
                    let v: f64 = (0..l).map(|c| x[k * l + c] * beta[c]).sum();
                    let u = v + family.draw(&mut rng);
                    if u > top {
                        top = u;
                        best = k;
                    }
                }
                Situation {
                    id: format!("s{i}"),
                    x,
                    chosen: best,
                    available: (1u64 << j) - 1,
                    cluster: 0,
                }
            })
            .collect();
        DesignMatrix::unclustered(
            (0..j).map(|k| format!("a{k}")).collect(),
            (0..l).map(|c| format!("x{c}")).collect(),
            situations,
        )
        .unwrap()
    }

    #[test]
    fn zero_coefficients_give_log_j() {
        let d = random_design(10, 4, 2, &[0.5, -0.5], Evd::Sevi, 1);
        for fam in [ErrorFamily::Sevi, ErrorFamily::Levi, ErrorFamily::Mixed(0.3)] {
            let v = nll(&d, &[0.0, 0.0], fam, TruncationPolicy::Full).unwrap();
            assert!((v - 10.0 * 4f64.ln()).abs() < 1e-12, "{fam}: {v}");
        }
    }

    #[test]
    fn two_alternatives_sevi_equals_levi() {
        let d = random_design(200, 2, 2, &[1.0, -0.5], Evd::Sevi, 2);
        for beta in [[0.3, 0.2], [2.0, -1.5], [-4.0, 3.0]] {
            let a = nll(&d, &beta, ErrorFamily::Sevi, TruncationPolicy::Full).unwrap();
            let b = nll(&d, &beta, ErrorFamily::Levi, TruncationPolicy::Full).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
        let opts = FitOptions::default();
        let s = fit(&d, ErrorFamily::Sevi, &opts).unwrap();
        let l = fit(&d, ErrorFamily::Levi, &opts).unwrap();
        for (a, b) in s.beta_hat.iter().zip(&l.beta_hat) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mixed_boundaries_reproduce_pure_families() {
        let d = random_design(50, 5, 2, &[1.0, 0.5], Evd::Sevi, 3);
        let beta = [0.7, -0.2];
        let full = TruncationPolicy::Full;
        let s = nll(&d, &beta, ErrorFamily::Sevi, full).unwrap();
        let l = nll(&d, &beta, ErrorFamily::Levi, full).unwrap();
        assert_eq!(nll(&d, &beta, ErrorFamily::Mixed(1.0), full).unwrap(), s);
        assert_eq!(nll(&d, &beta, ErrorFamily::Mixed(0.0), full).unwrap(), l);
    }

    fn fd_gradient(d: &DesignMatrix, beta: &[f64], fam: ErrorFamily) -> Vec<f64> {
        (0..beta.len())
            .map(|c| {
                let h = 1e-6 * beta[c].abs().max(1.0);
                let mut up = beta.to_vec();
                up[c] += h;
                let mut down = beta.to_vec();
                down[c] -= h;
                (nll(d, &up, fam, TruncationPolicy::Full).unwrap() - nll(d, &down, fam, TruncationPolicy::Full).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = stream(100 + seed, 1);
            let beta: Vec<f64> = (0..3).map(|_| Evd::Normal { variance: 1.0 }.draw(&mut rng)).collect();
            let d = random_design(30, 5, 3, &beta, Evd::Sevi, seed);
            for fam in [ErrorFamily::Sevi, ErrorFamily::Levi, ErrorFamily::Mixed(0.4)] {
                let s = score(&d, &beta, fam, TruncationPolicy::Full).unwrap();
                let fd = fd_gradient(&d, &beta, fam);
                for (c, &fdc) in fd.iter().enumerate() {
                    let g: f64 = s.column(c).sum();
                    assert!((g - fdc).abs() <= 1e-5 * fdc.abs().max(1.0), "{fam} c={c}: {g} vs {fdc}");
                }
            }
        }
    }

    #[test]
    fn levi_score_is_the_classical_logit_score() {
        let beta = [0.8, -0.3];
        let d = random_design(40, 4, 2, &beta, Evd::Levi, 5);
        let s = score(&d, &beta, ErrorFamily::Levi, TruncationPolicy::Full).unwrap();
        for (i, sit) in d.situations().iter().enumerate() {
            let v: Vec<f64> = (0..4).map(|k| d.row(i, k).iter().zip(&beta).map(|(x, b)| x * b).sum()).collect();
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let mean: f64 = (0..4).map(|k| v[k].exp() / z * d.row(i, k)[c]).sum();
                let classical = -(d.row(i, sit.chosen)[c] - mean);
                assert!((s[(i, c)] - classical).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn underflowing_probability_is_a_score_error() {
        let d = random_design(5, 3, 1, &[1.0], Evd::Levi, 6);
        let r = score(&d, &[300.0], ErrorFamily::Levi, TruncationPolicy::Full);
        assert!(matches!(r, Err(Error::Numeric(_))));
        // the likelihood itself floors instead
        assert!(nll(&d, &[300.0], ErrorFamily::Levi, TruncationPolicy::Full).unwrap().is_finite());
    }

    #[test]
    fn fit_reaches_first_order_conditions_and_is_reproducible() {
        let d = random_design(400, 4, 2, &[1.0, -1.0], Evd::Sevi, 7);
        let a = fit(&d, ErrorFamily::Sevi, &FitOptions::default()).unwrap();
        assert!(a.converged);
        let g = gradient(&d, &a.beta_hat, ErrorFamily::Sevi, TruncationPolicy::Full).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-6) || a.rel_change < 1e-10);
        let b = fit(&d, ErrorFamily::Sevi, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_and_sandwich_agree_under_correct_specification() {
        let d = random_design(4000, 4, 2, &[1.0, 0.5], Evd::Sevi, 8);
        let plain = fit(&d, ErrorFamily::Sevi, &FitOptions::default()).unwrap();
        let v = plain.vcov_matrix().unwrap();
        let s = vcov(&d, &plain, SeKind::Sandwich).unwrap();
        for k in 0..2 {
            assert!((v[(k, k)] / s[(k, k)] - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn singleton_clusters_reproduce_the_sandwich() {
        let d = random_design(300, 3, 2, &[1.0, 0.5], Evd::Levi, 9);
        let f = fit(&d, ErrorFamily::Levi, &FitOptions::default()).unwrap();
        let s = vcov(&d, &f, SeKind::Sandwich).unwrap();
        let c = vcov(&d, &f, SeKind::Cluster).unwrap();
        assert_eq!(s, c);
        let eig = c.symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let d = random_design(20, 3, 1, &[1.0], Evd::Levi, 10);
        let situations = d
            .situations()
            .iter()
            .map(|s| Situation {
                x: (0..3).flat_map(|k| [s.x[k], 1.0]).collect(),
                ..s.clone()
            })
            .collect();
        let d2 = DesignMatrix::unclustered(d.alternatives().to_vec(), vec!["x".into(), "one".into()], situations).unwrap();
        match fit(&d2, ErrorFamily::Sevi, &FitOptions::default()) {
            Err(Error::Identification { columns, .. }) => assert_eq!(columns, vec!["one".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exhausted_iterations_are_reported_not_raised() {
        let d = random_design(200, 4, 2, &[1.0, 0.5], Evd::Sevi, 11);
        let f = fit(
            &d,
            ErrorFamily::Sevi,
            &FitOptions {
                max_iter: 1,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!(!f.converged);
        assert_eq!(f.iterations, 1);
    }

    #[test]
    fn mixed_fit_flags_a_pure_sevi_sample_at_the_boundary() {
        let d = random_design(3000, 5, 2, &[1.5, -1.0], Evd::Sevi, 12);
        let f = fit_mixed(&d, &FitOptions::default()).unwrap();
        let rho = f.rho_hat.unwrap();
        assert!(rho > 0.9, "rho={rho}");
        if f.rho_boundary {
            assert!(f.rho_se.is_none());
        }
    }

    #[test]
    fn mixed_theta_score_matches_finite_differences() {
        let d = random_design(40, 4, 2, &[1.0, 0.5], Evd::Sevi, 13);
        let x = [0.8, 0.3, 0.4];
        let want = Want {
            grad: true,
            scores: false,
            strict: false,
        };
        let f = |x: &[f64]| evaluate(&d, x, Model::MixedTheta, TruncationPolicy::Full, want).unwrap();
        let g = f(&x).grad;
        for c in 0..3 {
            let mut up = x;
            up[c] += 1e-6;
            let mut down = x;
            down[c] -= 1e-6;
            let fd = (f(&up).nll - f(&down).nll) / 2e-6;
            assert!((g[c] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn norm_fit_recovers_probit_coefficients() {
        let beta = [1.0, -0.5];
        let d = random_design(600, 3, 2, &beta, Evd::matched_normal(), 14);
        let f = fit(
            &d,
            ErrorFamily::Norm,
            &FitOptions {
                ghk: GhkConfig {
                    draws: 200,
                    ..GhkConfig::default()
                },
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!(f.converged);
        for (c, &b) in beta.iter().enumerate().take(2) {
            assert!((f.beta_hat[c] - b).abs() < 4.0 * f.se[c], "{:?} se {:?}", f.beta_hat, f.se);
        }
    }

    #[test]
    fn wald_matches_hand_computation() {
        let v = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let r = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let w = wald(&[1.2, 0.7], &v, &r, &[0.0]).unwrap();
        let expect = 0.25 / (0.04 + 0.09 - 0.02);
        assert!((w.statistic - expect).abs() < 1e-12);
        assert_eq!(w.dof, 1);
        // chi2(1) tail through the normal
        let z = expect.sqrt();
        let p = 2.0 * (1.0 - crate::evd::std_normal_cdf(z));
        assert!((w.p_value - p).abs() < 1e-10);
    }

    #[test]
    fn floor_is_counted() {
        let d = random_design(20, 3, 1, &[1.0], Evd::Levi, 15);
        let f = fit(
            &d,
            ErrorFamily::Levi,
            &FitOptions {
                start: Some(vec![-400.0]),
                max_iter: 0,
                compute_vcov: false,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!(f.floored > 0);
    }
}
