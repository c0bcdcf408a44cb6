//! Data-generating processes, the replication engine, timing benchmarks and
//! plot data.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrix, Situation};
use crate::error::{Error, Result};
use crate::estimation::{fit, fit_mixed, FitOptions, FitResult, SeKind};
use crate::evd::{std_normal_quantile, Evd};
use crate::kernel::{prob_levi, prob_sevi, probabilities, ErrorFamily, TruncationPolicy, UtilityVector};
use crate::probit::{probs_norm, GhkConfig};
use crate::rng::{derive_seed, open_unit, stream};
use crate::selection::{hausman_mcfadden, vuong, Z_ONE_SIDED_5};

/// Utilities of the five-alternative share illustration.
pub const FIGURE_UTILITIES: [f64; 5] = [0.25, 0.50, 0.75, 1.50, 2.00];

/// Standardized positions `(j - (J + 1)/2) / sqrt((J^2 - 1)/12)`, `j = 1..J`.
pub fn omega(j: usize) -> Vec<f64> {
    let jf = j as f64;
    let scale = ((jf * jf - 1.0) / 12.0).sqrt();
    (1..=j).map(|k| (k as f64 - (jf + 1.0) / 2.0) / scale).collect()
}

/// Law of the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum AttrLaw {
    /// `X_ijl ~ N(0, pi^2 omega_j^2 / 36)`.
    Heteroskedastic,
    /// `X_ijl ~ N(0, pi^2 / 36)`.
    Homoskedastic,
    /// Constant utilities, represented by `J - 1` alternative-specific
    /// constants with the last alternative as base.
    FixedUtilities { v: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub j: usize,
    pub n: usize,
    /// Covariates per alternative (ignored for fixed utilities).
    pub l: usize,
    pub beta0: Vec<f64>,
    pub attr_law: AttrLaw,
    pub family: ErrorFamily,
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.j < 2 || self.j > crate::kernel::MAX_ALTERNATIVES {
            return Err(Error::domain(format!("J must lie in [2, 64], got {}", self.j)));
        }
        if self.n == 0 {
            return Err(Error::domain("sample size must be positive"));
        }
        match &self.attr_law {
            AttrLaw::FixedUtilities { v } => {
                if v.len() != self.j || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::domain("fixed utilities must be J finite values"));
                }
            }
            _ => {
                if self.l == 0 || self.beta0.len() != self.l || self.beta0.iter().any(|b| !b.is_finite()) {
                    return Err(Error::domain(format!(
                        "beta0 must hold L = {} finite values",
                        self.l
                    )));
                }
            }
        }
        Ok(())
    }

    /// Coefficients of the generated design.
    pub fn true_beta(&self) -> Vec<f64> {
        match &self.attr_law {
            AttrLaw::FixedUtilities { v } => {
                let base = v[self.j - 1];
                v[..self.j - 1].iter().map(|x| x - base).collect()
            }
            _ => self.beta0.clone(),
        }
    }
}

fn error_draw<R: rand::RngCore>(family: ErrorFamily, sevi_class: bool, rng: &mut R) -> f64 {
    match family {
        ErrorFamily::Sevi => Evd::Sevi.draw(rng),
        ErrorFamily::Levi => Evd::Levi.draw(rng),
        ErrorFamily::Norm => Evd::matched_normal().draw(rng),
        ErrorFamily::Mixed(_) if sevi_class => Evd::Sevi.draw(rng),
        ErrorFamily::Mixed(_) => Evd::Levi.draw(rng),
    }
}

/// Simulates a sample; the chosen alternative maximizes `X beta + eps`, with
/// ties going to the lowest index. Under `Mixed(rho)` each situation draws
/// SEVI errors with probability `rho` and LEVI errors otherwise.
pub fn generate(spec: &DgpSpec) -> Result<(DesignMatrix, Vec<f64>)> {
    spec.validate()?;
    let j = spec.j;
    let beta = spec.true_beta();
    let (l, columns, sd): (usize, Vec<String>, Vec<f64>) = match &spec.attr_law {
        AttrLaw::FixedUtilities { .. } => (j - 1, (1..j).map(|k| format!("asc:{k}")).collect(), vec![0.0; j]),
        law => {
            let sd = match law {
                AttrLaw::Heteroskedastic => omega(j).iter().map(|w| std::f64::consts::PI * w.abs() / 6.0).collect(),
                _ => vec![std::f64::consts::PI / 6.0; j],
            };
            (spec.l, (1..=spec.l).map(|c| format!("x{c}")).collect(), sd)
        }
    };
    let mut rng = stream(spec.seed, 0);
    let mut situations = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut x = vec![0.0; j * l];
        match &spec.attr_law {
            AttrLaw::FixedUtilities { .. } => {
                for k in 0..j - 1 {
                    x[k * l + k] = 1.0;
                }
            }
            _ => {
                for k in 0..j {
                    for c in 0..l {
                        let z: f64 = rng.sample(StandardNormal);
                        x[k * l + c] = sd[k] * z;
                    }
                }
            }
        }
        let sevi_class = match spec.family {
            ErrorFamily::Mixed(rho) => open_unit(&mut rng) < rho,
            _ => false,
        };
        let mut best = 0;
        let mut top = f64::NEG_INFINITY;
        for k in 0..j {
            let v: f64 = x[k * l..(k + 1) * l].iter().zip(&beta).map(|(a, b)| a * b).sum();
            let u = v + error_draw(spec.family, sevi_class, &mut rng);
            if u > top {
                top = u;
                best = k;
            }
        }
        situations.push(Situation {
            id: format!("{}", i + 1),
            x,
            chosen: best,
            available: if j == 64 { u64::MAX } else { (1u64 << j) - 1 },
            cluster: i,
        });
    }
    let alternatives = (1..=j).map(|k| k.to_string()).collect();
    Ok((DesignMatrix::unclustered(alternatives, columns, situations)?, beta))
}

/// What a replication fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// One family (fixed mixing probability for `Mixed`).
    Family(ErrorFamily),
    /// Mixed SEVI/LEVI with the mixing probability estimated.
    MixedFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub label: String,
    pub estimator: Estimator,
    pub se: SeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationConfig {
    pub estimators: Vec<EstimatorSpec>,
    /// Vuong test between two estimators (indices into `estimators`).
    pub vuong: Option<(usize, usize)>,
    /// Hausman-McFadden subset (bit mask) for a LEVI IIA test.
    pub hausman_subset: Option<u64>,
    pub fit: FitOptions,
    /// Confidence level for coverage.
    pub level: f64,
}

impl ReplicationConfig {
    /// SEVI MLE with plain errors and LEVI QMLE with sandwich errors.
    pub fn mle_qmle() -> Self {
        Self {
            estimators: vec![
                EstimatorSpec {
                    label: "mle".into(),
                    estimator: Estimator::Family(ErrorFamily::Sevi),
                    se: SeKind::Plain,
                },
                EstimatorSpec {
                    label: "qmle".into(),
                    estimator: Estimator::Family(ErrorFamily::Levi),
                    se: SeKind::Sandwich,
                },
            ],
            vuong: None,
            hausman_subset: None,
            fit: FitOptions::default(),
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFit {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub rho: Option<f64>,
    pub rho_boundary: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// One entry per estimator; `None` when the fit raised an error.
    pub fits: Vec<Option<RepFit>>,
    pub vuong: Option<f64>,
    pub hausman_reject: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Standard deviation across replications (divisor `reps - 1`; zero for
    /// a single replication).
    pub std: f64,
    /// Absent when the replications computed no standard errors.
    pub mean_se: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSummary {
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub boundary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub used: usize,
    pub failed: usize,
    pub non_converged: usize,
    pub coefficients: Vec<CoefSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<RhoSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VuongSummary {
    pub used: usize,
    /// Fraction with a negative statistic (first model preferred).
    pub frac_negative: f64,
    /// Fraction below the one-sided 5% critical value.
    pub frac_favor_first: f64,
    pub frac_positive: f64,
    pub frac_favor_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HausmanSummary {
    pub used: usize,
    pub failed: usize,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub spec: DgpSpec,
    pub reps: usize,
    pub level: f64,
    pub estimators: Vec<EstimatorSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vuong: Option<VuongSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hausman: Option<HausmanSummary>,
    #[serde(skip)]
    pub records: Vec<RepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CoefRow<'a> {
    estimator: &'a str,
    coefficient: &'a str,
    truth: f64,
    mean: f64,
    bias: f64,
    std: f64,
    mean_se: Option<f64>,
    coverage: Option<f64>,
    used: usize,
}

impl ReplicationSummary {
    /// One CSV row per estimator and coefficient.
    pub fn to_csv(&self) -> Result<String> {
        let rows: Vec<CoefRow> = self
            .estimators
            .iter()
            .flat_map(|e| {
                e.coefficients.iter().map(move |c| CoefRow {
                    estimator: &e.label,
                    coefficient: &c.name,
                    truth: c.truth,
                    mean: c.mean,
                    bias: c.bias,
                    std: c.std,
                    mean_se: c.mean_se,
                    coverage: c.coverage,
                    used: e.used,
                })
            })
            .collect();
        crate::io::rows_to_csv(&rows)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn estimator(&self, label: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.label == label)
    }
}

fn run_estimator(design: &DesignMatrix, est: &EstimatorSpec, base: &FitOptions) -> Result<FitResult> {
    let opts = FitOptions {
        se: est.se,
        ..base.clone()
    };
    match est.estimator {
        Estimator::Family(f) => fit(design, f, &opts),
        Estimator::MixedFree => fit_mixed(design, &opts),
    }
}

fn one_rep(spec: &DgpSpec, cfg: &ReplicationConfig, rep: usize) -> RepRecord {
    let seed = derive_seed(spec.seed, rep as u64);
    let rep_spec = DgpSpec { seed, ..spec.clone() };
    let Ok((design, _)) = generate(&rep_spec) else {
        return RepRecord {
            rep,
            seed,
            fits: vec![None; cfg.estimators.len()],
            vuong: None,
            hausman_reject: None,
        };
    };
    let results: Vec<Option<FitResult>> = cfg
        .estimators
        .iter()
        .map(|e| run_estimator(&design, e, &cfg.fit).ok())
        .collect();
    let vuong_stat = cfg.vuong.and_then(|(a, b)| {
        let (fa, fb) = (results.get(a)?.as_ref()?, results.get(b)?.as_ref()?);
        if !(fa.converged && fb.converged) {
            return None;
        }
        vuong(fa, fb).ok().map(|r| r.statistic)
    });
    let hausman_reject = cfg.hausman_subset.and_then(|subset| {
        let opts = FitOptions {
            compute_vcov: false,
            ..cfg.fit.clone()
        };
        hausman_mcfadden(&design, subset, &opts).ok().map(|r| r.reject_5pct)
    });
    let fits = results
        .into_iter()
        .map(|r| {
            r.map(|f| RepFit {
                beta: f.beta_hat,
                se: f.se,
                rho: f.rho_hat,
                rho_boundary: f.rho_boundary,
                converged: f.converged,
            })
        })
        .collect();
    RepRecord {
        rep,
        seed,
        fits,
        vuong: vuong_stat,
        hausman_reject,
    }
}

fn quantile_sorted(x: &[f64], q: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let pos = q * (x.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    x[lo] + (pos - lo as f64) * (x[hi] - x[lo])
}

fn summarize_estimator(
    idx: usize,
    est: &EstimatorSpec,
    records: &[RepRecord],
    names: &[String],
    truth: &[f64],
    z: f64,
) -> EstimatorSummary {
    let mut failed = 0;
    let mut non_converged = 0;
    let mut used: Vec<&RepFit> = Vec::new();
    for r in records {
        match &r.fits[idx] {
            None => failed += 1,
            Some(f) if !f.converged => non_converged += 1,
            Some(f) => used.push(f),
        }
    }
    let m = used.len() as f64;
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let vals: Vec<f64> = used.iter().map(|f| f.beta[c]).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let std = if used.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            let with_se: Vec<&&RepFit> = used.iter().filter(|f| f.se.len() == f.beta.len()).collect();
            let k = with_se.len() as f64;
            let mean_se = (!with_se.is_empty()).then(|| with_se.iter().map(|f| f.se[c]).sum::<f64>() / k);
            let coverage = (!with_se.is_empty()).then(|| {
                with_se.iter().filter(|f| (f.beta[c] - truth[c]).abs() <= z * f.se[c]).count() as f64 / k
            });
            CoefSummary {
                name: name.clone(),
                truth: truth[c],
                mean,
                bias: mean - truth[c],
                std,
                mean_se,
                coverage,
            }
        })
        .collect();
    let rho = (est.estimator == Estimator::MixedFree).then(|| {
        let mut r: Vec<f64> = used.iter().filter_map(|f| f.rho).collect();
        r.sort_by(f64::total_cmp);
        RhoSummary {
            mean: r.iter().sum::<f64>() / r.len() as f64,
            median: quantile_sorted(&r, 0.5),
            q25: quantile_sorted(&r, 0.25),
            q75: quantile_sorted(&r, 0.75),
            boundary: used.iter().filter(|f| f.rho_boundary).count(),
        }
    });
    EstimatorSummary {
        label: est.label.clone(),
        used: used.len(),
        failed,
        non_converged,
        coefficients,
        rho,
    }
}

/// Runs `reps` independent replications of `spec`. Replication `r` uses the
/// seed `derive_seed(spec.seed, r)`, and summaries are aggregated in
/// replication order, so results do not depend on `workers` (0 keeps the
/// current thread pool).
pub fn replicate(spec: &DgpSpec, cfg: &ReplicationConfig, reps: usize, workers: usize) -> Result<ReplicationSummary> {
    spec.validate()?;
    if reps == 0 {
        return Err(Error::domain("need at least one replication"));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::domain("confidence level must lie in (0, 1)"));
    }
    let run = || -> Vec<RepRecord> { (0..reps).into_par_iter().map(|r| one_rep(spec, cfg, r)).collect() };
    let records = if workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Io(e.to_string()))?
            .install(run)
    };
    let (probe, truth) = generate(&DgpSpec {
        n: 1,
        ..spec.clone()
    })?;
    let z = std_normal_quantile(0.5 + cfg.level / 2.0);
    let estimators = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(i, e)| summarize_estimator(i, e, &records, probe.columns(), &truth, z))
        .collect();
    let vuong = cfg.vuong.map(|_| {
        let stats: Vec<f64> = records.iter().filter_map(|r| r.vuong).collect();
        let m = stats.len() as f64;
        let frac = |pred: &dyn Fn(f64) -> bool| stats.iter().filter(|&&s| pred(s)).count() as f64 / m;
        VuongSummary {
            used: stats.len(),
            frac_negative: frac(&|s| s < 0.0),
            frac_favor_first: frac(&|s| s < -Z_ONE_SIDED_5),
            frac_positive: frac(&|s| s > 0.0),
            frac_favor_second: frac(&|s| s > Z_ONE_SIDED_5),
        }
    });
    let hausman = cfg.hausman_subset.map(|_| {
        let outcomes: Vec<bool> = records.iter().filter_map(|r| r.hausman_reject).collect();
        HausmanSummary {
            used: outcomes.len(),
            failed: reps - outcomes.len(),
            rejection_rate: outcomes.iter().filter(|&&x| x).count() as f64 / outcomes.len() as f64,
        }
    });
    Ok(ReplicationSummary {
        spec: spec.clone(),
        reps,
        level: cfg.level,
        estimators,
        vuong,
        hausman,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub arch: String,
    pub os: String,
    pub cpu: String,
    pub threads: usize,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            cpu,
            threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub js: Vec<usize>,
    pub n: usize,
    pub l: usize,
    pub families: Vec<ErrorFamily>,
    pub repeats: usize,
    pub seed: u64,
    pub ghk: GhkConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            js: vec![3, 5, 8, 12],
            n: 500,
            l: 3,
            families: vec![ErrorFamily::Levi, ErrorFamily::Sevi],
            repeats: 3,
            seed: 0,
            ghk: FitOptions::default().ghk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub j: usize,
    pub family: String,
    pub n: usize,
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub hardware: HardwareInfo,
    pub ghk_draws: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn median(&self, j: usize, family: ErrorFamily) -> Option<f64> {
        let name = family.to_string();
        self.rows
            .iter()
            .find(|r| r.j == j && r.family == name)
            .map(|r| r.median_seconds)
    }

    pub fn to_csv(&self) -> Result<String> {
        crate::io::rows_to_csv(&self.rows)
    }
}

/// Wall-clock fit times on SEVI-generated heteroskedastic data with
/// coefficients `(1, 2, 1, 1, 2, 1, ...)`. Absolute numbers are machine
/// dependent; the ratios between families are the meaningful output.
pub fn timing_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::domain("need at least one timing repeat"));
    }
    let beta0: Vec<f64> = (0..cfg.l).map(|c| if c % 3 == 1 { 2.0 } else { 1.0 }).collect();
    let mut rows = Vec::new();
    for &j in &cfg.js {
        let (design, _) = generate(&DgpSpec {
            j,
            n: cfg.n,
            l: cfg.l,
            beta0: beta0.clone(),
            attr_law: AttrLaw::Heteroskedastic,
            family: ErrorFamily::Sevi,
            seed: derive_seed(cfg.seed, j as u64),
        })?;
        for &family in &cfg.families {
            let opts = FitOptions {
                ghk: cfg.ghk,
                compute_vcov: false,
                ..FitOptions::default()
            };
            let mut times = Vec::with_capacity(cfg.repeats);
            let mut last = None;
            for _ in 0..cfg.repeats {
                let t = Instant::now();
                let f = fit(&design, family, &opts)?;
                times.push(t.elapsed().as_secs_f64());
                last = Some(f);
            }
            times.sort_by(f64::total_cmp);
            let f = last.expect("at least one repeat");
            rows.push(BenchRow {
                j,
                family: family.to_string(),
                n: cfg.n,
                median_seconds: quantile_sorted(&times, 0.5),
                min_seconds: times[0],
                iterations: f.iterations,
                converged: f.converged,
            });
        }
    }
    Ok(BenchReport {
        hardware: HardwareInfo::detect(),
        ghk_draws: cfg.ghk.draws,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub alternative: usize,
    pub utility: f64,
    pub levi: f64,
    pub sevi: f64,
    pub norm_ghk: f64,
    pub norm_mc: f64,
}

/// Choice shares of each family at fixed utilities. The probit column is
/// given both by GHK and by a crude argmax simulation with `mc_draws` draws.
pub fn share_table(v: &[f64], ghk: &GhkConfig, mc_draws: usize, seed: u64) -> Result<Vec<ShareRow>> {
    let u = UtilityVector::new(v.to_vec())?;
    let levi = probabilities(&u, ErrorFamily::Levi, TruncationPolicy::Full, ghk)?;
    let sevi = probabilities(&u, ErrorFamily::Sevi, TruncationPolicy::Full, ghk)?;
    let ghk_p = probs_norm(&u, ghk)?;
    let normal = Evd::matched_normal();
    let mut counts = vec![0u64; v.len()];
    let mut rng = stream(seed, 0);
    for _ in 0..mc_draws {
        let mut best = 0;
        let mut top = f64::NEG_INFINITY;
        for (k, x) in v.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let s = x + normal.variance().sqrt() * z;
            if s > top {
                top = s;
                best = k;
            }
        }
        counts[best] += 1;
    }
    Ok((0..v.len())
        .map(|k| ShareRow {
            alternative: k + 1,
            utility: v[k],
            levi: levi[k],
            sevi: sevi[k],
            norm_ghk: ghk_p[k],
            norm_mc: if mc_draws == 0 { 0.0 } else { counts[k] as f64 / mc_draws as f64 },
        })
        .collect())
}

/// The five-alternative share illustration.
pub fn shares5(ghk: &GhkConfig, mc_draws: usize, seed: u64) -> Result<Vec<ShareRow>> {
    share_table(&FIGURE_UTILITIES, ghk, mc_draws, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DprPoint {
    pub s2: f64,
    pub s3: f64,
    /// `P_2/P_1` under SEVI with three alternatives minus its two-alternative
    /// value `s2`.
    pub dpr: f64,
}

/// Probability-ratio differences on the grid `s2, s3 in {step, 2 step, ...,
/// max}` with `s1 = 1`.
pub fn dpr_grid(step: f64, max: f64) -> Result<Vec<DprPoint>> {
    if !(step > 0.0 && max >= step) {
        return Err(Error::domain("grid step must be positive and not exceed the maximum"));
    }
    let k = (max / step + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(k * k);
    for a in 1..=k {
        for b in 1..=k {
            let (s2, s3) = (a as f64 * step, b as f64 * step);
            let u = UtilityVector::new(vec![0.0, s2.ln(), s3.ln()])?;
            let p1 = prob_sevi(&u, 0, TruncationPolicy::Full)?;
            let p2 = prob_sevi(&u, 1, TruncationPolicy::Full)?;
            out.push(DprPoint { s2, s3, dpr: p2 / p1 - s2 });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareCheck {
    pub alternative: usize,
    pub empirical: f64,
    /// Average model probability at the true coefficients.
    pub theoretical: f64,
    pub se: f64,
}

/// Empirical choice shares of a generated sample against average model
/// probabilities at the true coefficients (SEVI, LEVI or Mixed truth).
pub fn share_check(spec: &DgpSpec) -> Result<Vec<ShareCheck>> {
    let (design, beta) = generate(spec)?;
    let j = spec.j;
    let mut emp = vec![0.0; j];
    let mut theo = vec![0.0; j];
    let policy = TruncationPolicy::default_for(j);
    for i in 0..design.n() {
        emp[design.situations()[i].chosen] += 1.0;
        let u = design.utility_vector(i, &beta)?;
        for (k, t) in theo.iter_mut().enumerate() {
            *t += match spec.family {
                ErrorFamily::Levi => prob_levi(&u, k)?,
                f => crate::kernel::prob(&u, k, f, policy)?,
            };
        }
    }
    let n = design.n() as f64;
    Ok((0..j)
        .map(|k| {
            let p = theo[k] / n;
            ShareCheck {
                alternative: k + 1,
                empirical: emp[k] / n,
                theoretical: p,
                se: (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_is_standardized() {
        for j in 2..30 {
            let w = omega(j);
            let mean = w.iter().sum::<f64>() / j as f64;
            let var = w.iter().map(|x| x * x).sum::<f64>() / j as f64 - mean * mean;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    fn spec(j: usize, family: ErrorFamily, n: usize) -> DgpSpec {
        DgpSpec {
            j,
            n,
            l: 3,
            beta0: vec![1.0, 2.0, 1.0],
            attr_law: AttrLaw::Heteroskedastic,
            family,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(5, ErrorFamily::Sevi, 200)).unwrap();
        let b = generate(&spec(5, ErrorFamily::Sevi, 200)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_coefficients_give_uniform_shares() {
        let s = DgpSpec {
            beta0: vec![0.0; 3],
            ..spec(4, ErrorFamily::Sevi, 40_000)
        };
        let (d, _) = generate(&s).unwrap();
        let mut counts = [0.0f64; 4];
        for sit in d.situations() {
            counts[sit.chosen] += 1.0;
        }
        let se = (0.25f64 * 0.75 / 40_000.0).sqrt();
        for c in counts {
            assert!((c / 40_000.0 - 0.25).abs() < 4.0 * se);
        }
    }

    #[test]
    fn fixed_utilities_become_constants() {
        let s = DgpSpec {
            j: 3,
            n: 5,
            l: 0,
            beta0: vec![],
            attr_law: AttrLaw::FixedUtilities { v: vec![1.0, 0.5, 0.25] },
            family: ErrorFamily::Levi,
            seed: 1,
        };
        let (d, beta) = generate(&s).unwrap();
        assert_eq!(beta, vec![0.75, 0.25]);
        assert_eq!(d.columns(), &["asc:1".to_string(), "asc:2".to_string()]);
        let u = d.utility_vector(0, &beta).unwrap();
        assert_eq!(u.values(), &[0.75, 0.25, 0.0]);
    }

    #[test]
    fn empirical_shares_match_model_probabilities() {
        for j in [2, 5, 8, 11] {
            for family in [ErrorFamily::Sevi, ErrorFamily::Levi] {
                let rows = share_check(&spec(j, family, 20_000)).unwrap();
                for r in rows {
                    assert!(
                        (r.empirical - r.theoretical).abs() <= 3.5 * r.se.max(1e-4),
                        "J={j} {family} alt {}: {} vs {}",
                        r.alternative,
                        r.empirical,
                        r.theoretical
                    );
                }
            }
        }
    }

    #[test]
    fn single_replication_summary_is_that_replication() {
        let s = spec(4, ErrorFamily::Sevi, 300);
        let cfg = ReplicationConfig::mle_qmle();
        let sum = replicate(&s, &cfg, 1, 1).unwrap();
        let rec = &sum.records[0];
        let fit0 = rec.fits[0].as_ref().unwrap();
        let mle = sum.estimator("mle").unwrap();
        for (c, coef) in mle.coefficients.iter().enumerate() {
            assert_eq!(coef.mean, fit0.beta[c]);
            assert_eq!(coef.mean_se, Some(fit0.se[c]));
            assert_eq!(coef.std, 0.0);
        }
    }

    #[test]
    fn replication_ignores_worker_count() {
        let s = spec(3, ErrorFamily::Sevi, 150);
        let cfg = ReplicationConfig::mle_qmle();
        let a = replicate(&s, &cfg, 4, 1).unwrap();
        let b = replicate(&s, &cfg, 4, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dpr_vanishes_at_equal_initial_shares() {
        let g = dpr_grid(0.25, 3.0).unwrap();
        assert_eq!(g.len(), 144);
        for p in g.iter().filter(|p| (p.s2 - 1.0).abs() < 1e-12) {
            assert!(p.dpr.abs() < 1e-10);
        }
        assert!(g.iter().any(|p| p.dpr.abs() > 1e-3));
    }
}
