//! `sevi` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sevi_core::estimation::{fit, fit_mixed, FitOptions, FitResult, SeKind};
use sevi_core::io::{
    predict, rows_to_csv, write_atomic, FitDocument, LongTable, ModelSpecFile, PredictScenario, ResultDocument,
};
use sevi_core::selection::{ic_table, vuong};
use sevi_core::sim::{
    dpr_grid, generate, replicate, shares5, timing_bench, AttrLaw, BenchConfig, DgpSpec, Estimator, EstimatorSpec,
    ReplicationConfig,
};
use sevi_core::welfare::{expected_cv, invert_shares, InvertOptions, Scenario, WelfareQuery};
use sevi_core::{Error, ErrorFamily, GhkConfig, Result, TruncationPolicy};

#[derive(Parser, Debug)]
#[command(name = "sevi", version, about = "Random utility models with SEVI, LEVI, probit and mixed errors")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Seed for simulation and GHK draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 uses all cores).
    #[arg(long, global = true, env = "SEVI_THREADS", default_value_t = 0)]
    threads: usize,
    /// Truncation policy: full, maxcard=K or tol=X.
    #[arg(long, global = true)]
    truncation: Option<TruncationPolicy>,
    /// Standard errors: plain, sandwich or cluster.
    #[arg(long, global = true)]
    se: Option<SeKind>,
    /// GHK draws for probit fits.
    #[arg(long, global = true, default_value_t = 500)]
    ghk_draws: usize,
    /// Output file; standard output when absent.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one model to a long-format data set.
    Fit(FitArgs),
    /// Choice probabilities for new data under a fitted model.
    Predict(PredictArgs),
    /// Simulate a data set or emit figure data.
    Simulate(SimulateArgs),
    /// Monte Carlo replications of an estimation experiment.
    Replicate(ReplicateArgs),
    /// Fit several families and compare them.
    Compare(CompareArgs),
    /// Expected compensating variation under a fitted model.
    Welfare(WelfareArgs),
    /// Utilities that reproduce given market shares.
    InvertShares(InvertArgs),
    /// Fit-time benchmark across families and choice-set sizes.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Long-format CSV.
    #[arg(long)]
    data: PathBuf,
    /// Model specification JSON.
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Overrides the spec family; `mixed` estimates the mixing probability.
    #[arg(long)]
    family: Option<String>,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "sevi,levi")]
    families: Vec<String>,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Result document written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Data to predict; the choice column is optional.
    #[arg(long)]
    data: PathBuf,
    /// Scenario JSON with `available_only`, `remove` and `utility_shift`.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Keep only these alternatives.
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<String>>,
    /// Remove these alternatives.
    #[arg(long, value_delimiter = ',')]
    remove: Vec<String>,
    /// Utility shift as `alternative=delta`; repeatable.
    #[arg(long)]
    shift: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct DgpArgs {
    /// Number of alternatives.
    #[arg(long, default_value_t = 5)]
    j: usize,
    /// Number of situations.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// True coefficients; their count sets the number of covariates.
    #[arg(long, value_delimiter = ',', default_value = "1,2,1")]
    beta: Vec<f64>,
    /// heteroskedastic, homoskedastic or fixed.
    #[arg(long, default_value = "heteroskedastic")]
    law: String,
    /// Utilities for the fixed law.
    #[arg(long, value_delimiter = ',')]
    utilities: Vec<f64>,
    /// Error family of the data generating process.
    #[arg(long, default_value = "sevi")]
    truth: ErrorFamily,
}

impl DgpArgs {
    fn spec(&self, seed: u64) -> Result<DgpSpec> {
        let attr_law = match self.law.as_str() {
            "heteroskedastic" => AttrLaw::Heteroskedastic,
            "homoskedastic" => AttrLaw::Homoskedastic,
            "fixed" => AttrLaw::FixedUtilities {
                v: self.utilities.clone(),
            },
            other => return Err(Error::validation(format!("unknown covariate law '{other}'"))),
        };
        let spec = DgpSpec {
            j: self.j,
            n: self.n,
            l: self.beta.len(),
            beta0: self.beta.clone(),
            attr_law,
            family: self.truth,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Figure data instead of a data set: shares5 or dpr.
    #[arg(long)]
    figure: Option<String>,
    /// Argmax draws for the probit column of shares5.
    #[arg(long, default_value_t = 200_000)]
    mc_draws: usize,
    /// Grid step and maximum for dpr.
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 3.0)]
    max: f64,
    /// Where to write a matching model spec for a simulated data set.
    #[arg(long)]
    spec_out: Option<PathBuf>,
    #[command(flatten)]
    dgp: DgpArgs,
}

#[derive(Args, Debug)]
struct ReplicateArgs {
    #[command(flatten)]
    dgp: DgpArgs,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Estimators as `label=family@se`; family `mixed` estimates the mixing
    /// probability.
    #[arg(long, value_delimiter = ',', default_value = "mle=sevi@plain,qmle=levi@sandwich")]
    estimators: Vec<String>,
    /// Vuong test between two estimator labels, `first,second`.
    #[arg(long, value_delimiter = ',')]
    vuong: Option<Vec<String>>,
    /// Alternatives (1-based) of the IIA test subset.
    #[arg(long, value_delimiter = ',')]
    hausman_subset: Option<Vec<usize>>,
    /// Confidence level for coverage.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Per-coefficient summary CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WelfareArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// price or removal.
    #[arg(long)]
    scenario: String,
    /// Alternative whose price changes or which is removed.
    #[arg(long)]
    alternative: String,
    /// Price change in currency units.
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    /// Marginal utility of income.
    #[arg(long, conflicts_with = "income_coef")]
    lambda: Option<f64>,
    /// Price coefficient whose negative is the marginal utility of income.
    #[arg(long)]
    income_coef: Option<String>,
}

#[derive(Args, Debug)]
struct InvertArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    shares: Vec<f64>,
    #[arg(long, default_value = "sevi")]
    family: ErrorFamily,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "3,5,8,12")]
    js: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    l: usize,
    #[arg(long, value_delimiter = ',', default_value = "levi,sevi,norm")]
    families: Vec<ErrorFamily>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Timing table CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Family requested on the command line.
#[derive(Debug, Clone, Copy)]
enum FamilyChoice {
    Fixed(ErrorFamily),
    MixedFree,
}

impl FromStr for FamilyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("mixed") {
            Ok(FamilyChoice::MixedFree)
        } else {
            s.parse().map(FamilyChoice::Fixed)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fit_options(g: &Global, spec: &ModelSpecFile, max_iter: usize) -> FitOptions {
    let mut opts = FitOptions {
        max_iter,
        policy: g.truncation.or(spec.truncation),
        se: g.se.unwrap_or(spec.se),
        ..FitOptions::default()
    };
    opts.ghk.seed = g.seed;
    opts.ghk.draws = g.ghk_draws;
    opts
}

fn load(data: &DataArgs) -> Result<(ModelSpecFile, LongTable)> {
    let spec = ModelSpecFile::read(&data.spec)?;
    let table = LongTable::read(&data.data, &spec, true)?;
    Ok((spec, table))
}

/// Fits `choice` on the spec's design. The family is given in the user's
/// direction and mirrored for cost minimization.
fn fit_choice(
    spec: &ModelSpecFile,
    table: &LongTable,
    choice: FamilyChoice,
    opts: &FitOptions,
) -> Result<(FitResult, FitDocument)> {
    let mut spec = spec.clone();
    let design = table.design(&spec)?;
    let result = match choice {
        FamilyChoice::MixedFree => fit_mixed(&design, opts)?,
        FamilyChoice::Fixed(family) => {
            spec.family = family;
            fit(&design, spec.kernel_family(), opts)?
        }
    };
    let doc = FitDocument::new(&result, spec.direction);
    Ok((result, doc))
}

fn non_convergence(fits: &[FitResult]) -> Result<()> {
    match fits.iter().find(|f| !f.converged) {
        Some(f) => Err(Error::NonConvergence {
            iterations: f.iterations,
            residual: f.gradient_norm,
        }),
        None => Ok(()),
    }
}

fn cmd_fit(g: &Global, a: &FitArgs) -> Result<()> {
    let (mut spec, table) = load(&a.data)?;
    let choice = match &a.family {
        Some(f) => f.parse()?,
        None => FamilyChoice::Fixed(spec.family),
    };
    if let FamilyChoice::Fixed(f) = choice {
        spec.family = f;
    }
    let opts = fit_options(g, &spec, a.max_iter);
    let (result, fdoc) = fit_choice(&spec, &table, choice, &opts)?;
    let mut doc = ResultDocument::new("fit");
    doc.seed = Some(g.seed);
    doc.spec = Some(spec);
    doc.fits.push(fdoc);
    emit(g.out.as_deref(), &doc.to_json()?)?;
    non_convergence(&[result])
}

fn cmd_compare(g: &Global, a: &CompareArgs) -> Result<()> {
    let (spec, table) = load(&a.data)?;
    let opts = fit_options(g, &spec, a.max_iter);
    let mut results = Vec::new();
    let mut doc = ResultDocument::new("compare");
    for name in &a.families {
        let (r, d) = fit_choice(&spec, &table, name.parse()?, &opts)?;
        results.push(r);
        doc.fits.push(d);
    }
    doc.ic_table = Some(ic_table(&results)?);
    for i in 0..results.len() {
        for k in i + 1..results.len() {
            let (x, y) = (&results[i], &results[k]);
            if x.n_params() == y.n_params() && x.rho_hat.is_some() == y.rho_hat.is_some() {
                doc.vuong.push(vuong(x, y)?);
            }
        }
    }
    doc.seed = Some(g.seed);
    doc.spec = Some(spec);
    emit(g.out.as_deref(), &doc.to_json()?)?;
    non_convergence(&results)
}

fn read_fit(path: &Path) -> Result<(ModelSpecFile, FitDocument)> {
    let doc = ResultDocument::read(path)?;
    let spec = doc
        .spec
        .ok_or_else(|| Error::validation("result document carries no model spec"))?;
    let fit = doc
        .fits
        .into_iter()
        .next()
        .ok_or_else(|| Error::validation("result document carries no fit"))?;
    Ok((spec, fit))
}

fn cmd_predict(g: &Global, a: &PredictArgs) -> Result<()> {
    let (spec, fdoc) = read_fit(&a.fit)?;
    let table = LongTable::read(&a.data, &spec, false)?;
    let mut scenario = match &a.scenario {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<PredictScenario>(&text)
                .map_err(|e| Error::validation(format!("scenario: {e}")))?
        }
        None => PredictScenario::default(),
    };
    if let Some(only) = &a.only {
        scenario.available_only = Some(only.clone());
    }
    scenario.remove.extend(a.remove.iter().cloned());
    for s in &a.shift {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("shift '{s}' must look like alternative=delta")))?;
        let delta: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("shift '{s}' has a non-numeric delta")))?;
        scenario.utility_shift.insert(name.trim().to_string(), delta);
    }
    let rows = predict(&fdoc, &spec, &table, &scenario)?;
    emit(g.out.as_deref(), &rows_to_csv(&rows)?)
}

fn cmd_simulate(g: &Global, a: &SimulateArgs) -> Result<()> {
    match a.figure.as_deref() {
        Some("shares5") => {
            let ghk = GhkConfig {
                draws: g.ghk_draws,
                seed: g.seed,
                ..GhkConfig::default()
            };
            emit(g.out.as_deref(), &rows_to_csv(&shares5(&ghk, a.mc_draws, g.seed)?)?)
        }
        Some("dpr") => emit(g.out.as_deref(), &rows_to_csv(&dpr_grid(a.step, a.max)?)?),
        Some(other) => Err(Error::validation(format!("unknown figure '{other}'; use shares5 or dpr"))),
        None => {
            let spec = a.dgp.spec(g.seed)?;
            let (design, _) = generate(&spec)?;
            let table = LongTable::from_design(&design);
            emit(g.out.as_deref(), &table.to_csv()?)?;
            if let Some(p) = &a.spec_out {
                let model = ModelSpecFile::from_json(&json!({ "generic": design.columns() }).to_string())?;
                let text = serde_json::to_string_pretty(&model).map_err(|e| Error::Io(e.to_string()))?;
                write_atomic(p, &(text + "\n"))?;
            }
            Ok(())
        }
    }
}

fn parse_estimator(s: &str) -> Result<EstimatorSpec> {
    let (label, rest) = s
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("estimator '{s}' must look like label=family@se")))?;
    let (family, se) = rest.split_once('@').unwrap_or((rest, "plain"));
    let estimator = match family.parse::<FamilyChoice>()? {
        FamilyChoice::Fixed(f) => Estimator::Family(f),
        FamilyChoice::MixedFree => Estimator::MixedFree,
    };
    Ok(EstimatorSpec {
        label: label.trim().to_string(),
        estimator,
        se: se.parse()?,
    })
}

fn cmd_replicate(g: &Global, a: &ReplicateArgs) -> Result<()> {
    let spec = a.dgp.spec(g.seed)?;
    let estimators = a
        .estimators
        .iter()
        .map(|s| parse_estimator(s))
        .collect::<Result<Vec<_>>>()?;
    let index = |label: &str| {
        estimators
            .iter()
            .position(|e| e.label == label)
            .ok_or_else(|| Error::validation(format!("no estimator labelled '{label}'")))
    };
    let vuong = match &a.vuong {
        Some(pair) if pair.len() == 2 => Some((index(&pair[0])?, index(&pair[1])?)),
        Some(_) => return Err(Error::validation("--vuong takes exactly two estimator labels")),
        None => None,
    };
    let hausman_subset = match &a.hausman_subset {
        Some(alts) => {
            let mut m = 0u64;
            for &k in alts {
                if k == 0 || k > spec.j {
                    return Err(Error::validation(format!("subset alternative {k} is outside 1..={}", spec.j)));
                }
                m |= 1 << (k - 1);
            }
            Some(m)
        }
        None => None,
    };
    let mut fit_opts = FitOptions {
        policy: g.truncation,
        ..FitOptions::default()
    };
    fit_opts.ghk.draws = g.ghk_draws;
    fit_opts.ghk.seed = g.seed;
    let cfg = ReplicationConfig {
        estimators,
        vuong,
        hausman_subset,
        fit: fit_opts,
        level: a.level,
    };
    let summary = replicate(&spec, &cfg, a.reps, 0)?;
    if let Some(p) = &a.csv {
        write_atomic(p, &summary.to_csv()?)?;
    }
    let mut doc = ResultDocument::new("replicate");
    doc.seed = Some(g.seed);
    doc.payload = Some(serde_json::to_value(&summary).map_err(|e| Error::Io(e.to_string()))?);
    emit(g.out.as_deref(), &doc.to_json()?)
}

fn cmd_welfare(g: &Global, a: &WelfareArgs) -> Result<()> {
    let (spec, fdoc) = read_fit(&a.fit)?;
    let table = LongTable::read(&a.data, &spec, false)?;
    let design = table.design(&spec)?;
    if fdoc.names() != design.columns() {
        return Err(Error::validation("data columns do not match the fitted columns"));
    }
    let beta = fdoc.beta();
    let lambda = match (a.lambda, &a.income_coef) {
        (Some(l), _) => l,
        (None, Some(name)) => {
            let k = fdoc
                .names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::validation(format!("no coefficient named '{name}'")))?;
            -beta[k]
        }
        (None, None) => return Err(Error::validation("give --lambda or --income-coef")),
    };
    let alt = design
        .alternatives()
        .iter()
        .position(|x| x == &a.alternative)
        .ok_or_else(|| Error::validation(format!("unknown alternative '{}'", a.alternative)))?;
    let scenario = match a.scenario.as_str() {
        "price" => Scenario::PriceChange { alt, delta: a.delta },
        "removal" => Scenario::Removal { alt },
        other => return Err(Error::validation(format!("unknown welfare scenario '{other}'"))),
    };
    let rows = (0..design.n())
        .map(|i| design.utility_vector(i, &beta))
        .collect::<Result<Vec<_>>>()?;
    let n_rows = rows.len();
    let cv = expected_cv(&WelfareQuery { rows, lambda, scenario }, fdoc.kernel_family)?;
    let mut doc = ResultDocument::new("welfare");
    doc.payload = Some(json!({
        "scenario": scenario,
        "alternative": a.alternative,
        "lambda": lambda,
        "family": fdoc.family,
        "rows": n_rows,
        "expected_cv": cv,
    }));
    emit(g.out.as_deref(), &doc.to_json()?)
}

fn cmd_invert(g: &Global, a: &InvertArgs) -> Result<()> {
    let v = invert_shares(&a.shares, a.family, InvertOptions::default())?;
    let mut doc = ResultDocument::new("invert-shares");
    doc.payload = Some(json!({
        "family": a.family,
        "shares": a.shares,
        "utilities": v.values(),
    }));
    emit(g.out.as_deref(), &doc.to_json()?)
}

fn cmd_bench(g: &Global, a: &BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig {
        js: a.js.clone(),
        n: a.n,
        l: a.l,
        families: a.families.clone(),
        repeats: a.repeats,
        seed: g.seed,
        ..BenchConfig::default()
    };
    cfg.ghk.draws = g.ghk_draws;
    cfg.ghk.seed = g.seed;
    let report = timing_bench(&cfg)?;
    if let Some(p) = &a.csv {
        write_atomic(p, &report.to_csv()?)?;
    }
    let mut doc = ResultDocument::new("bench");
    doc.seed = Some(g.seed);
    doc.payload = Some(serde_json::to_value(&report).map_err(|e| Error::Io(e.to_string()))?);
    emit(g.out.as_deref(), &doc.to_json()?)
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Fit(a) => cmd_fit(g, a),
        Command::Predict(a) => cmd_predict(g, a),
        Command::Simulate(a) => cmd_simulate(g, a),
        Command::Replicate(a) => cmd_replicate(g, a),
        Command::Compare(a) => cmd_compare(g, a),
        Command::Welfare(a) => cmd_welfare(g, a),
        Command::InvertShares(a) => cmd_invert(g, a),
        Command::Bench(a) => cmd_bench(g, a),
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    let err = json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    eprintln!("{err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("usage", e.to_string().trim(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}
