//! Long-format data ingestion, model specifications, result documents and
//! prediction.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrix, Situation};
use crate::error::{Error, Result};
use crate::estimation::{FitResult, SeKind};
use crate::kernel::{probabilities, ErrorFamily, TruncationPolicy, UtilityVector};
use crate::probit::GhkConfig;
use crate::selection::{IcRow, VuongReport};

/// Version of the result document layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const SCHEMA_NAME: &str = "sevi-result";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Maximize,
    /// Choices minimize a cost; the design is negated before fitting.
    Minimize,
}

fn default_situation() -> String {
    "situation_id".into()
}
fn default_alternative() -> String {
    "alternative_id".into()
}
fn default_chosen() -> String {
    "chosen".into()
}
fn default_available() -> String {
    "available".into()
}
fn default_cluster() -> String {
    "cluster_id".into()
}

/// Names of the key columns of a long table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyColumns {
    #[serde(default = "default_situation")]
    pub situation: String,
    #[serde(default = "default_alternative")]
    pub alternative: String,
    #[serde(default = "default_chosen")]
    pub chosen: String,
    #[serde(default = "default_available")]
    pub available: String,
    #[serde(default = "default_cluster")]
    pub cluster: String,
}

impl Default for KeyColumns {
    fn default() -> Self {
        Self {
            situation: default_situation(),
            alternative: default_alternative(),
            chosen: default_chosen(),
            available: default_available(),
            cluster: default_cluster(),
        }
    }
}

/// Model specification read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecFile {
    #[serde(default)]
    pub keys: KeyColumns,
    /// Alternative order; order of first appearance in the data when empty.
    #[serde(default)]
    pub alternatives: Vec<String>,
    /// Covariates with one coefficient shared by all alternatives.
    #[serde(default)]
    pub generic: Vec<String>,
    #[serde(default)]
    pub alt_specific_constants: bool,
    /// Normalized alternative; the last alternative when absent.
    #[serde(default)]
    pub base: Option<String>,
    /// Situation-level covariates interacted with non-base dummies.
    #[serde(default)]
    pub case_specific: Vec<String>,
    /// Alternative-varying covariates with one coefficient per alternative.
    #[serde(default)]
    pub alt_varying_altcoef: Vec<String>,
    #[serde(default = "default_family")]
    pub family: ErrorFamily,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub truncation: Option<TruncationPolicy>,
    #[serde(default)]
    pub se: SeKind,
}

fn default_family() -> ErrorFamily {
    ErrorFamily::Sevi
}

impl ModelSpecFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::validation(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.generic.is_empty()
            && !self.alt_specific_constants
            && self.case_specific.is_empty()
            && self.alt_varying_altcoef.is_empty()
        {
            return Err(Error::validation("model spec has no coefficients"));
        }
        let mut seen = std::collections::HashSet::new();
        let keys = [
            &self.keys.situation,
            &self.keys.alternative,
            &self.keys.chosen,
            &self.keys.available,
            &self.keys.cluster,
        ];
        for c in self.covariates() {
            if keys.contains(&&c) {
                return Err(Error::validation(format!("covariate '{c}' is a key column")));
            }
            if !seen.insert(c.clone()) {
                return Err(Error::validation(format!("covariate '{c}' is listed twice")));
            }
        }
        self.family.validate()?;
        if let Some(t) = self.truncation {
            t.validate()?;
        }
        Ok(())
    }

    /// Every covariate column the spec reads, in declaration order.
    pub fn covariates(&self) -> Vec<String> {
        self.generic
            .iter()
            .chain(&self.case_specific)
            .chain(&self.alt_varying_altcoef)
            .cloned()
            .collect()
    }

    /// Error family of the maximization kernel applied to the (possibly
    /// negated) design. Minimizing a cost with LEVI errors is maximizing its
    /// negation with SEVI errors, and vice versa.
    pub fn kernel_family(&self) -> ErrorFamily {
        match self.direction {
            Direction::Maximize => self.family,
            Direction::Minimize => mirror(self.family),
        }
    }
}

/// Swaps SEVI and LEVI (and the mixing weight of a mixture).
pub fn mirror(family: ErrorFamily) -> ErrorFamily {
    match family {
        ErrorFamily::Sevi => ErrorFamily::Levi,
        ErrorFamily::Levi => ErrorFamily::Sevi,
        ErrorFamily::Norm => ErrorFamily::Norm,
        ErrorFamily::Mixed(rho) => ErrorFamily::Mixed(1.0 - rho),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub alternative: usize,
    pub chosen: bool,
    pub available: bool,
    /// Covariate cells in [`LongTable::covariates`] order; `NaN` marks an
    /// empty cell on an unavailable row.
    pub values: Vec<f64>,
    /// Line number in the source file (0 when built in memory).
    pub line: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongSituation {
    pub id: String,
    pub cluster: String,
    pub rows: Vec<LongRow>,
}

/// One row per situation and alternative.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTable {
    pub keys: KeyColumns,
    pub alternatives: Vec<String>,
    pub covariates: Vec<String>,
    pub situations: Vec<LongSituation>,
    /// Whether the source had a choice column.
    pub has_choice: bool,
}

fn parse_flag(cell: &str, column: &str, line: u64) -> Result<bool> {
    match cell.trim() {
        "1" | "1.0" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "0.0" | "false" | "FALSE" | "False" => Ok(false),
        other => Err(Error::Parse {
            row: line as usize,
            message: format!("column '{column}' must be 0 or 1, got '{other}'"),
        }),
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "NaN" | "nan" | ".")
}

impl LongTable {
    /// Reads the columns named by `spec` from a CSV with a header row. The
    /// choice column may be absent when `require_choice` is false.
    pub fn read(path: &Path, spec: &ModelSpecFile, require_choice: bool) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        Self::from_reader(file, spec, require_choice)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, spec: &ModelSpecFile, require_choice: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse {
                row: 1,
                message: e.to_string(),
            })?
            .clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let keys = &spec.keys;
        let need = |name: &str| {
            col(name).ok_or_else(|| Error::validation(format!("required column '{name}' is missing")))
        };
        let sit_col = need(&keys.situation)?;
        let alt_col = need(&keys.alternative)?;
        let chosen_col = if require_choice { Some(need(&keys.chosen)?) } else { col(&keys.chosen) };
        let avail_col = col(&keys.available);
        let cluster_col = col(&keys.cluster);
        let covariates = spec.covariates();
        let cov_cols: Vec<usize> = covariates.iter().map(|c| need(c)).collect::<Result<_>>()?;

        let mut alternatives: Vec<String> = spec.alternatives.clone();
        let mut alt_index: HashMap<String, usize> =
            alternatives.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        let fixed_alternatives = !alternatives.is_empty();
        let mut situations: Vec<LongSituation> = Vec::new();
        let mut sit_index: HashMap<String, usize> = HashMap::new();

        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                row: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let get = |c: usize| rec.get(c).unwrap_or("");
            let sid = get(sit_col).to_string();
            if sid.is_empty() {
                return Err(Error::Parse {
                    row: line as usize,
                    message: "empty situation id".into(),
                });
            }
            let alt_name = get(alt_col).to_string();
            let alt = match alt_index.get(&alt_name) {
                Some(&a) => a,
                None if fixed_alternatives => {
                    return Err(Error::Parse {
                        row: line as usize,
                        message: format!("alternative '{alt_name}' is not listed in the model spec"),
                    })
                }
                None => {
                    alternatives.push(alt_name.clone());
                    alt_index.insert(alt_name.clone(), alternatives.len() - 1);
                    alternatives.len() - 1
                }
            };
            let chosen = match chosen_col {
                Some(c) => parse_flag(get(c), &keys.chosen, line)?,
                None => false,
            };
            let available = match avail_col {
                Some(c) if !get(c).is_empty() => parse_flag(get(c), &keys.available, line)?,
                _ => true,
            };
            let mut values = Vec::with_capacity(cov_cols.len());
            for (name, &c) in covariates.iter().zip(&cov_cols) {
                let cell = get(c);
                if is_missing(cell) {
                    if available {
                        return Err(Error::Parse {
                            row: line as usize,
                            message: format!("missing value in column '{name}' on an available row"),
                        });
                    }
                    values.push(f64::NAN);
                    continue;
                }
                let x: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: line as usize,
                    message: format!("column '{name}': '{cell}' is not a number"),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse {
                        row: line as usize,
                        message: format!("column '{name}': non-finite value"),
                    });
                }
                values.push(x);
            }
            let cluster = match cluster_col {
                Some(c) if !get(c).is_empty() => get(c).to_string(),
                _ => sid.clone(),
            };
            let si = *sit_index.entry(sid.clone()).or_insert_with(|| {
                situations.push(LongSituation {
                    id: sid.clone(),
                    cluster: cluster.clone(),
                    rows: Vec::new(),
                });
                situations.len() - 1
            });
            let s = &mut situations[si];
            if s.cluster != cluster {
                return Err(Error::validation(format!(
                    "situation {sid}: rows disagree on the cluster id (line {line})"
                )));
            }
            if s.rows.iter().any(|r| r.alternative == alt) {
                return Err(Error::validation(format!(
                    "situation {sid}: alternative '{alt_name}' appears twice (line {line})"
                )));
            }
            s.rows.push(LongRow {
                alternative: alt,
                chosen,
                available,
                values,
                line,
            });
        }
        let table = Self {
            keys: keys.clone(),
            alternatives,
            covariates,
            situations,
            has_choice: chosen_col.is_some(),
        };
        table.validate()?;
        Ok(table)
    }

    /// Checks the per-situation choice and availability contract.
    pub fn validate(&self) -> Result<()> {
        if self.situations.is_empty() {
            return Err(Error::validation("data has no choice situations"));
        }
        if self.alternatives.len() < 2 || self.alternatives.len() > crate::kernel::MAX_ALTERNATIVES {
            return Err(Error::validation(format!(
                "need between 2 and 64 alternatives, found {}",
                self.alternatives.len()
            )));
        }
        for s in &self.situations {
            let n_avail = s.rows.iter().filter(|r| r.available).count();
            if n_avail < 2 {
                return Err(Error::validation(format!(
                    "situation {}: fewer than two available alternatives",
                    s.id
                )));
            }
            if !self.has_choice {
                continue;
            }
            for r in &s.rows {
                if r.chosen && !r.available {
                    return Err(Error::validation(format!(
                        "situation {}: chosen alternative '{}' is unavailable (line {})",
                        s.id, self.alternatives[r.alternative], r.line
                    )));
                }
            }
            match s.rows.iter().filter(|r| r.chosen).count() {
                1 => {}
                0 => {
                    return Err(Error::validation(format!("situation {}: no chosen alternative", s.id)))
                }
                k => {
                    return Err(Error::validation(format!(
                        "situation {}: {k} rows marked as chosen",
                        s.id
                    )))
                }
            }
        }
        Ok(())
    }

    /// Long form of a design with its column names as covariates. Cells of
    /// unavailable rows are left empty.
    pub fn from_design(design: &DesignMatrix) -> Self {
        let l = design.n_params();
        let situations = design
            .situations()
            .iter()
            .map(|s| LongSituation {
                id: s.id.clone(),
                cluster: design.cluster_ids()[s.cluster].clone(),
                rows: (0..design.n_alternatives())
                    .map(|k| {
                        let available = s.available >> k & 1 == 1;
                        LongRow {
                            alternative: k,
                            chosen: k == s.chosen,
                            available,
                            values: if available {
                                s.x[k * l..(k + 1) * l].to_vec()
                            } else {
                                vec![f64::NAN; l]
                            },
                            line: 0,
                        }
                    })
                    .collect(),
            })
            .collect();
        Self {
            keys: KeyColumns::default(),
            alternatives: design.alternatives().to_vec(),
            covariates: design.columns().to_vec(),
            situations,
            has_choice: true,
        }
    }

    /// Writes the table back as CSV. Reals use the shortest representation
    /// that parses back to the same bits.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            self.keys.situation.clone(),
            self.keys.alternative.clone(),
            self.keys.chosen.clone(),
            self.keys.available.clone(),
            self.keys.cluster.clone(),
        ];
        header.extend(self.covariates.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for s in &self.situations {
            for r in &s.rows {
                let mut rec = vec![
                    s.id.clone(),
                    self.alternatives[r.alternative].clone(),
                    u8::from(r.chosen).to_string(),
                    u8::from(r.available).to_string(),
                    s.cluster.clone(),
                ];
                rec.extend(r.values.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v:?}") }));
                w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
            .map_err(|e| Error::Io(e.to_string()))
    }

    fn base_index(&self, spec: &ModelSpecFile) -> Result<usize> {
        match &spec.base {
            Some(b) => self
                .alternatives
                .iter()
                .position(|a| a == b)
                .ok_or_else(|| Error::validation(format!("base alternative '{b}' does not occur in the data"))),
            None => Ok(self.alternatives.len() - 1),
        }
    }

    /// Design column names for `spec`.
    pub fn column_names(&self, spec: &ModelSpecFile) -> Result<Vec<String>> {
        let base = self.base_index(spec)?;
        let mut cols: Vec<String> = spec.generic.clone();
        let non_base = || self.alternatives.iter().enumerate().filter(move |(k, _)| *k != base);
        if spec.alt_specific_constants {
            cols.extend(non_base().map(|(_, a)| format!("asc:{a}")));
        }
        for z in &spec.case_specific {
            cols.extend(non_base().map(|(_, a)| format!("{z}:{a}")));
        }
        for w in &spec.alt_varying_altcoef {
            cols.extend(self.alternatives.iter().map(|a| format!("{w}:{a}")));
        }
        Ok(cols)
    }

    /// Expands the table into per-situation covariate blocks. Without a
    /// choice column, the first available alternative stands in as chosen.
    pub fn expand(&self, spec: &ModelSpecFile) -> Result<(Vec<String>, Vec<String>, Vec<Situation>)> {
        let covs = spec.covariates();
        if covs != self.covariates {
            return Err(Error::validation("table columns do not match the model spec"));
        }
        let base = self.base_index(spec)?;
        let columns = self.column_names(spec)?;
        let j = self.alternatives.len();
        let l = columns.len();
        let ng = spec.generic.len();
        let nz = spec.case_specific.len();
        let mut cluster_ids: Vec<String> = Vec::new();
        let mut cluster_index: HashMap<&str, usize> = HashMap::new();
        let slot = |k: usize| if k < base { k } else { k - 1 };
        let sign = if spec.direction == Direction::Minimize { -1.0 } else { 1.0 };
        let mut situations = Vec::with_capacity(self.situations.len());
        for s in &self.situations {
            let mut x = vec![0.0; j * l];
            let mut available = 0u64;
            let mut chosen = None;
            for r in &s.rows {
                if !r.available {
                    continue;
                }
                let k = r.alternative;
                available |= 1u64 << k;
                if r.chosen {
                    chosen = Some(k);
                }
                let row = &mut x[k * l..(k + 1) * l];
                let mut c = 0;
                for g in 0..ng {
                    row[c] = r.values[g];
                    c += 1;
                }
                if spec.alt_specific_constants {
                    if k != base {
                        row[c + slot(k)] = 1.0;
                    }
                    c += j - 1;
                }
                for z in 0..nz {
                    if k != base {
                        row[c + slot(k)] = r.values[ng + z];
                    }
                    c += j - 1;
                }
                for w in 0..spec.alt_varying_altcoef.len() {
                    row[c + k] = r.values[ng + nz + w];
                    c += j;
                }
                if sign < 0.0 {
                    row.iter_mut().for_each(|v| *v = -*v);
                }
            }
            let chosen = chosen.unwrap_or(available.trailing_zeros() as usize);
            let cluster = *cluster_index.entry(s.cluster.as_str()).or_insert_with(|| {
                cluster_ids.push(s.cluster.clone());
                cluster_ids.len() - 1
            });
            situations.push(Situation {
                id: s.id.clone(),
                x,
                chosen,
                available,
                cluster,
            });
        }
        Ok((columns, cluster_ids, situations))
    }

    /// Design matrix for fitting; needs a choice column.
    pub fn design(&self, spec: &ModelSpecFile) -> Result<DesignMatrix> {
        if !self.has_choice {
            return Err(Error::validation(format!(
                "data has no '{}' column",
                self.keys.chosen
            )));
        }
        let (columns, cluster_ids, situations) = self.expand(spec)?;
        DesignMatrix::new(self.alternatives.clone(), columns, cluster_ids, situations)
    }
}

/// Reads a CSV and builds the design for `spec`.
pub fn ingest(path: &Path, spec: &ModelSpecFile) -> Result<DesignMatrix> {
    LongTable::read(path, spec, true)?.design(spec)
}

/// Serializes rows as CSV with a header from the field names.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?).map_err(|e| Error::Io(e.to_string()))
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(path, e)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub rel_change: f64,
}

/// Serialized form of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDocument {
    /// Error family as stated by the user.
    pub family: ErrorFamily,
    pub direction: Direction,
    /// Family of the maximization kernel actually fitted.
    pub kernel_family: ErrorFamily,
    pub estimates: Vec<Estimate>,
    pub vcov: Vec<Vec<f64>>,
    pub se_kind: SeKind,
    pub nll: f64,
    pub aic: f64,
    pub bic: f64,
    pub n: usize,
    pub floored: usize,
    pub convergence: Convergence,
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
}

impl FitDocument {
    /// Document for a fit of the kernel family `fit.family` on a design
    /// built with `direction`.
    pub fn new(fit: &FitResult, direction: Direction) -> Self {
        Self {
            family: match direction {
                Direction::Maximize => fit.family,
                Direction::Minimize => mirror(fit.family),
            },
            direction,
            kernel_family: fit.family,
            estimates: fit
                .columns
                .iter()
                .zip(&fit.beta_hat)
                .enumerate()
                .map(|(k, (name, &value))| Estimate {
                    name: name.clone(),
                    value,
                    se: fit.se.get(k).copied(),
                })
                .collect(),
            vcov: fit.vcov.clone(),
            se_kind: fit.se_kind,
            nll: fit.nll,
            aic: fit.aic(),
            bic: fit.bic(),
            n: fit.n,
            floored: fit.floored,
            convergence: Convergence {
                converged: fit.converged,
                iterations: fit.iterations,
                gradient_norm: fit.gradient_norm,
                rel_change: fit.rel_change,
            },
            truncation: fit.truncation,
            ghk: fit.ghk,
            rho_hat: fit.rho_hat,
            rho_se: fit.rho_se,
            rho_boundary: fit.rho_boundary,
            fingerprint: fit.fingerprint.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.estimates.len();
        if l == 0 {
            return Err(Error::validation("fit has no estimates"));
        }
        if self.estimates.iter().any(|e| !e.value.is_finite() || e.se.is_some_and(|s| s.is_nan() || s < 0.0)) {
            return Err(Error::validation("estimates must be finite with non-negative standard errors"));
        }
        if !self.vcov.is_empty() {
            if self.vcov.len() != l || self.vcov.iter().any(|r| r.len() != l) {
                return Err(Error::validation("vcov must be L x L"));
            }
            for a in 0..l {
                for b in 0..l {
                    let (x, y) = (self.vcov[a][b], self.vcov[b][a]);
                    if !x.is_finite() || (x - y).abs() > 1e-12 * (x.abs() + y.abs()).max(1e-300) {
                        return Err(Error::validation("vcov must be finite and symmetric"));
                    }
                }
            }
        }
        if !self.nll.is_finite() {
            return Err(Error::validation("nll must be finite"));
        }
        self.family.validate()?;
        self.kernel_family.validate()?;
        self.truncation.validate()
    }

    pub fn names(&self) -> Vec<String> {
        self.estimates.iter().map(|e| e.name.clone()).collect()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.value).collect()
    }
}

/// Versioned result document written by the command-line front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultDocument {
    pub schema: String,
    pub schema_version: u32,
    pub software_version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpecFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fits: Vec<FitDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic_table: Option<Vec<IcRow>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vuong: Vec<VuongReport>,
    /// Command-specific payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

impl ResultDocument {
    pub fn new(command: &str) -> Self {
        Self {
            schema: SCHEMA_NAME.into(),
            schema_version: SCHEMA_VERSION,
            software_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: None,
            spec: None,
            fits: Vec::new(),
            ic_table: None,
            vuong: Vec::new(),
            payload: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_NAME {
            return Err(Error::validation(format!("unknown document schema '{}'", self.schema)));
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if let Some(s) = &self.spec {
            s.validate()?;
        }
        for f in &self.fits {
            f.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::validation(format!("result document: {e}")))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }
}

/// Changes applied to the data before prediction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictScenario {
    /// Keep only these alternatives (by name) in every choice set.
    #[serde(default)]
    pub available_only: Option<Vec<String>>,
    /// Remove these alternatives from every choice set.
    #[serde(default)]
    pub remove: Vec<String>,
    /// Added to the systematic utility of the named alternatives.
    #[serde(default)]
    pub utility_shift: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub situation_id: String,
    pub alternative_id: String,
    pub probability: f64,
}

fn alt_mask(names: &[String], alternatives: &[String]) -> Result<u64> {
    let mut m = 0u64;
    for n in names {
        let k = alternatives
            .iter()
            .position(|a| a == n)
            .ok_or_else(|| Error::validation(format!("unknown alternative '{n}' in scenario")))?;
        m |= 1u64 << k;
    }
    Ok(m)
}

/// Choice probabilities of every available alternative under a fitted model.
/// Restricted choice sets are handled by the kernel, not by rescaling.
pub fn predict(
    fit: &FitDocument,
    spec: &ModelSpecFile,
    table: &LongTable,
    scenario: &PredictScenario,
) -> Result<Vec<PredictionRow>> {
    fit.validate()?;
    let names = table.column_names(spec)?;
    if names != fit.names() {
        return Err(Error::validation(format!(
            "data columns {names:?} do not match the fitted columns {:?}",
            fit.names()
        )));
    }
    let (_, _, situations) = table.expand(spec)?;
    let alts = &table.alternatives;
    let keep = match &scenario.available_only {
        Some(list) => alt_mask(list, alts)?,
        None => u64::MAX,
    };
    let drop = alt_mask(&scenario.remove, alts)?;
    let mut shift = vec![0.0; alts.len()];
    for (name, &d) in &scenario.utility_shift {
        let k = alt_mask(std::slice::from_ref(name), alts)?.trailing_zeros() as usize;
        if !d.is_finite() {
            return Err(Error::validation("utility shifts must be finite"));
        }
        shift[k] = d;
    }
    let beta = fit.beta();
    let l = beta.len();
    let ghk = fit.ghk.unwrap_or_default();
    let mut out = Vec::new();
    for s in &situations {
        let mask = s.available & keep & !drop;
        if mask == 0 {
            return Err(Error::validation(format!(
                "situation {}: scenario leaves no available alternative",
                s.id
            )));
        }
        let v: Vec<f64> = (0..alts.len())
            .map(|k| {
                if mask >> k & 1 == 1 {
                    s.x[k * l..(k + 1) * l].iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>() + shift[k]
                } else {
                    0.0
                }
            })
            .collect();
        let u = UtilityVector::with_mask(v, mask)?;
        let p = probabilities(&u, fit.kernel_family, fit.truncation, &ghk)?;
        for k in crate::kernel::bits(mask) {
            out.push(PredictionRow {
                situation_id: s.id.clone(),
                alternative_id: alts[k].clone(),
                probability: p[k],
            });
        }
    }
    Ok(out)
}
