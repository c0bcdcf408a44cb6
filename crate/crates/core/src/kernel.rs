//! Closed-form choice probabilities and their derivatives.
//!
//! Under iid SEVI errors the probability that `j` is chosen is the
//! alternating subset sum
//!
//! ```text
//! P_j = 1 + sum_{l>=1} (-1)^l sum_{S subset of competitors, |S| = l} 1 / (1 + sum_{k in S} exp(v_j - v_k))
//! ```
//!
//! Subsets are visited cardinality-major so truncation stops after a layer.
//! Unavailable alternatives are dropped from the universe rather than given
//! infinite utility.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::accum::NeumaierSum;
use crate::error::{Error, Result};
use crate::probit::{self, GhkConfig};
use crate::subset::{gosper, SOFT_UNIVERSE_LIMIT};

/// Exponent differences are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 700.0;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest number of alternatives a utility vector can hold.
pub const MAX_ALTERNATIVES: usize = 64;

// Subset-sum tables are used up to this many competitors (8 MiB).
const TABLE_LIMIT: usize = 20;

/// Systematic utilities for one choice situation plus an availability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityVector {
    values: Vec<f64>,
    available: u64,
}

impl UtilityVector {
    /// All alternatives available.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let j = values.len();
        if j == 0 || j > MAX_ALTERNATIVES {
            return Err(Error::domain(format!(
                "need between 1 and {MAX_ALTERNATIVES} alternatives, got {j}"
            )));
        }
        let mask = if j == 64 { u64::MAX } else { (1u64 << j) - 1 };
        Self::with_mask(values, mask)
    }

    pub fn with_availability(values: Vec<f64>, available: &[bool]) -> Result<Self> {
        if available.len() != values.len() {
            return Err(Error::domain("availability length differs from utilities"));
        }
        let mask = available
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .fold(0u64, |m, (i, _)| m | (1u64 << i));
        Self::with_mask(values, mask)
    }

    /// Bit `k` of `available` marks alternative `k` as available.
    pub fn with_mask(values: Vec<f64>, available: u64) -> Result<Self> {
        let j = values.len();
        if j == 0 || j > MAX_ALTERNATIVES {
            return Err(Error::domain(format!(
                "need between 1 and {MAX_ALTERNATIVES} alternatives, got {j}"
            )));
        }
        if j < 64 && available >> j != 0 {
            return Err(Error::domain("availability mask has bits beyond the last alternative"));
        }
        if available == 0 {
            return Err(Error::domain("no alternative is available"));
        }
        for k in bits(available) {
            if !values[k].is_finite() {
                return Err(Error::domain(format!(
                    "utility of available alternative {k} is not finite"
                )));
            }
        }
        Ok(Self { values, available })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> u64 {
        self.available
    }

    pub fn is_available(&self, k: usize) -> bool {
        k < self.values.len() && self.available >> k & 1 == 1
    }

    pub fn n_available(&self) -> usize {
        self.available.count_ones() as usize
    }

    pub fn available_indices(&self) -> Vec<usize> {
        bits(self.available).collect()
    }

    /// Same availability with every utility negated.
    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|x| -x).collect(),
            available: self.available,
        }
    }

    /// Same vector restricted to `mask` (intersected with current availability).
    pub fn restricted(&self, mask: u64) -> Result<Self> {
        Self::with_mask(self.values.clone(), self.available & mask)
    }

    fn check(&self, j: usize) -> Result<()> {
        if !self.is_available(j) {
            return Err(Error::domain(format!("alternative {j} is not available")));
        }
        Ok(())
    }
}

/// Iterates the set bit positions of `mask` in increasing order.
#[inline]
pub(crate) fn bits(mask: u64) -> Bits {
    Bits(mask)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Bits(u64);

impl Iterator for Bits {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            None
        } else {
            let b = self.0.trailing_zeros() as usize;
            self.0 &= self.0 - 1;
            Some(b)
        }
    }
}

/// Distribution of the random utility components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ErrorFamily {
    Sevi,
    Levi,
    Norm,
    /// SEVI with probability `rho`, LEVI otherwise.
    Mixed(f64),
}

impl ErrorFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            ErrorFamily::Mixed(rho) if !(0.0..=1.0).contains(rho) => Err(Error::domain(format!(
                "mixing probability must lie in [0, 1], got {rho}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ErrorFamily::Sevi => "sevi",
            ErrorFamily::Levi => "levi",
            ErrorFamily::Norm => "norm",
            ErrorFamily::Mixed(_) => "mixed",
        }
    }
}

impl fmt::Display for ErrorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorFamily::Mixed(rho) => write!(f, "mixed:{rho}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ErrorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let fam = match lower.as_str() {
            "sevi" => ErrorFamily::Sevi,
            "levi" => ErrorFamily::Levi,
            "norm" | "normal" | "probit" => ErrorFamily::Norm,
            other => match other.strip_prefix("mixed:") {
                Some(rho) => ErrorFamily::Mixed(rho.parse().map_err(|_| {
                    Error::validation(format!("bad mixing probability in family '{s}'"))
                })?),
                None => {
                    return Err(Error::validation(format!(
                        "unknown error family '{s}' (expected sevi, levi, norm or mixed:RHO)"
                    )))
                }
            },
        };
        fam.validate()?;
        Ok(fam)
    }
}

impl TryFrom<String> for ErrorFamily {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ErrorFamily> for String {
    fn from(f: ErrorFamily) -> Self {
        f.to_string()
    }
}

/// How much of the SEVI subset expansion to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TruncationPolicy {
    Full,
    /// Keep subsets (target included) of at most `M` alternatives.
    MaxCardinality(usize),
    /// Stop once the remaining error is provably below `tol`.
    ToleranceDriven(f64),
}

impl TruncationPolicy {
    /// Full enumeration through 14 alternatives, tolerance 1e-8 beyond.
    pub fn default_for(n_alternatives: usize) -> Self {
        if n_alternatives <= 14 {
            TruncationPolicy::Full
        } else {
            TruncationPolicy::ToleranceDriven(1e-8)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationPolicy::MaxCardinality(m) if m < 2 => Err(Error::domain(format!(
                "max cardinality must be at least 2, got {m}"
            ))),
            TruncationPolicy::ToleranceDriven(t) if !(t > 0.0 && t <= 0.01) => Err(Error::domain(
                format!("truncation tolerance must lie in (0, 0.01], got {t}"),
            )),
            _ => Ok(()),
        }
    }

    fn stop(&self) -> Stop {
        match *self {
            TruncationPolicy::Full => Stop::Full,
            TruncationPolicy::MaxCardinality(m) => Stop::MaxLayer(m - 1),
            TruncationPolicy::ToleranceDriven(t) => Stop::Tol(t),
        }
    }
}

impl fmt::Display for TruncationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncationPolicy::Full => f.write_str("full"),
            TruncationPolicy::MaxCardinality(m) => write!(f, "maxcard={m}"),
            TruncationPolicy::ToleranceDriven(t) => write!(f, "tol={t:e}"),
        }
    }
}

impl FromStr for TruncationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::validation(format!("bad truncation policy '{s}'"));
        let p = if s == "full" {
            TruncationPolicy::Full
        } else if let Some(m) = s.strip_prefix("maxcard=") {
            TruncationPolicy::MaxCardinality(m.parse().map_err(|_| bad())?)
        } else if let Some(t) = s.strip_prefix("tol=") {
            TruncationPolicy::ToleranceDriven(t.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        p.validate()?;
        Ok(p)
    }
}

impl TryFrom<String> for TruncationPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TruncationPolicy> for String {
    fn from(p: TruncationPolicy) -> Self {
        p.to_string()
    }
}

/// True when full enumeration over `n_alternatives` is past the practical
/// limit; callers surface this as a warning.
pub fn exceeds_soft_limit(n_alternatives: usize) -> bool {
    n_alternatives > SOFT_UNIVERSE_LIMIT
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Stop {
    Full,
    MaxLayer(usize),
    Tol(f64),
}

/// Layer-by-layer subset sums of `vals`, visited in Gosper order.
///
/// Sums for a mask reuse the sum of the mask without its lowest bit, which
/// was produced by the previous layer.
struct SubsetSums<'a> {
    vals: &'a [f64],
    table: Vec<f64>,
}

impl<'a> SubsetSums<'a> {
    fn new(vals: &'a [f64]) -> Self {
        let table = if vals.len() <= TABLE_LIMIT {
            let mut t = vec![0.0; 1usize << vals.len()];
            t[0] = 0.0;
            t
        } else {
            Vec::new()
        };
        Self { vals, table }
    }

    /// Calls `f(mask, sum)` for every subset of size `layer`; layers must be
    /// visited in increasing order starting at 1.
    #[inline]
    fn visit_layer<F: FnMut(u64, f64)>(&mut self, layer: usize, mut f: F) {
        let n = self.vals.len();
        if layer == 0 || layer > n {
            return;
        }
        let mut mask = (1u64 << layer) - 1;
        loop {
            let t = if self.table.is_empty() {
                bits(mask).map(|k| self.vals[k]).sum()
            } else {
                let low = mask & mask.wrapping_neg();
                let t = self.table[(mask ^ low) as usize] + self.vals[low.trailing_zeros() as usize];
                self.table[mask as usize] = t;
                t
            };
            f(mask, t);
            match gosper(mask, n) {
                Some(m) => mask = m,
                None => break,
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SeviEval {
    pub value: f64,
}

#[inline]
fn ratio(diff: f64) -> f64 {
    diff.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// SEVI probability of the target from competitor ratios
/// `r_k = exp(v_target - v_k)`; optionally fills `grad[k] = dP / dv_k` for
/// each competitor.
pub(crate) fn sevi_from_ratios(r: &[f64], stop: Stop, grad: Option<&mut [f64]>) -> SeviEval {
    let n = r.len();
    if n == 0 {
        return SeviEval { value: 1.0 };
    }
    if matches!(stop, Stop::Full) && n <= FAST_FULL_LIMIT {
        let mut grad = grad;
        let value = sevi_full_table(r, grad.as_deref_mut());
        if value < SMALL_P {
            return SeviEval {
                value: sevi_quadrature(r, grad),
            };
        }
        return SeviEval { value };
    }
    let max_layer = match stop {
        Stop::MaxLayer(m) => m.min(n),
        _ => n,
    };
    let mut sums = SubsetSums::new(r);
    // 1 + sum (-1)^l S_l, and the same series with the constants cancelled
    let mut f_series = NeumaierSum::new();
    f_series.add(1.0);
    let mut g_series = NeumaierSum::new();
    let mut gacc = grad.as_ref().map(|_| vec![NeumaierSum::new(); n]);
    let mut layers = 0;
    for layer in 1..=max_layer {
        let odd = layer % 2 == 1;
        let mut lf = NeumaierSum::new();
        let mut lg = NeumaierSum::new();
        sums.visit_layer(layer, |mask, t| {
            let f = 1.0 / (1.0 + t);
            let g = if t >= 1.0 { 1.0 - f } else { t * f };
            lf.add(f);
            lg.add(g);
            if let Some(acc) = gacc.as_mut() {
                let w = if odd { -f * f } else { f * f };
                for k in bits(mask) {
                    acc[k].add(w);
                }
            }
        });
        let s = lf.value();
        let sg = lg.value();
        f_series.add(if odd { -s } else { s });
        g_series.add(if odd { sg } else { -sg });
        layers = layer;
        // P lies between consecutive partial sums, and each (l+1)-layer sum
        // is at most (n - l) / (l + 1) times the l-layer sum.
        let shrink = ((n - layer) as f64 / (layer + 1) as f64).min(1.0);
        if let Stop::Tol(tol) = stop {
            if s * shrink < tol {
                break;
            }
        }
    }
    let value = if layers == n {
        let pf = f_series.value();
        if pf < 0.5 {
            g_series.value()
        } else {
            pf
        }
    } else {
        f_series.value()
    };
    if layers == n && value < SMALL_P && !matches!(stop, Stop::MaxLayer(_)) {
        return SeviEval {
            value: sevi_quadrature(r, grad),
        };
    }
    if let (Some(g), Some(acc)) = (grad, gacc) {
        for k in 0..n {
            g[k] = acc[k].value() * r[k];
        }
    }
    SeviEval {
        value: value.clamp(0.0, 1.0),
    }
}

/// Below this value the complete expansion loses relative accuracy to
/// cancellation and the probability is integrated instead.
const SMALL_P: f64 = 1e-3;

/// Trapezoid step in `s = ln t`.
const QUAD_STEP: f64 = 0.125;

/// SEVI probability as `int_0^inf e^-t prod_k (1 - e^(-r_k t)) dt`, the
/// integral whose expansion is the subset series. With `t = e^s` the
/// integrand is analytic and log-concave in `s`, so the trapezoid rule on
/// the whole line converges geometrically and sums positive terms only.
/// Fills `grad[k] = dP / dv_k` when asked.
fn sevi_quadrature(r: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = r.len();
    let mut acc = NeumaierSum::new();
    let mut gacc = vec![0.0; if grad.is_some() { n } else { 0 }];
    let mut node = |i: i32, acc: &mut NeumaierSum| -> f64 {
        let s = f64::from(i) * QUAD_STEP;
        let t = s.exp();
        let mut lnq = s - t;
        for &rk in r {
            let x = rk * t;
            lnq += if x > 0.7 { (-(-x).exp()).ln_1p() } else { (-(-x).exp_m1()).ln() };
        }
        let q = lnq.exp();
        acc.add(q);
        for (g, &rk) in gacc.iter_mut().zip(r) {
            let x = rk * t;
            // x / (e^x - 1), the share of the factor's derivative
            let w = if x == 0.0 { 1.0 } else { x / x.exp_m1() };
            *g += q * w;
        }
        q
    };
    let mut prev = node(0, &mut acc);
    for i in 1.. {
        let q = node(i, &mut acc);
        if (q < prev && q <= 1e-20 * acc.value()) || f64::from(i) * QUAD_STEP > 7.0 {
            break;
        }
        prev = q;
    }
    prev = f64::INFINITY;
    for i in 1..4000 {
        let q = node(-i, &mut acc);
        if q < prev && q <= 1e-20 * acc.value() {
            break;
        }
        prev = q;
    }
    if let Some(g) = grad {
        for (gk, a) in g.iter_mut().zip(&gacc) {
            *gk = -QUAD_STEP * a;
        }
    }
    (QUAD_STEP * acc.value()).clamp(0.0, 1.0)
}

/// Largest competitor count handled by [`sevi_full_table`].
const FAST_FULL_LIMIT: usize = 16;

/// Block length for the compensated combination of lane sums.
const BLOCK: usize = 64;

#[derive(Default)]
struct FullScratch {
    t: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    w: Vec<f64>,
}

thread_local! {
    static FULL_SCRATCH: std::cell::RefCell<FullScratch> = std::cell::RefCell::new(FullScratch::default());
}

/// Compensated sum of four-lane partial sums over blocks of `x`.
#[inline(always)]
fn blocked_sum(x: &[f64]) -> f64 {
    let mut acc = NeumaierSum::new();
    for c in x.chunks(BLOCK) {
        acc.add(lane_sum(c));
    }
    acc.value()
}

/// Full expansion over all competitor subsets in plain mask order. Same
/// series as the layered walk; signed terms are stored and summed in blocks.
fn sevi_full_table(r: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let size = 1usize << r.len();
    FULL_SCRATCH.with(|cell| {
        let scratch = &mut *cell.borrow_mut();
        // every entry below `size` is overwritten
        for buf in [&mut scratch.t, &mut scratch.f, &mut scratch.g, &mut scratch.w] {
            if buf.len() < size {
                buf.resize(size, 0.0);
            }
        }
        full_table_body(r, scratch, grad)
    })
}

fn full_table_body(r: &[f64], s: &mut FullScratch, grad: Option<&mut [f64]>) -> f64 {
    let n = r.len();
    let size = 1usize << n;
    let FullScratch { t, f, g, w } = s;
    t[0] = 0.0;
    // subsets with highest bit k extend the subsets of bits below k;
    // `w` holds the parity sign until the terms are formed
    w[0] = 1.0;
    for (k, &rk) in r.iter().enumerate() {
        let half = 1usize << k;
        let (lo, hi) = t.split_at_mut(half);
        for (h, l) in hi[..half].iter_mut().zip(lo.iter()) {
            *h = l + rk;
        }
        let (lo, hi) = w.split_at_mut(half);
        for (h, l) in hi[..half].iter_mut().zip(lo.iter()) {
            *h = -l;
        }
    }
    // `g` is the same series with the constants cancelled, for small P
    for (((fm, gm), wm), &tm) in f[..size]
        .iter_mut()
        .zip(g[..size].iter_mut())
        .zip(w[..size].iter_mut())
        .zip(&t[..size])
    {
        let sign = *wm;
        let inv = 1.0 / (1.0 + tm);
        let fs = sign * inv;
        *fm = fs;
        *wm = fs * inv;
        *gm = if tm >= 1.0 { fs - sign } else { -fs * tm };
    }
    if let Some(gr) = grad {
        // fold out the highest bit after summing the masks that carry it
        for k in (0..n).rev() {
            let half = 1usize << k;
            let (lo, hi) = w[..2 * half].split_at_mut(half);
            gr[k] = blocked_sum(hi) * r[k];
            for (a, b) in lo.iter_mut().zip(hi.iter()) {
                *a += b;
            }
        }
    }
    let pf = 1.0 + blocked_sum(&f[1..size]);
    let value = if pf < 0.5 { blocked_sum(&g[1..size]) } else { pf };
    value.clamp(0.0, 1.0)
}

/// Four-lane sum of a short block.
#[inline(always)]
fn lane_sum(x: &[f64]) -> f64 {
    let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    let chunks = x.chunks_exact(4);
    let rest = chunks.remainder();
    for q in chunks {
        a += q[0];
        b += q[1];
        c += q[2];
        d += q[3];
    }
    let tail: f64 = rest.iter().sum();
    (a + c) + (b + d) + tail
}

fn competitor_ratios(v: &UtilityVector, j: usize) -> (Vec<usize>, Vec<f64>) {
    let vj = v.values[j];
    let idx: Vec<usize> = bits(v.available & !(1u64 << j)).collect();
    let r = idx.iter().map(|&k| ratio(vj - v.values[k])).collect();
    (idx, r)
}

/// Probability that `j` is chosen under iid SEVI errors.
pub fn prob_sevi(v: &UtilityVector, j: usize, policy: TruncationPolicy) -> Result<f64> {
    v.check(j)?;
    policy.validate()?;
    let (_, r) = competitor_ratios(v, j);
    Ok(sevi_from_ratios(&r, policy.stop(), None).value)
}

/// Conditional logit probability that `j` is chosen.
pub fn prob_levi(v: &UtilityVector, j: usize) -> Result<f64> {
    v.check(j)?;
    Ok(softmax(v)[j])
}

fn softmax(v: &UtilityVector) -> Vec<f64> {
    let max = bits(v.available)
        .map(|k| v.values[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; v.len()];
    let mut total = 0.0;
    for k in bits(v.available) {
        let e = (v.values[k] - max).exp();
        out[k] = e;
        total += e;
    }
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Probability of `j` under `family`; NORM uses the default GHK settings.
pub fn prob(v: &UtilityVector, j: usize, family: ErrorFamily, policy: TruncationPolicy) -> Result<f64> {
    family.validate()?;
    match family {
        ErrorFamily::Sevi => prob_sevi(v, j, policy),
        ErrorFamily::Levi => prob_levi(v, j),
        ErrorFamily::Norm => probit::prob_norm(v, j, &GhkConfig::default()),
        ErrorFamily::Mixed(rho) => {
            let s = prob_sevi(v, j, policy)?;
            let l = prob_levi(v, j)?;
            Ok(rho * s + (1.0 - rho) * l)
        }
    }
}

/// Probabilities of every alternative (zero where unavailable).
pub fn probabilities(
    v: &UtilityVector,
    family: ErrorFamily,
    policy: TruncationPolicy,
    ghk: &GhkConfig,
) -> Result<Vec<f64>> {
    family.validate()?;
    policy.validate()?;
    match family {
        ErrorFamily::Levi => Ok(softmax(v)),
        ErrorFamily::Norm => probit::probs_norm(v, ghk),
        ErrorFamily::Sevi => {
            let mut out = vec![0.0; v.len()];
            for j in bits(v.available) {
                let (_, r) = competitor_ratios(v, j);
                out[j] = sevi_from_ratios(&r, policy.stop(), None).value;
            }
            Ok(out)
        }
        ErrorFamily::Mixed(rho) => {
            let s = probabilities(v, ErrorFamily::Sevi, policy, ghk)?;
            let l = softmax(v);
            Ok(s.iter().zip(&l).map(|(s, l)| rho * s + (1.0 - rho) * l).collect())
        }
    }
}

/// Sum of the first omitted layer of the expansion when subsets of at most
/// `m` alternatives are kept; bounds the truncation error.
///
/// The returned value carries `8 * EPSILON` times the magnitude of the
/// included layers as slack, so the inequality also holds between the two
/// rounded probabilities.
pub fn truncation_bound(v: &UtilityVector, j: usize, m: usize) -> Result<f64> {
    v.check(j)?;
    let n_avail = v.n_available();
    if m < 2 || m >= n_avail {
        return Err(Error::domain(format!(
            "truncation cardinality {m} outside [2, {})",
            n_avail
        )));
    }
    let (_, r) = competitor_ratios(v, j);
    let mut sums = SubsetSums::new(&r);
    let mut magnitude = 1.0;
    let mut last = 0.0;
    for layer in 1..=m {
        let mut acc = NeumaierSum::new();
        sums.visit_layer(layer, |_, t| acc.add(1.0 / (1.0 + t)));
        last = acc.value();
        magnitude += last;
    }
    // rounding slack for the two partial sums being compared
    Ok(last + 8.0 * f64::EPSILON * magnitude)
}

/// SEVI cross derivative dP_a/dv_b = dP_b/dv_a for `a < b`.
///
/// With `w = exp(c - v)`, `P_j = sum_{U containing j} (-1)^{|U|-1} w_j / T(U)`
/// and differentiating gives a form symmetric in the pair.
fn sevi_cross(w: &[f64], avail: u64, a: usize, b: usize) -> f64 {
    debug_assert!(a < b);
    let rest: Vec<f64> = bits(avail & !(1u64 << a) & !(1u64 << b)).map(|k| w[k]).collect();
    let base = w[a] + w[b];
    let term = |t: f64| (w[a] / t) * (w[b] / t);
    let mut acc = NeumaierSum::new();
    // |U| = 2: sign (-1)^1
    acc.add(-term(base));
    let mut sums = SubsetSums::new(&rest);
    for layer in 1..=rest.len() {
        let mut lacc = NeumaierSum::new();
        sums.visit_layer(layer, |_, t| lacc.add(term(base + t)));
        let s = lacc.value();
        // |U| = layer + 2
        acc.add(if layer % 2 == 0 { -s } else { s });
    }
    acc.value()
}

/// `w_k = exp(c - v_k)` with `c` the smallest available utility, so every
/// weight lies in `(0, 1]`.
fn sevi_weights(v: &UtilityVector) -> Vec<f64> {
    let c = bits(v.available)
        .map(|k| v.values[k])
        .fold(f64::INFINITY, f64::min);
    v.values
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            if v.is_available(k) {
                (-(x - c).min(EXP_CLAMP)).exp()
            } else {
                0.0
            }
        })
        .collect()
}

/// Derivatives dP(Y = j)/dv_k for every k (zero where unavailable).
pub fn dprob_dv(v: &UtilityVector, j: usize, family: ErrorFamily) -> Result<Vec<f64>> {
    v.check(j)?;
    family.validate()?;
    let n = v.len();
    match family {
        ErrorFamily::Norm => Err(Error::UnsupportedFamily {
            op: "dprob_dv",
            family: family.to_string(),
        }),
        ErrorFamily::Levi => {
            let p = softmax(v);
            Ok((0..n)
                .map(|k| if k == j { p[j] * (1.0 - p[j]) } else { -p[j] * p[k] })
                .collect())
        }
        ErrorFamily::Sevi => {
            let w = sevi_weights(v);
            let mut out = vec![0.0; n];
            let mut own = NeumaierSum::new();
            for k in bits(v.available) {
                if k != j {
                    let d = sevi_cross(&w, v.available, j.min(k), j.max(k));
                    out[k] = d;
                    own.add(-d);
                }
            }
            out[j] = own.value();
            Ok(out)
        }
        ErrorFamily::Mixed(rho) => {
            let s = dprob_dv(v, j, ErrorFamily::Sevi)?;
            let l = dprob_dv(v, j, ErrorFamily::Levi)?;
            Ok(s.iter().zip(&l).map(|(s, l)| rho * s + (1.0 - rho) * l).collect())
        }
    }
}

/// Matrix of dP_j/dv_k (rows j, columns k).
pub fn jacobian(v: &UtilityVector, family: ErrorFamily) -> Result<DMatrix<f64>> {
    family.validate()?;
    let n = v.len();
    match family {
        ErrorFamily::Norm => Err(Error::UnsupportedFamily {
            op: "jacobian",
            family: family.to_string(),
        }),
        ErrorFamily::Levi => {
            let p = softmax(v);
            Ok(DMatrix::from_fn(n, n, |j, k| {
                if j == k {
                    p[j] * (1.0 - p[j])
                } else {
                    -p[j] * p[k]
                }
            }))
        }
        ErrorFamily::Sevi => {
            let w = sevi_weights(v);
            let mut m = DMatrix::zeros(n, n);
            let avail: Vec<usize> = bits(v.available).collect();
            for (ia, &a) in avail.iter().enumerate() {
                for &b in &avail[ia + 1..] {
                    let d = sevi_cross(&w, v.available, a, b);
                    m[(a, b)] = d;
                    m[(b, a)] = d;
                }
            }
            for &j in &avail {
                let mut own = NeumaierSum::new();
                for &k in &avail {
                    if k != j {
                        own.add(-m[(j, k)]);
                    }
                }
                m[(j, j)] = own.value();
            }
            Ok(m)
        }
        ErrorFamily::Mixed(rho) => {
            let s = jacobian(v, ErrorFamily::Sevi)?;
            let l = jacobian(v, ErrorFamily::Levi)?;
            Ok(s * rho + l * (1.0 - rho))
        }
    }
}

/// Block-Marschak polynomial K(j, D): the SEVI probability that `j` beats
/// every other member of `anchor` and is beaten by every available
/// alternative outside it.
pub fn block_marschak(v: &UtilityVector, j: usize, anchor: u64) -> Result<f64> {
    v.check(j)?;
    if anchor >> j & 1 == 0 {
        return Err(Error::domain(format!("alternative {j} is not in the anchor set")));
    }
    if anchor & !v.available != 0 {
        return Err(Error::domain("anchor set contains unavailable alternatives"));
    }
    let outside: Vec<usize> = bits(v.available & !anchor).collect();
    let restricted = |mask: u64| -> Result<f64> {
        let u = UtilityVector::with_mask(v.values.clone(), mask)?;
        prob_sevi(&u, j, TruncationPolicy::Full)
    };
    let mut acc = NeumaierSum::new();
    acc.add(restricted(anchor)?);
    for layer in 1..=outside.len() {
        let mut mask = (1u64 << layer) - 1;
        loop {
            let extra = crate::subset::deposit(mask, &outside);
            let p = restricted(anchor | extra)?;
            acc.add(if layer % 2 == 1 { -p } else { p });
            match gosper(mask, outside.len()) {
                Some(m) => mask = m,
                None => break,
            }
        }
    }
    Ok(acc.value().clamp(0.0, 1.0))
}

/// Probability that `j` is chosen when agents minimize `cost + error`.
///
/// Minimizing with LEVI errors is maximizing `-cost` with SEVI errors and
/// vice versa.
pub fn prob_min(
    cost: &UtilityVector,
    j: usize,
    family: ErrorFamily,
    policy: TruncationPolicy,
) -> Result<f64> {
    cost.check(j)?;
    family.validate()?;
    let neg = cost.negated();
    match family {
        ErrorFamily::Levi => prob_sevi(&neg, j, policy),
        ErrorFamily::Sevi => prob_levi(&neg, j),
        ErrorFamily::Norm => probit::prob_norm(&neg, j, &GhkConfig::default()),
        ErrorFamily::Mixed(rho) => {
            // rho is the SEVI share of the error population
            let s = prob_levi(&neg, j)?;
            let l = prob_sevi(&neg, j, policy)?;
            Ok(rho * s + (1.0 - rho) * l)
        }
    }
}

/// Probability of the chosen alternative `c` together with its gradient
/// with respect to the full utility vector `v` (entries for unavailable
/// alternatives stay zero). Used by the likelihood and its score.
pub(crate) fn chosen_with_gradient(
    v: &[f64],
    avail: u64,
    c: usize,
    family: ErrorFamily,
    policy: TruncationPolicy,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    match family {
        ErrorFamily::Sevi => sevi_chosen(v, avail, c, policy, 1.0, grad),
        ErrorFamily::Levi => levi_chosen(v, avail, c, 1.0, grad),
        ErrorFamily::Mixed(rho) => {
            let s = sevi_chosen(v, avail, c, policy, rho, grad);
            let l = levi_chosen(v, avail, c, 1.0 - rho, grad);
            rho * s + (1.0 - rho) * l
        }
        ErrorFamily::Norm => unreachable!("probit likelihoods are simulated"),
    }
}

/// Adds `weight * dP_c/dv` into `grad` and returns `P_c`.
fn sevi_chosen(v: &[f64], avail: u64, c: usize, policy: TruncationPolicy, weight: f64, grad: &mut [f64]) -> f64 {
    let idx: Vec<usize> = bits(avail & !(1u64 << c)).collect();
    let r: Vec<f64> = idx.iter().map(|&k| ratio(v[c] - v[k])).collect();
    let mut g = vec![0.0; idx.len()];
    let eval = sevi_from_ratios(&r, policy.stop(), Some(&mut g));
    let mut own = 0.0;
    for (&k, &gk) in idx.iter().zip(&g) {
        grad[k] += weight * gk;
        own -= gk;
    }
    grad[c] += weight * own;
    eval.value
}

fn levi_chosen(v: &[f64], avail: u64, c: usize, weight: f64, grad: &mut [f64]) -> f64 {
    let max = bits(avail).map(|k| v[k]).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = bits(avail).map(|k| (v[k] - max).exp()).sum();
    let pc = (v[c] - max).exp() / total;
    for k in bits(avail) {
        let pk = (v[k] - max).exp() / total;
        let d = if k == c { pc * (1.0 - pc) } else { -pc * pk };
        grad[k] += weight * d;
    }
    pc
}
