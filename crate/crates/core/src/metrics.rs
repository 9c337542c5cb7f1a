//! Generation metrics: BLEU-N, DIST-N, edit-distance similarity, and Welch's
//! t-test for comparing per-sample scores between systems.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::abc::AbcVocab;
use crate::error::{Error, Result};

/// Unit-cost edit distance between the character sequences of `a` and `b`.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit-distance similarity `100 · (1 − lev(a, b) / max(|a|, |b|))`, with
/// lengths in characters. Two empty strings score 100.
pub fn eds(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(a, b) as f64 / longest as f64)
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU with uniform weights over 1..=n-grams, brevity
/// penalty and no smoothing: any zero precision gives 0. Scaled to 0–100.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngram_counts(candidate, k);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let refs = ngram_counts(reference, k);
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

/// Percentage of distinct n-grams in one sample; 0 when it has fewer than
/// `n` tokens.
pub fn dist_n<T: Eq + Hash>(sample: &[T], n: usize) -> f64 {
    let counts = ngram_counts(sample, n);
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    100.0 * counts.len() as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "each sample needs at least two values".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(Error::DegenerateVariance(
            "both samples have zero variance".into(),
        ));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTestResult { t, df, p })
}

/// What BLEU and DIST count as a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenUnit {
    /// ABC vocabulary tokens.
    #[default]
    Abc,
    /// Unicode characters.
    Char,
}

impl std::str::FromStr for TokenUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abc" => Ok(TokenUnit::Abc),
            "char" => Ok(TokenUnit::Char),
            _ => Err(Error::InvalidArgument(format!(
                "unknown token unit `{s}` (expected abc or char)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(name: &str, values: Vec<f64>) -> Self {
        let n = values.len();
        let (mean, std) = match n {
            0 => (0.0, 0.0),
            1 => (values[0], 0.0),
            _ => {
                let (m, v) = mean_var(&values);
                (m, v.sqrt())
            }
        };
        MetricSummary {
            name: name.to_string(),
            values,
            mean,
            std,
            n,
        }
    }

    /// `mean±std` with two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

pub const BLEU_ORDERS: [usize; 3] = [2, 3, 4];
pub const DIST_ORDERS: [usize; 3] = [1, 2, 3];

/// Column order of the report table.
pub const METRIC_NAMES: [&str; 7] = ["BLEU-2", "BLEU-3", "BLEU-4", "DIST-1", "DIST-2", "DIST-3", "EDS"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub unit: TokenUnit,
    pub metrics: Vec<MetricSummary>,
}

impl MetricReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn n(&self) -> usize {
        self.metrics.first().map_or(0, |m| m.n)
    }

    /// Fixed-width table: a header row of metric names and one row of cells
    /// labelled `label`.
    pub fn to_table(&self, label: &str) -> String {
        let width = self.metrics.iter().map(|m| m.cell().chars().count()).max().unwrap_or(0).max(8);
        let lw = label.chars().count().max(5);
        let mut out = format!("{:<lw$}", "model");
        for m in &self.metrics {
            let _ = write!(out, "  {:>width$}", m.name);
        }
        out.push('\n');
        let _ = write!(out, "{label:<lw$}");
        for m in &self.metrics {
            let _ = write!(out, "  {:>width$}", m.cell());
        }
        out.push('\n');
        out
    }

    /// JSON with a `columns` object of `mean±std` cells next to the full
    /// per-sample data.
    pub fn to_json(&self) -> Result<String> {
        let columns: BTreeMap<&str, String> =
            self.metrics.iter().map(|m| (m.name.as_str(), m.cell())).collect();
        let mut v = serde_json::to_value(self)?;
        v["columns"] = serde_json::to_value(columns)?;
        v["n"] = self.n().into();
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Welch's test on one metric's per-sample values.
    pub fn compare(&self, other: &MetricReport, name: &str) -> Result<TTestResult> {
        let get = |r: &MetricReport| {
            r.metric(name)
                .map(|m| m.values.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("report has no metric {name}")))
        };
        welch_t_test(&get(self)?, &get(other)?)
    }
}

fn units(s: &str, unit: TokenUnit, vocab: &AbcVocab) -> Result<Vec<usize>> {
    match unit {
        TokenUnit::Abc => vocab.tokenize(s),
        TokenUnit::Char => Ok(s.chars().map(|c| c as usize).collect()),
    }
}

/// Per-sample BLEU-2/3/4 and DIST-1/2/3 over `unit` tokens, and EDS over raw
/// strings, aggregated to mean and standard deviation.
pub fn evaluate_pairs(
    candidates: &[String],
    references: &[String],
    vocab: &AbcVocab,
    unit: TokenUnit,
) -> Result<MetricReport> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate-reference pairs".into()));
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(candidates.len()); METRIC_NAMES.len()];
    for (c, r) in candidates.iter().zip(references) {
        let ct = units(c, unit, vocab)?;
        let rt = units(r, unit, vocab)?;
        for (i, &n) in BLEU_ORDERS.iter().enumerate() {
            cols[i].push(bleu_n(&ct, &rt, n)?);
        }
        for (i, &n) in DIST_ORDERS.iter().enumerate() {
            cols[3 + i].push(dist_n(&ct, n));
        }
        cols[6].push(eds(c, r));
    }
    Ok(MetricReport {
        unit,
        metrics: METRIC_NAMES
            .iter()
            .zip(cols)
            .map(|(name, v)| MetricSummary::from_values(name, v))
            .collect(),
    })
}
