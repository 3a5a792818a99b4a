//! Differential language analysis: which features distinguish the outcome.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Family, FeatureMatrix};
use crate::reduce::column_correlations;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlaResult {
    pub feature: String,
    pub r: f64,
    pub p: f64,
    pub passed: bool,
    /// Mean feature value across the analysed users.
    pub frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
    Both,
}

impl std::str::FromStr for Sign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Sign::Positive),
            "negative" => Ok(Sign::Negative),
            "both" => Ok(Sign::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown sign `{other}` (expected positive, negative or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlaConfig {
    pub family: Family,
    /// Restrict n-gram families to single tokens.
    pub unigrams_only: bool,
    pub alpha: f64,
    pub k: usize,
    pub sign: Sign,
}

impl Default for DlaConfig {
    fn default() -> Self {
        DlaConfig {
            family: Family::NgramRel,
            unigrams_only: true,
            alpha: 0.05,
            k: 50,
            sign: Sign::Both,
        }
    }
}

/// Correlate each of `columns` (all columns if `None`) over `rows` with `labels`.
/// Results are unflagged; see [`apply_bh`].
pub fn correlate_features(
    matrix: &FeatureMatrix,
    rows: &[usize],
    labels: &[f64],
    columns: Option<&[usize]>,
) -> Result<Vec<DlaResult>> {
    let all: Vec<usize>;
    let cols = match columns {
        Some(c) => c,
        None => {
            all = (0..matrix.n_cols()).collect();
            &all
        }
    };
    let stats = column_correlations(matrix, rows, cols, labels)?;
    let mut sums = vec![0.0; matrix.n_cols()];
    for &r in rows {
        for &(c, v) in &matrix.rows[r] {
            sums[c as usize] += v;
        }
    }
    let n = rows.len() as f64;
    Ok(cols
        .iter()
        .zip(stats)
        .map(|(&c, (r, p))| DlaResult {
            feature: matrix.column_ids[c].clone(),
            r,
            p,
            passed: false,
            frequency: sums[c] / n,
        })
        .collect())
}

/// Benjamini–Hochberg step-up: with p-values sorted ascending, find the
/// largest i with p₍ᵢ₎ ≤ i·alpha/m and reject every hypothesis with p ≤ p₍ᵢ₎.
pub fn benjamini_hochberg(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("BH alpha must lie in (0, 1), got {alpha}")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut sorted: Vec<f64> = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = sorted
        .iter()
        .enumerate()
        .rev()
        .find(|&(i, &p)| p <= (i + 1) as f64 * alpha / m as f64)
        .map(|(_, &p)| p);
    Ok(match cutoff {
        Some(c) => p_values.iter().map(|&p| p <= c).collect(),
        None => vec![false; m],
    })
}

pub fn apply_bh(results: &mut [DlaResult], alpha: f64) -> Result<()> {
    let p: Vec<f64> = results.iter().map(|r| r.p).collect();
    for (res, flag) in results.iter_mut().zip(benjamini_hochberg(&p, alpha)?) {
        res.passed = flag;
    }
    Ok(())
}

/// The `k` strongest passing features of the requested sign, by |r| and then name.
pub fn top_k(results: &[DlaResult], k: usize, sign: Sign) -> Vec<DlaResult> {
    let mut kept: Vec<DlaResult> = results
        .iter()
        .filter(|r| r.passed)
        .filter(|r| match sign {
            Sign::Positive => r.r > 0.0,
            Sign::Negative => r.r < 0.0,
            Sign::Both => r.r != 0.0,
        })
        .cloned()
        .collect();
    kept.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()).then_with(|| a.feature.cmp(&b.feature)));
    kept.truncate(k);
    kept
}

/// Columns holding single tokens (no spaces in the n-gram name).
pub fn unigram_columns(matrix: &FeatureMatrix) -> Vec<usize> {
    (0..matrix.n_cols())
        .filter(|&c| !matrix.column_ids[c].contains(' '))
        .collect()
}

/// Correlate the configured family with `labels` over `rows` and flag BH survivors.
pub fn run_dla(
    matrices: &[FeatureMatrix],
    rows: &[usize],
    labels: &[f64],
    cfg: &DlaConfig,
) -> Result<Vec<DlaResult>> {
    let matrix = matrices
        .iter()
        .find(|m| m.family == cfg.family)
        .ok_or_else(|| Error::InvalidArgument(format!("feature family {} is not available", cfg.family)))?;
    let ngram = matches!(cfg.family, Family::NgramRel | Family::NgramBool);
    let columns = (cfg.unigrams_only && ngram).then(|| unigram_columns(matrix));
    let mut results = correlate_features(matrix, rows, labels, columns.as_deref())?;
    apply_bh(&mut results, cfg.alpha)?;
    Ok(results)
}

/// Word-cloud data: `feature,r,p,frequency,sign`.
pub fn write_wordcloud_csv<W: Write>(results: &[DlaResult], writer: W) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "r", "p", "frequency", "sign"]).map_err(ser)?;
    for r in results {
        let sign = if r.r >= 0.0 { "positive" } else { "negative" };
        w.write_record([
            r.feature.as_str(),
            &r.r.to_string(),
            &r.p.to_string(),
            &r.frequency.to_string(),
            sign,
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}
