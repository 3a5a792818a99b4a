//! Per-family feature reduction fitted on training rows and replayed on any rows.
//!
//! Each family goes through three stages:
//!
//! 1. occurrence filter: keep columns used (nonzero) by at least
//!    `min_user_fraction` of the training users;
//! 2. univariate selection: keep columns whose correlation with the labels has
//!    two-sided p < `alpha_fwe / m`, `m` being the number of stage-1 columns;
//! 3. randomized SVD of the column-centered survivors, keeping
//!    `floor(target_fraction · n_train / families)` directions.
//!
//! The family embeddings are concatenated in family order.

pub mod rsvd;

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::features::{Family, FeatureMatrix, SparseRow};
use crate::stats::sparse_column_correlation;

pub use rsvd::{fit_rsvd, randomized_svd, CenteredSparse, LinearOperator, Rsvd, RsvdParams};

pub const PIPELINE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionConfig {
    pub min_user_fraction: f64,
    pub alpha_fwe: f64,
    pub target_fraction: f64,
    pub rsvd: RsvdParams,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            min_user_fraction: 0.01,
            alpha_fwe: 60.0,
            target_fraction: 0.05,
            rsvd: RsvdParams::default(),
        }
    }
}

impl ReductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_user_fraction) {
            return Err(Error::InvalidArgument("min_user_fraction must lie in [0,1]".into()));
        }
        if !(self.alpha_fwe > 0.0) {
            return Err(Error::InvalidArgument("alpha_fwe must be positive".into()));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(Error::InvalidArgument("target_fraction must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Columns of `matrix` used by at least `min_user_fraction` of `rows`.
pub fn occurrence_filter(matrix: &FeatureMatrix, rows: &[usize], min_user_fraction: f64) -> Vec<usize> {
    if rows.is_empty() || matrix.n_cols() == 0 {
        return Vec::new();
    }
    let mut users = vec![0u32; matrix.n_cols()];
    for &r in rows {
        for &(c, _) in &matrix.rows[r] {
            users[c as usize] += 1;
        }
    }
    let needed = min_user_fraction * rows.len() as f64;
    users
        .iter()
        .enumerate()
        // The relative slack keeps exact boundaries such as 1/100 at 0.01 inclusive.
        .filter(|&(_, &u)| u > 0 && f64::from(u) >= needed * (1.0 - 1e-12))
        .map(|(c, _)| c)
        .collect()
}

/// Nonzero entries of the `candidates` columns restricted to `rows`, as
/// per-column lists of `(position in rows, value)`.
fn column_entries(matrix: &FeatureMatrix, rows: &[usize], candidates: &[usize]) -> Vec<Vec<(usize, f64)>> {
    let mut local = vec![u32::MAX; matrix.n_cols()];
    for (i, &c) in candidates.iter().enumerate() {
        local[c] = i as u32;
    }
    let mut cols = vec![Vec::new(); candidates.len()];
    for (pos, &r) in rows.iter().enumerate() {
        for &(c, v) in &matrix.rows[r] {
            let l = local[c as usize];
            if l != u32::MAX {
                cols[l as usize].push((pos, v));
            }
        }
    }
    cols
}

fn centered_labels(labels: &[f64]) -> Result<(Vec<f64>, f64)> {
    if labels.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidArgument("labels must be finite".into()));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let centered: Vec<f64> = labels.iter().map(|y| y - mean).collect();
    let ss: f64 = centered.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::Data("labels have zero variance".into()));
    }
    Ok((centered, ss))
}

/// Correlation and p-value of every candidate column with `labels` (aligned with `rows`).
pub fn column_correlations(
    matrix: &FeatureMatrix,
    rows: &[usize],
    candidates: &[usize],
    labels: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if rows.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if rows.len() < 3 {
        return Err(Error::InvalidArgument("correlation needs at least 3 users".into()));
    }
    let (cy, yss) = centered_labels(labels)?;
    let n = rows.len();
    Ok(column_entries(matrix, rows, candidates)
        .iter()
        .map(|entries| sparse_column_correlation(entries.iter().copied(), n, &cy, yss))
        .collect())
}

/// Candidate columns whose two-sided correlation p-value is below `alpha_fwe / m`.
/// Columns with no correlation at all (p = 1, including constant columns) are
/// never kept, even when `alpha_fwe / m` exceeds 1.
pub fn fwe_select(
    matrix: &FeatureMatrix,
    rows: &[usize],
    candidates: &[usize],
    labels: &[f64],
    alpha_fwe: f64,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        // Still validate the labels so misuse is reported consistently.
        centered_labels(labels)?;
        return Ok(Vec::new());
    }
    let threshold = alpha_fwe / candidates.len() as f64;
    let stats = column_correlations(matrix, rows, candidates, labels)?;
    Ok(candidates
        .iter()
        .zip(stats)
        .filter(|(_, (_, p))| *p < threshold && *p < 1.0)
        .map(|(&c, _)| c)
        .collect())
}

/// Fitted reduction for one feature family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReduction {
    pub family: Family,
    pub kept_columns_stage1: Vec<String>,
    pub kept_columns_stage2: Vec<String>,
    /// Training means of the stage-2 columns.
    pub column_means: Vec<f64>,
    /// One row per stage-2 column, one entry per retained direction.
    pub projection: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub requested_dims: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl FamilyReduction {
    pub fn dims(&self) -> usize {
        self.singular_values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionPipeline {
    pub format_version: u32,
    pub config: ReductionConfig,
    pub seed: u64,
    pub n_train: usize,
    /// Sum over families of the requested dimensions.
    pub target_total_dims: usize,
    pub families: Vec<FamilyReduction>,
}

fn fit_family(
    matrix: &FeatureMatrix,
    rows: &[usize],
    labels: &[f64],
    cfg: &ReductionConfig,
    k: usize,
    seed: u64,
) -> Result<FamilyReduction> {
    let mut warnings = Vec::new();
    let stage1 = occurrence_filter(matrix, rows, cfg.min_user_fraction);
    let stage2 = fwe_select(matrix, rows, &stage1, labels, cfg.alpha_fwe)?;
    if stage2.is_empty() {
        warnings.push(format!("{}: no columns survived selection; family contributes 0 dims", matrix.family));
    }

    let mut local = vec![u32::MAX; matrix.n_cols()];
    for (i, &c) in stage2.iter().enumerate() {
        local[c] = i as u32;
    }
    let sub: Vec<SparseRow> = rows
        .iter()
        .map(|&r| {
            matrix.rows[r]
                .iter()
                .filter_map(|&(c, v)| {
                    let l = local[c as usize];
                    (l != u32::MAX).then_some((l, v))
                })
                .collect()
        })
        .collect();
    let mut sums = vec![0.0; stage2.len()];
    for row in &sub {
        for &(c, v) in row {
            sums[c as usize] += v;
        }
    }
    let n = rows.len() as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();

    let op = CenteredSparse {
        rows: &sub,
        ncols: stage2.len(),
        means: &means,
    };
    let svd = randomized_svd(&op, k, cfg.rsvd, seed);
    if svd.shortfall() > 0 {
        warnings.push(format!(
            "{}: rank allowed {} of {} requested dims",
            matrix.family,
            svd.singular_values.len(),
            k
        ));
    }
    let projection = (0..stage2.len())
        .map(|j| svd.components.row(j).iter().copied().collect())
        .collect();
    let names = |cols: &[usize]| cols.iter().map(|&c| matrix.column_ids[c].clone()).collect();
    Ok(FamilyReduction {
        family: matrix.family.clone(),
        kept_columns_stage1: names(&stage1),
        kept_columns_stage2: names(&stage2),
        column_means: means,
        projection,
        singular_values: svd.singular_values,
        requested_dims: k,
        seed,
        warnings,
    })
}

impl ReductionPipeline {
    /// Fit on the training `rows` of `matrices`, with `labels` aligned to `rows`.
    pub fn fit(
        matrices: &[&FeatureMatrix],
        rows: &[usize],
        labels: &[f64],
        cfg: &ReductionConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if matrices.is_empty() {
            return Err(Error::InvalidArgument("no feature families to reduce".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} training rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if rows.len() < 3 {
            return Err(Error::InvalidArgument("need at least 3 training users".into()));
        }
        let ids = &matrices[0].row_ids;
        if let Some(m) = matrices.iter().find(|m| &m.row_ids != ids) {
            return Err(Error::InvalidArgument(format!(
                "family {} is not row-aligned with {}",
                m.family, matrices[0].family
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= ids.len()) {
            return Err(Error::InvalidArgument(format!("row {r} out of range")));
        }
        centered_labels(labels)?;

        let per_family =
            (cfg.target_fraction * rows.len() as f64 / matrices.len() as f64).floor() as usize;
        let families = matrices
            .par_iter()
            .enumerate()
            .map(|(i, m)| fit_family(m, rows, labels, cfg, per_family, derive_seed(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReductionPipeline {
            format_version: PIPELINE_FORMAT_VERSION,
            config: cfg.clone(),
            seed,
            n_train: rows.len(),
            target_total_dims: per_family * matrices.len(),
            families,
        })
    }

    pub fn dims(&self) -> usize {
        self.families.iter().map(FamilyReduction::dims).sum()
    }

    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.families.iter().flat_map(|f| f.warnings.iter().map(String::as_str))
    }

    pub fn family_names(&self) -> Vec<String> {
        self.families.iter().map(|f| f.family.to_string()).collect()
    }

    /// Embed every row of `matrices` (n × dims). Columns not seen in training
    /// are ignored and stored columns missing from a matrix count as zero.
    pub fn transform(&self, matrices: &[FeatureMatrix]) -> Result<DMatrix<f64>> {
        let refs: Vec<&FeatureMatrix> = matrices.iter().collect();
        self.transform_refs(&refs)
    }

    pub fn transform_refs(&self, matrices: &[&FeatureMatrix]) -> Result<DMatrix<f64>> {
        let n = match matrices.first() {
            Some(m) => m.n_rows(),
            None => return Err(Error::InvalidArgument("no feature matrices to transform".into())),
        };
        let rows: Vec<usize> = (0..n).collect();
        self.transform_rows(matrices, &rows)
    }

    /// Embed only the given rows, in the given order.
    pub fn transform_rows(&self, matrices: &[&FeatureMatrix], rows: &[usize]) -> Result<DMatrix<f64>> {
        let n = match matrices.first() {
            Some(m) => m.n_rows(),
            None => return Err(Error::InvalidArgument("no feature matrices to transform".into())),
        };
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidArgument(format!("row {r} out of range")));
        }
        let mut out = DMatrix::zeros(rows.len(), self.dims());
        let mut offset = 0;
        for fam in &self.families {
            let k = fam.dims();
            if k == 0 {
                continue;
            }
            let matrix = matrices
                .iter()
                .find(|m| m.family == fam.family)
                .ok_or_else(|| Error::InvalidArgument(format!("feature family {} is missing", fam.family)))?;
            if matrix.n_rows() != n {
                return Err(Error::InvalidArgument(format!(
                    "family {} has {} rows, expected {n}",
                    fam.family,
                    matrix.n_rows()
                )));
            }
            let stored: HashMap<&str, usize> = fam
                .kept_columns_stage2
                .iter()
                .enumerate()
                .map(|(i, c)| (c.as_str(), i))
                .collect();
            let map: Vec<Option<usize>> = matrix
                .column_ids
                .iter()
                .map(|c| stored.get(c.as_str()).copied())
                .collect();
            let mut shift = vec![0.0; k];
            for (mu, p) in fam.column_means.iter().zip(&fam.projection) {
                for (s, v) in shift.iter_mut().zip(p) {
                    *s += mu * v;
                }
            }
            for (i, &r) in rows.iter().enumerate() {
                let row = &matrix.rows[r];
                let mut acc = vec![0.0; k];
                for &(c, x) in row {
                    if let Some(j) = map[c as usize] {
                        for (a, v) in acc.iter_mut().zip(&fam.projection[j]) {
                            *a += x * v;
                        }
                    }
                }
                for (d, (a, s)) in acc.iter().zip(&shift).enumerate() {
                    out[(i, offset + d)] = a - s;
                }
            }
            offset += k;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ReductionPipeline = serde_json::from_str(s)?;
        if p.format_version != PIPELINE_FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported pipeline format version {}",
                p.format_version
            )));
        }
        Ok(p)
    }
}
