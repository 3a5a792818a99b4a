//! Word-count weighting and weighted ridge regression on reduced embeddings.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Version;
use crate::error::{Error, Result};
use crate::features::{Family, FeatureConfig, FeatureMatrix};
use crate::reduce::{ReductionConfig, ReductionPipeline};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Uniform,
    Linear,
    Logistic,
}

impl std::str::FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightKind::Uniform),
            "linear" => Ok(WeightKind::Linear),
            "logistic" => Ok(WeightKind::Logistic),
            other => Err(Error::InvalidArgument(format!(
                "unknown weight scheme `{other}` (expected uniform, linear or logistic)"
            ))),
        }
    }
}

/// How a user's word count scales their contribution to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightScheme {
    pub kind: WeightKind,
    pub t_min: u64,
    pub t_max: u64,
    pub alpha: f64,
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme {
            kind: WeightKind::Uniform,
            t_min: 200,
            t_max: 1000,
            alpha: 100.0,
        }
    }
}

impl WeightScheme {
    pub fn new(kind: WeightKind) -> Self {
        WeightScheme {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_min >= self.t_max {
            return Err(Error::InvalidArgument(format!(
                "t_min ({}) must be below t_max ({})",
                self.t_min, self.t_max
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        Ok(())
    }

    /// Linear ramp: 0 at or below `t_min`, 1 at or above `t_max`.
    pub fn linear(&self, wc: u64) -> f64 {
        let clamped = wc.clamp(self.t_min, self.t_max);
        (clamped - self.t_min) as f64 / (self.t_max - self.t_min) as f64
    }

    pub fn weight(&self, wc: u64) -> f64 {
        match self.kind {
            WeightKind::Uniform => 1.0,
            WeightKind::Linear => self.linear(wc),
            WeightKind::Logistic => 1.0 / (1.0 + (-self.alpha * (self.linear(wc) - 0.5)).exp()),
        }
    }
}

pub fn word_count_weight(wc: u64, scheme: &WeightScheme) -> f64 {
    scheme.weight(wc)
}

/// A fitted ridge regression in the original feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// Weighted mean and standard deviation of each column; dims with zero
    /// spread get std 1 and a zero coefficient.
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    /// Coefficients on the z-scored columns (the penalized parameters).
    pub standardized_coefficients: Vec<f64>,
}

impl RidgeFit {
    pub fn predict_row(&self, x: impl IntoIterator<Item = f64>) -> f64 {
        let mut y = self.intercept;
        for (b, v) in self.coefficients.iter().zip(x) {
            y += b * v;
        }
        y
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.predict_row(x.row(i).iter().copied()))
            .collect()
    }
}

/// Weighted, standardized normal equations for a subset of rows, solvable for any λ.
struct RidgeSystem {
    means: Vec<f64>,
    stds: Vec<f64>,
    active: Vec<usize>,
    y_mean: f64,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || y.len() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "ridge: {} rows, {} labels, {} weights",
            x.nrows(),
            y.len(),
            w.len()
        )));
    }
    if x.iter().chain(y).chain(w).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("ridge: non-finite input".into()));
    }
    if w.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("ridge: negative weight".into()));
    }
    Ok(())
}

impl RidgeSystem {
    /// Weights are rescaled by their maximum, so the loss is
    /// Σ (wᵢ / max w)(yᵢ − β·zᵢ − b)² + λ‖β‖² over z-scored columns.
    fn new(x: &DMatrix<f64>, y: &[f64], w: &[f64], rows: &[usize]) -> Result<Self> {
        let rows: Vec<usize> = rows.iter().copied().filter(|&r| w[r] > 0.0).collect();
        let wmax = rows.iter().map(|&r| w[r]).fold(0.0f64, f64::max);
        if rows.is_empty() || wmax <= 0.0 {
            return Err(Error::InvalidArgument("ridge: all weights are zero".into()));
        }
        let wn: Vec<f64> = rows.iter().map(|&r| w[r] / wmax).collect();
        let wsum: f64 = wn.iter().sum();
        let d = x.ncols();

        let y_mean = rows.iter().zip(&wn).map(|(&r, wi)| wi * y[r]).sum::<f64>() / wsum;
        let mut means = vec![0.0; d];
        let mut stds = vec![1.0; d];
        let mut active = Vec::with_capacity(d);
        for j in 0..d {
            let m = rows.iter().zip(&wn).map(|(&r, wi)| wi * x[(r, j)]).sum::<f64>() / wsum;
            let var = rows
                .iter()
                .zip(&wn)
                .map(|(&r, wi)| wi * (x[(r, j)] - m).powi(2))
                .sum::<f64>()
                / wsum;
            means[j] = m;
            let s = var.sqrt();
            if s > 1e-12 * (1.0 + m.abs()) {
                stds[j] = s;
                active.push(j);
            }
        }

        let k = active.len();
        let z = DMatrix::from_fn(rows.len(), k, |i, a| {
            let j = active[a];
            (x[(rows[i], j)] - means[j]) / stds[j]
        });
        let mut zw = z.clone();
        for (i, mut row) in zw.row_iter_mut().enumerate() {
            row *= wn[i];
        }
        let gram = zw.tr_mul(&z);
        let resid = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r] - y_mean));
        let rhs = zw.tr_mul(&resid);
        Ok(RidgeSystem {
            means,
            stds,
            active,
            y_mean,
            gram,
            rhs,
        })
    }

    fn solve(&self, lambda: f64) -> RidgeFit {
        let k = self.active.len();
        let mut a = self.gram.clone();
        for i in 0..k {
            a[(i, i)] += lambda;
        }
        let beta_z = match a.clone().cholesky() {
            Some(ch) => ch.solve(&self.rhs),
            // Singular without shrinkage: minimum-norm least squares.
            None => a
                .svd(true, true)
                .solve(&self.rhs, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(k)),
        };
        let d = self.means.len();
        let mut std_coef = vec![0.0; d];
        let mut coef = vec![0.0; d];
        for (a, &j) in self.active.iter().enumerate() {
            std_coef[j] = beta_z[a];
            coef[j] = beta_z[a] / self.stds[j];
        }
        let intercept = self.y_mean - coef.iter().zip(&self.means).map(|(b, m)| b * m).sum::<f64>();
        RidgeFit {
            coefficients: coef,
            intercept,
            lambda,
            feature_means: self.means.clone(),
            feature_stds: self.stds.clone(),
            standardized_coefficients: std_coef,
        }
    }
}

/// Weighted ridge regression with an unpenalized intercept, solved on
/// columns z-scored with weighted moments. Rows with zero weight have no
/// influence; scaling all weights by a constant changes nothing.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], weights: &[f64], lambda: f64) -> Result<RidgeFit> {
    check_inputs(x, y, weights)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge: invalid lambda {lambda}")));
    }
    let rows: Vec<usize> = (0..y.len()).collect();
    Ok(RidgeSystem::new(x, y, weights, &rows)?.solve(lambda))
}

/// The λ grid {10⁻², 10⁻¹, …, 10⁵}.
pub fn default_lambda_grid() -> Vec<f64> {
    (-2..=5).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(λ, pooled weighted CV MSE)` for every grid value, in grid order.
    pub cv_mse: Vec<(f64, f64)>,
    pub folds: usize,
    pub warnings: Vec<String>,
}

/// Choose λ from `grid` by weighted k-fold cross-validation over the rows of
/// `x`. The lowest pooled weighted MSE wins; ties go to the larger λ.
pub fn select_lambda(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<LambdaSelection> {
    check_inputs(x, y, weights)?;
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument("lambda grid must be nonempty and positive".into()));
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::InvalidArgument("lambda selection needs at least 2 rows".into()));
    }
    let mut warnings = Vec::new();
    let mut k = folds.max(2);
    if n < k {
        warnings.push(format!("only {n} rows; reducing lambda CV folds from {k} to {n}"));
        k = n;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0usize; n];
    for (pos, &r) in order.iter().enumerate() {
        fold_of[r] = pos % k;
    }

    let mut sse = vec![0.0; grid.len()];
    let mut wsum = 0.0;
    for f in 0..k {
        let train: Vec<usize> = (0..n).filter(|&r| fold_of[r] != f).collect();
        let held: Vec<usize> = (0..n).filter(|&r| fold_of[r] == f && weights[r] > 0.0).collect();
        if held.is_empty() {
            continue;
        }
        let system = match RidgeSystem::new(x, y, weights, &train) {
            Ok(s) => s,
            // Every training weight in this fold is zero.
            Err(_) => continue,
        };
        for (g, &lambda) in grid.iter().enumerate() {
            let fit = system.solve(lambda);
            for &r in &held {
                let e = y[r] - fit.predict_row(x.row(r).iter().copied());
                sse[g] += weights[r] * e * e;
            }
        }
        wsum += held.iter().map(|&r| weights[r]).sum::<f64>();
    }
    if wsum <= 0.0 {
        return Err(Error::InvalidArgument("lambda selection: all weights are zero".into()));
    }

    let cv: Vec<(f64, f64)> = grid.iter().zip(&sse).map(|(&l, s)| (l, s / wsum)).collect();
    let mut best = cv[0];
    for &(l, m) in &cv[1..] {
        let better = m < best.1 * (1.0 - 1e-12);
        let tie = !better && m <= best.1 * (1.0 + 1e-12);
        if better || (tie && l > best.0) {
            best = (l, m);
        }
    }
    Ok(LambdaSelection {
        lambda: best.0,
        cv_mse: cv,
        folds: k,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Families to use, in order; empty means every family supplied.
    pub families: Vec<Family>,
    pub reduction: ReductionConfig,
    pub lambda_grid: Vec<f64>,
    pub lambda_folds: usize,
    pub weight_scheme: WeightScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            families: Vec::new(),
            reduction: ReductionConfig::default(),
            lambda_grid: default_lambda_grid(),
            lambda_folds: 5,
            weight_scheme: WeightScheme::default(),
        }
    }
}

impl ModelConfig {
    /// The matrices this configuration trains on, in configured order.
    pub fn select<'a>(&self, matrices: &'a [FeatureMatrix]) -> Result<Vec<&'a FeatureMatrix>> {
        if self.families.is_empty() {
            return Ok(matrices.iter().collect());
        }
        self.families
            .iter()
            .map(|f| {
                matrices
                    .iter()
                    .find(|m| &m.family == f)
                    .ok_or_else(|| Error::InvalidArgument(format!("feature family {f} is not available")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub n_train: usize,
    pub label_version: Version,
    pub seed: u64,
    pub families: Vec<Family>,
    pub feature_config: FeatureConfig,
    pub lambda_cv_mse: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Fitted reduction pipeline plus ridge regression on its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitModel {
    pub format_version: u32,
    pub pipeline: ReductionPipeline,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub weight_scheme: WeightScheme,
    pub metadata: ModelMetadata,
}

/// Everything needed to fit a [`TraitModel`] on a subset of rows.
pub struct TrainingSet<'a> {
    pub matrices: &'a [FeatureMatrix],
    pub rows: &'a [usize],
    pub labels: &'a [f64],
    /// Word count of each training row, aligned with `rows`.
    pub word_counts: &'a [u64],
    pub label_version: Version,
    pub feature_config: FeatureConfig,
}

impl TraitModel {
    pub fn fit(set: &TrainingSet<'_>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.weight_scheme.validate()?;
        if set.rows.len() != set.labels.len() || set.rows.len() != set.word_counts.len() {
            return Err(Error::InvalidArgument("training rows, labels and word counts differ in length".into()));
        }
        let selected = cfg.select(set.matrices)?;
        // Zero-weight users are dropped before reduction too, so they have no influence at all.
        let keep: Vec<usize> = (0..set.rows.len())
            .filter(|&i| cfg.weight_scheme.weight(set.word_counts[i]) > 0.0)
            .collect();
        let rows: Vec<usize> = keep.iter().map(|&i| set.rows[i]).collect();
        let labels: Vec<f64> = keep.iter().map(|&i| set.labels[i]).collect();
        let weights: Vec<f64> = keep.iter().map(|&i| cfg.weight_scheme.weight(set.word_counts[i])).collect();
        let pipeline = ReductionPipeline::fit(
            &selected,
            &rows,
            &labels,
            &cfg.reduction,
            crate::derive_seed(seed, 1),
        )?;
        let x = pipeline.transform_rows(&selected, &rows)?;
        let selection = select_lambda(
            &x,
            &labels,
            &weights,
            &cfg.lambda_grid,
            cfg.lambda_folds,
            crate::derive_seed(seed, 2),
        )?;
        let fit = fit_ridge(&x, &labels, &weights, selection.lambda)?;
        let mut warnings: Vec<String> = pipeline.warnings().map(String::from).collect();
        warnings.extend(selection.warnings.iter().cloned());
        Ok(TraitModel {
            format_version: MODEL_FORMAT_VERSION,
            metadata: ModelMetadata {
                n_train: rows.len(),
                label_version: set.label_version,
                seed,
                families: selected.iter().map(|m| m.family.clone()).collect(),
                feature_config: set.feature_config.clone(),
                lambda_cv_mse: selection.cv_mse,
                warnings,
            },
            pipeline,
            coefficients: fit.coefficients,
            intercept: fit.intercept,
            lambda: fit.lambda,
            feature_means: fit.feature_means,
            feature_stds: fit.feature_stds,
            weight_scheme: cfg.weight_scheme,
        })
    }

    /// Predicted score for every row of `matrices`.
    pub fn predict(&self, matrices: &[FeatureMatrix]) -> Result<Vec<f64>> {
        let n = matrices.first().map_or(0, FeatureMatrix::n_rows);
        let rows: Vec<usize> = (0..n).collect();
        self.predict_rows(matrices, &rows)
    }

    /// Predicted score for the given rows of `matrices`, in order.
    pub fn predict_rows(&self, matrices: &[FeatureMatrix], rows: &[usize]) -> Result<Vec<f64>> {
        let refs: Vec<&FeatureMatrix> = matrices.iter().collect();
        let e = self.pipeline.transform_rows(&refs, rows)?;
        Ok((0..e.nrows())
            .map(|i| {
                let mut y = self.intercept;
                for (b, v) in self.coefficients.iter().zip(e.row(i).iter()) {
                    y += b * v;
                }
                y
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TraitModel = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
