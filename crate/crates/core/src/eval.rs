//! Metrics, cross-validation, train/test settings and evaluation sweeps.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Version};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::features::{build_feature_matrices, Family, FeatureConfig, FeatureMatrix, Lexicon};
use crate::model::{ModelConfig, TraitModel, TrainingSet, WeightKind, WeightScheme};
use crate::stats::pearson_r;
use crate::tokenizer::tokenize_corpus;

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need equal, nonzero lengths (got {} and {})",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// Correlation corrected for the reliabilities of both measures.
pub fn disattenuated_r(r_ab: f64, r_aa: f64, r_bb: f64) -> Result<f64> {
    for (name, v) in [("r_aa", r_aa), ("r_bb", r_bb)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {v}")));
        }
    }
    Ok(r_ab / (r_aa * r_bb).sqrt())
}

/// Users, their word counts and labels, and row-aligned feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    pub word_counts: Vec<u64>,
    pub trust_3q: Vec<Option<f64>>,
    pub trust_10q: Vec<Option<f64>>,
    pub matrices: Vec<FeatureMatrix>,
    pub feature_config: FeatureConfig,
}

impl Dataset {
    /// Tokenize and featurize a corpus.
    pub fn build(corpus: &mut Corpus, cfg: &FeatureConfig, lexica: &[Lexicon]) -> Result<Self> {
        let streams = tokenize_corpus(corpus);
        let matrices = build_feature_matrices(&streams, cfg, lexica)?;
        Self::from_parts(corpus, matrices, cfg.clone())
    }

    /// Pair a tokenized corpus with matrices whose rows follow the corpus order.
    pub fn from_parts(corpus: &Corpus, matrices: Vec<FeatureMatrix>, cfg: FeatureConfig) -> Result<Self> {
        let user_ids: Vec<String> = corpus.users.iter().map(|u| u.user_id.clone()).collect();
        if let Some(m) = matrices.iter().find(|m| m.row_ids != user_ids) {
            return Err(Error::Data(format!(
                "feature matrix {} does not match the corpus users (re-run `trustlang featurize`)",
                m.family
            )));
        }
        let word_counts = corpus
            .users
            .iter()
            .map(|u| {
                u.word_count
                    .ok_or_else(|| Error::Internal(format!("user {} has not been tokenized", u.user_id)))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            user_ids,
            word_counts,
            trust_3q: corpus.users.iter().map(|u| u.trust_3q).collect(),
            trust_10q: corpus.users.iter().map(|u| u.trust_10q).collect(),
            matrices,
            feature_config: cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn labels(&self, version: Version) -> &[Option<f64>] {
        match version {
            Version::Short => &self.trust_3q,
            Version::Long => &self.trust_10q,
        }
    }

    fn label_values(&self, rows: &[usize], version: Version) -> Vec<f64> {
        let labels = self.labels(version);
        rows.iter().map(|&r| labels[r].expect("row selected for its label")).collect()
    }

    /// Rows with a 10-question score and at least `min_wc` words.
    pub fn long_rows(&self, min_wc: u64) -> Vec<usize> {
        (0..self.len())
            .filter(|&r| self.trust_10q[r].is_some() && self.word_counts[r] >= min_wc)
            .collect()
    }

    /// Rows with only a 3-question score and at least `min_wc` words.
    pub fn short_only_rows(&self, min_wc: u64) -> Vec<usize> {
        (0..self.len())
            .filter(|&r| self.trust_3q[r].is_some() && self.trust_10q[r].is_none() && self.word_counts[r] >= min_wc)
            .collect()
    }

    /// Fit a model on `rows` with labels of `version`.
    pub fn fit(&self, rows: &[usize], version: Version, cfg: &ModelConfig, seed: u64) -> Result<TraitModel> {
        let labels = self.label_values(rows, version);
        let word_counts: Vec<u64> = rows.iter().map(|&r| self.word_counts[r]).collect();
        TraitModel::fit(
            &TrainingSet {
                matrices: &self.matrices,
                rows,
                labels: &labels,
                word_counts: &word_counts,
                label_version: version,
                feature_config: self.feature_config.clone(),
            },
            cfg,
            seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Cross-validation among users with 10-question scores.
    S1,
    /// Train on 3-question-only users, score test users' 3-question labels.
    S2,
    /// Same model as S2, scored against test users' 10-question labels.
    S3,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::S1 => "S1",
            Setting::S2 => "S2",
            Setting::S3 => "S3",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Setting::S1),
            "S2" => Ok(Setting::S2),
            "S3" => Ok(Setting::S3),
            _ => Err(Error::InvalidArgument(format!("unknown setting `{s}` (expected S1, S2 or S3)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMetric {
    Mae,
    Mse,
}

impl FromStr for ErrorMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(ErrorMetric::Mae),
            "mse" => Ok(ErrorMetric::Mse),
            _ => Err(Error::InvalidArgument(format!("unknown error metric `{s}` (expected mae or mse)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model: ModelConfig,
    pub folds: usize,
    /// Minimum word count for S2/S3 training users.
    pub train_wc_threshold: u64,
    /// Minimum word count for test users (and the S1 pool).
    pub test_wc_threshold: u64,
    pub r_aa: f64,
    pub r_bb: f64,
    /// Lower bin edges; the last bin is open-ended.
    pub bin_edges: Vec<u64>,
    pub bin_metric: ErrorMetric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: ModelConfig::default(),
            folds: 10,
            train_wc_threshold: 1000,
            test_wc_threshold: 0,
            r_aa: 0.70,
            r_bb: 0.70,
            bin_edges: vec![0, 250, 500, 1000, 2500, 5000],
            bin_metric: ErrorMetric::Mae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResidual {
    pub user_id: String,
    pub word_count: u64,
    pub label: f64,
    pub prediction: f64,
    /// `label − prediction`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lower: u64,
    /// Exclusive upper edge; `None` for the open-ended last bin.
    pub upper: Option<u64>,
    pub n: usize,
    /// `None` when the bin is empty.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub scheme: SweepScheme,
    pub repeats: usize,
    pub mean_n_train: f64,
    pub mean_r: f64,
    pub sd_r: f64,
    pub mean_r_dis: f64,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub setting: String,
    pub label_version: Version,
    pub n_train: usize,
    pub n_test: usize,
    pub mse: f64,
    pub pearson_r: f64,
    pub r_dis: f64,
    pub r_aa: f64,
    pub r_bb: f64,
    /// λ of each fitted model, in fold order.
    pub lambdas: Vec<f64>,
    pub residuals: Vec<UserResidual>,
    pub bins: Option<Vec<BinRow>>,
    pub sweep: Option<Vec<SweepRow>>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    fn from_predictions(
        setting: String,
        label_version: Version,
        data: &Dataset,
        rows: &[usize],
        predictions: &[f64],
        n_train: usize,
        models: &[&TraitModel],
        cfg: &EvalConfig,
    ) -> Result<Self> {
        let labels = data.label_values(rows, label_version);
        let r = pearson_r(&labels, predictions)?;
        let mut warnings: Vec<String> = Vec::new();
        for m in models {
            for w in &m.metadata.warnings {
                if !warnings.contains(w) {
                    warnings.push(w.clone());
                }
            }
        }
        let residuals: Vec<UserResidual> = rows
            .iter()
            .zip(&labels)
            .zip(predictions)
            .map(|((&row, &label), &prediction)| UserResidual {
                user_id: data.user_ids[row].clone(),
                word_count: data.word_counts[row],
                label,
                prediction,
                residual: label - prediction,
            })
            .collect();
        let mut report = EvaluationReport {
            setting,
            label_version,
            n_train,
            n_test: rows.len(),
            mse: mse(&labels, predictions)?,
            pearson_r: r,
            r_dis: disattenuated_r(r, cfg.r_aa, cfg.r_bb)?,
            r_aa: cfg.r_aa,
            r_bb: cfg.r_bb,
            lambdas: models.iter().map(|m| m.lambda).collect(),
            residuals,
            bins: None,
            sweep: None,
            warnings,
        };
        report.bins = Some(error_by_wordcount(&report.residuals, &cfg.bin_edges, cfg.bin_metric)?);
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-column summary for people.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k:<10} {v}\n"));
        line("setting", self.setting.clone());
        line("labels", self.label_version.to_string());
        line("n_train", self.n_train.to_string());
        line("n_test", self.n_test.to_string());
        line("mse", format!("{:.4}", self.mse));
        line("r", format!("{:.4}", self.pearson_r));
        line("r_dis", format!("{:.4}", self.r_dis));
        if let Some(bins) = &self.bins {
            s.push_str("\nwords          n    error\n");
            for b in bins {
                let range = match b.upper {
                    Some(u) => format!("[{}, {})", b.lower, u),
                    None => format!("[{}, inf)", b.lower),
                };
                let err = b.error.map_or("-".to_string(), |e| format!("{e:.4}"));
                s.push_str(&format!("{range:<13} {:>5} {err:>8}\n", b.n));
            }
        }
        if let Some(rows) = &self.sweep {
            s.push_str(&format!("\n{:>6}  {:<15} {:>8} {:>7} {:>7}\n", "size", "scheme", "n_train", "r", "r_dis"));
            for r in rows {
                s.push_str(&format!(
                    "{:>6}  {:<15} {:>8.1} {:>7.4} {:>7.4}\n",
                    r.size, r.scheme.to_string(), r.mean_n_train, r.mean_r, r.mean_r_dis
                ));
            }
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }

    pub fn write_residuals_csv<W: Write>(&self, writer: W) -> Result<()> {
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user_id", "word_count", "label", "prediction", "residual"]).map_err(ser)?;
        for r in &self.residuals {
            w.write_record([
                r.user_id.clone(),
                r.word_count.to_string(),
                r.label.to_string(),
                r.prediction.to_string(),
                r.residual.to_string(),
            ])
            .map_err(ser)?;
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))
    }
}

pub fn write_bins_csv<W: Write>(bins: &[BinRow], writer: W) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lower", "upper", "n", "error"]).map_err(ser)?;
    for b in bins {
        w.write_record([
            b.lower.to_string(),
            b.upper.map(|u| u.to_string()).unwrap_or_default(),
            b.n.to_string(),
            b.error.map(|e| e.to_string()).unwrap_or_default(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["size", "scheme", "repeats", "mean_n_train", "mean_r", "sd_r", "mean_r_dis", "mean_mse"])
        .map_err(ser)?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.scheme.to_string(),
            r.repeats.to_string(),
            r.mean_n_train.to_string(),
            r.mean_r.to_string(),
            r.sd_r.to_string(),
            r.mean_r_dis.to_string(),
            r.mean_mse.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))
}

/// Seeded assignment of `n` items to `k` folds of near-equal size.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// k-fold cross-validation over `rows`, refitting the whole pipeline in every
/// fold and pooling the held-out predictions.
pub fn cross_validate(
    data: &Dataset,
    rows: &[usize],
    version: Version,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    let k = cfg.folds;
    if k < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least 2 folds".into()));
    }
    if rows.len() < k {
        return Err(Error::Data(format!(
            "{} labeled users is fewer than {k} folds; use fewer folds",
            rows.len()
        )));
    }
    let fold = fold_assignment(rows.len(), k, derive_seed(seed, 10));
    let fits = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..rows.len()).filter(|&i| fold[i] != f).map(|i| rows[i]).collect();
            let held: Vec<usize> = (0..rows.len()).filter(|&i| fold[i] == f).collect();
            let model = data.fit(&train, version, &cfg.model, derive_seed(seed, 100 + f as u64))?;
            let held_rows: Vec<usize> = held.iter().map(|&i| rows[i]).collect();
            let pred = model.predict_rows(&data.matrices, &held_rows)?;
            Ok((model, train.len(), held, pred))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut predictions = vec![0.0; rows.len()];
    let mut n_train = 0;
    for (_, nt, held, pred) in &fits {
        n_train = n_train.max(*nt);
        for (&i, &p) in held.iter().zip(pred) {
            predictions[i] = p;
        }
    }
    let models: Vec<&TraitModel> = fits.iter().map(|f| &f.0).collect();
    EvaluationReport::from_predictions(
        format!("{k}-fold CV"),
        version,
        data,
        rows,
        &predictions,
        n_train,
        &models,
        cfg,
    )
}

/// 10-fold (or `cfg.folds`) cross-validation among users with 10-question scores.
pub fn cross_validate_10fold(data: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvaluationReport> {
    let rows = data.long_rows(cfg.test_wc_threshold);
    let mut report = cross_validate(data, &rows, Version::Long, cfg, seed)?;
    report.setting = Setting::S1.to_string();
    Ok(report)
}

/// The shared S2/S3 split: 3-question-only training users and 10-question test users.
pub fn split_s2_s3(data: &Dataset, cfg: &EvalConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let train = data.short_only_rows(cfg.train_wc_threshold);
    let test = data.long_rows(cfg.test_wc_threshold);
    if train.is_empty() {
        return Err(Error::Data(format!(
            "no 3-question-only users with at least {} words to train on",
            cfg.train_wc_threshold
        )));
    }
    if test.is_empty() {
        return Err(Error::Data("no users with 10-question scores to test on".into()));
    }
    let test_set: std::collections::HashSet<usize> = test.iter().copied().collect();
    if train.iter().any(|r| test_set.contains(r)) {
        return Err(Error::Internal("train and test groups overlap".into()));
    }
    Ok((train, test))
}

/// The model shared by S2 and S3, with the test rows it is scored on.
pub fn fit_s2_s3_model(data: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<(TraitModel, Vec<usize>)> {
    let (train, test) = split_s2_s3(data, cfg)?;
    let model = data.fit(&train, Version::Short, &cfg.model, derive_seed(seed, 200))?;
    Ok((model, test))
}

/// Train once on the S2/S3 split and score both label versions.
pub fn run_s2_s3(data: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<(EvaluationReport, EvaluationReport, TraitModel)> {
    let (model, test) = fit_s2_s3_model(data, cfg, seed)?;
    let pred = model.predict_rows(&data.matrices, &test)?;
    let n_train = model.metadata.n_train;
    let s2 = EvaluationReport::from_predictions(
        Setting::S2.to_string(),
        Version::Short,
        data,
        &test,
        &pred,
        n_train,
        &[&model],
        cfg,
    )?;
    let s3 = EvaluationReport::from_predictions(
        Setting::S3.to_string(),
        Version::Long,
        data,
        &test,
        &pred,
        n_train,
        &[&model],
        cfg,
    )?;
    Ok((s2, s3, model))
}

pub fn run_setting(data: &Dataset, setting: Setting, cfg: &EvalConfig, seed: u64) -> Result<EvaluationReport> {
    match setting {
        Setting::S1 => cross_validate_10fold(data, cfg, seed),
        Setting::S2 => Ok(run_s2_s3(data, cfg, seed)?.0),
        Setting::S3 => Ok(run_s2_s3(data, cfg, seed)?.1),
    }
}

/// Prediction error per word-count bin. `edges` are ascending lower edges;
/// the last bin is open-ended. Users below the first edge are ignored.
pub fn error_by_wordcount(residuals: &[UserResidual], edges: &[u64], metric: ErrorMetric) -> Result<Vec<BinRow>> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bin edges must be nonempty and strictly increasing".into()));
    }
    let mut acc = vec![(0usize, 0.0f64); edges.len()];
    for r in residuals {
        if r.word_count < edges[0] {
            continue;
        }
        let b = edges.partition_point(|&e| e <= r.word_count) - 1;
        acc[b].0 += 1;
        acc[b].1 += match metric {
            ErrorMetric::Mae => r.residual.abs(),
            ErrorMetric::Mse => r.residual * r.residual,
        };
    }
    Ok(edges
        .iter()
        .enumerate()
        .map(|(i, &lower)| BinRow {
            lower,
            upper: edges.get(i + 1).copied(),
            n: acc[i].0,
            error: (acc[i].0 > 0).then(|| acc[i].1 / acc[i].0 as f64),
        })
        .collect())
}

/// How low-word-count users enter training in the size sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepScheme {
    /// Only users at or above `t_max` words.
    #[serde(rename = "threshold-1000")]
    ThresholdHigh,
    /// Users at or above `t_min` words, unweighted.
    #[serde(rename = "threshold-200")]
    ThresholdLow,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "logistic")]
    Logistic,
}

impl SweepScheme {
    pub const ALL: [SweepScheme; 4] = [
        SweepScheme::ThresholdHigh,
        SweepScheme::ThresholdLow,
        SweepScheme::Linear,
        SweepScheme::Logistic,
    ];
}

impl fmt::Display for SweepScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepScheme::ThresholdHigh => "threshold-1000",
            SweepScheme::ThresholdLow => "threshold-200",
            SweepScheme::Linear => "linear",
            SweepScheme::Logistic => "logistic",
        })
    }
}

impl FromStr for SweepScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold-1000" | "threshold-high" => Ok(SweepScheme::ThresholdHigh),
            "threshold-200" | "threshold-low" => Ok(SweepScheme::ThresholdLow),
            "linear" => Ok(SweepScheme::Linear),
            "logistic" => Ok(SweepScheme::Logistic),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sweep scheme `{s}` (expected threshold-1000, threshold-200, linear or logistic)"
            ))),
        }
    }
}

/// Training rows and weighting for one sweep cell, given the sampled high-word-count users.
pub fn sweep_training_rows(
    data: &Dataset,
    sampled_high: &[usize],
    scheme: SweepScheme,
    base: &WeightScheme,
) -> (Vec<usize>, WeightScheme) {
    let low_pool = |min: u64| {
        data.short_only_rows(min)
            .into_iter()
            .filter(|&r| data.word_counts[r] < base.t_max)
            .collect::<Vec<_>>()
    };
    let (extra, kind) = match scheme {
        SweepScheme::ThresholdHigh => (Vec::new(), WeightKind::Uniform),
        SweepScheme::ThresholdLow => (low_pool(base.t_min), WeightKind::Uniform),
        SweepScheme::Linear => (low_pool(0), WeightKind::Linear),
        SweepScheme::Logistic => (low_pool(0), WeightKind::Logistic),
    };
    let mut rows: Vec<usize> = sampled_high.iter().copied().chain(extra).collect();
    rows.sort_unstable();
    (rows, WeightScheme { kind, ..*base })
}

/// Test r as the number of high-word-count training users grows, for each
/// way of adding low-word-count users. Every scheme sees the same sample of
/// high-word-count users within a repeat.
pub fn training_size_sweep(
    data: &Dataset,
    sizes: &[usize],
    schemes: &[SweepScheme],
    repeats: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("sweep needs at least one repeat".into()));
    }
    let base = cfg.model.weight_scheme;
    let high = data.short_only_rows(base.t_max);
    let test = data.long_rows(cfg.test_wc_threshold);
    if test.is_empty() {
        return Err(Error::Data("no users with 10-question scores to test on".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > high.len()) {
        return Err(Error::InvalidArgument(format!(
            "sweep size {s} exceeds the {} available users with at least {} words",
            high.len(),
            base.t_max
        )));
    }
    let test_labels = data.label_values(&test, Version::Long);

    let mut cells = Vec::new();
    for (si, &size) in sizes.iter().enumerate() {
        for rep in 0..repeats {
            for &scheme in schemes {
                cells.push((si, size, rep, scheme));
            }
        }
    }
    let results = cells
        .par_iter()
        .map(|&(si, size, rep, scheme)| {
            let sample_seed = derive_seed(seed, 1000 + (si * repeats + rep) as u64);
            let mut sampled: Vec<usize> =
                high.choose_multiple(&mut ChaCha8Rng::seed_from_u64(sample_seed), size).copied().collect();
            sampled.sort_unstable();
            let (rows, weights) = sweep_training_rows(data, &sampled, scheme, &base);
            let model_cfg = ModelConfig {
                weight_scheme: weights,
                ..cfg.model.clone()
            };
            let model = data.fit(&rows, Version::Short, &model_cfg, sample_seed)?;
            let pred = model.predict_rows(&data.matrices, &test)?;
            let r = pearson_r(&test_labels, &pred)?;
            Ok((model.metadata.n_train, r, mse(&test_labels, &pred)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: HashMap<(usize, SweepScheme), Vec<(usize, f64, f64)>> = HashMap::new();
    for (&(_, size, _, scheme), res) in cells.iter().zip(results) {
        grouped.entry((size, scheme)).or_default().push(res);
    }
    let mut rows = Vec::new();
    for &size in sizes {
        for &scheme in schemes {
            let g = &grouped[&(size, scheme)];
            let rs: Vec<f64> = g.iter().map(|x| x.1).collect();
            let mean_r = crate::stats::mean(&rs);
            rows.push(SweepRow {
                size,
                scheme,
                repeats,
                mean_n_train: g.iter().map(|x| x.0 as f64).sum::<f64>() / g.len() as f64,
                mean_r,
                sd_r: if rs.len() > 1 { crate::stats::sample_variance(&rs).sqrt() } else { 0.0 },
                mean_r_dis: disattenuated_r(mean_r, cfg.r_aa, cfg.r_bb)?,
                mean_mse: g.iter().map(|x| x.2).sum::<f64>() / g.len() as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyComparisonRow {
    pub families: Vec<Family>,
    pub dims: usize,
    pub pearson_r: f64,
    pub r_dis: f64,
    pub mse: f64,
}

/// S3 performance of each feature-family combination.
pub fn compare_families(
    data: &Dataset,
    family_sets: &[Vec<Family>],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<FamilyComparisonRow>> {
    family_sets
        .iter()
        .map(|families| {
            let c = EvalConfig {
                model: ModelConfig {
                    families: families.clone(),
                    ..cfg.model.clone()
                },
                ..cfg.clone()
            };
            let (_, s3, model) = run_s2_s3(data, &c, seed)?;
            Ok(FamilyComparisonRow {
                families: model.metadata.families.clone(),
                dims: model.pipeline.dims(),
                pearson_r: s3.pearson_r,
                r_dis: s3.r_dis,
                mse: s3.mse,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn metric_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert!(mse(&[], &[]).is_err());
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert_eq!(disattenuated_r(0.0, 0.7, 0.7).unwrap(), 0.0);
        assert_eq!(disattenuated_r(0.70, 0.70, 0.70).unwrap(), 1.0);
        assert!((disattenuated_r(0.3458, 0.7, 0.7).unwrap() - 0.494).abs() < 5e-4);
        assert!(disattenuated_r(0.3, 0.0, 0.7).is_err());
        assert!(disattenuated_r(0.3, 0.7, 1.2).is_err());
    }

    fn residual(wc: u64, res: f64) -> UserResidual {
        UserResidual {
            user_id: format!("u{wc}"),
            word_count: wc,
            label: res,
            prediction: 0.0,
            residual: res,
        }
    }

    #[test]
    fn bins() {
        let rs = vec![residual(10, 1.0), residual(300, -2.0), residual(320, 4.0), residual(9000, 0.5)];
        let b = error_by_wordcount(&rs, &[0, 250, 500, 1000, 2500, 5000], ErrorMetric::Mae).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!((b[0].n, b[0].error), (1, Some(1.0)));
        assert_eq!((b[1].n, b[1].error), (2, Some(3.0)));
        assert_eq!((b[2].n, b[2].error), (0, None));
        assert_eq!((b[5].upper, b[5].error), (None, Some(0.5)));
        let one = error_by_wordcount(&rs, &[0], ErrorMetric::Mae).unwrap();
        assert_eq!(one[0].error, Some((1.0 + 2.0 + 4.0 + 0.5) / 4.0));
        let sq = error_by_wordcount(&rs[1..3], &[0], ErrorMetric::Mse).unwrap();
        assert_eq!(sq[0].error, Some(10.0));
        assert!(error_by_wordcount(&rs, &[5, 5], ErrorMetric::Mae).is_err());
    }

    #[test]
    fn folds_partition() {
        let f = fold_assignment(23, 10, 3);
        for k in 0..10 {
            let c = f.iter().filter(|&&x| x == k).count();
            assert!(c == 2 || c == 3);
        }
        assert_eq!(f, fold_assignment(23, 10, 3));
    }

    fn dataset(seed: u64) -> Dataset {
        let cfg = SynthConfig {
            n_short: 300,
            n_long: 60,
            wc_median: 400.0,
            signal_strength: 0.6,
            seed,
            ..Default::default()
        };
        let synth = generate(&cfg).unwrap();
        let mut corpus = synth.to_corpus().unwrap();
        Dataset::build(&mut corpus, &FeatureConfig::default(), &synth.lexica).unwrap()
    }

    fn small_eval() -> EvalConfig {
        EvalConfig {
            train_wc_threshold: 200,
            ..Default::default()
        }
    }

    #[test]
    fn cv_predicts_each_user_once_and_is_deterministic() {
        let data = dataset(1);
        let cfg = small_eval();
        let a = cross_validate_10fold(&data, &cfg, 5).unwrap();
        assert_eq!(a.n_test, 60);
        let mut ids: Vec<&str> = a.residuals.iter().map(|r| r.user_id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 60);
        assert_eq!(a.lambdas.len(), 10);
        assert_eq!(a, cross_validate_10fold(&data, &cfg, 5).unwrap());
        let few = EvalConfig { folds: 100, ..cfg };
        let err = cross_validate_10fold(&data, &few, 5).unwrap_err().to_string();
        assert!(err.contains("fewer folds"), "{err}");
    }

    #[test]
    fn s2_and_s3_share_predictions() {
        let data = dataset(2);
        let (s2, s3, model) = run_s2_s3(&data, &small_eval(), 9).unwrap();
        let p2: Vec<f64> = s2.residuals.iter().map(|r| r.prediction).collect();
        let p3: Vec<f64> = s3.residuals.iter().map(|r| r.prediction).collect();
        assert_eq!(p2, p3);
        assert!(s2.residuals.iter().zip(&s3.residuals).any(|(a, b)| a.label != b.label));
        assert_eq!(s3.n_train, model.metadata.n_train);
        assert!(s3.mse >= 0.0 && s3.pearson_r.abs() <= 1.0);
        assert!((s3.r_dis - s3.pearson_r / 0.7).abs() < 1e-12);
        let (train, test) = split_s2_s3(&data, &small_eval()).unwrap();
        assert!(train.iter().all(|r| !test.contains(r)));
    }

    #[test]
    fn empty_groups_are_errors() {
        let data = dataset(3);
        let cfg = EvalConfig {
            train_wc_threshold: 10_000_000,
            ..small_eval()
        };
        assert!(matches!(run_setting(&data, Setting::S3, &cfg, 0), Err(Error::Data(_))));
    }

    #[test]
    fn sweep_rows_and_weights() {
        let data = dataset(4);
        let base = WeightScheme::default();
        let high = data.short_only_rows(1000);
        let sample = &high[..3];
        let (rows, w) = sweep_training_rows(&data, sample, SweepScheme::ThresholdHigh, &base);
        assert_eq!(rows.len(), 3);
        assert_eq!(w.kind, WeightKind::Uniform);
        let (rows, w) = sweep_training_rows(&data, sample, SweepScheme::Linear, &base);
        assert_eq!(w.kind, WeightKind::Linear);
        assert!(rows.iter().any(|&r| data.word_counts[r] <= 200));
        let (rows200, _) = sweep_training_rows(&data, sample, SweepScheme::ThresholdLow, &base);
        assert!(rows200.iter().all(|&r| data.word_counts[r] >= 200));

        let cfg = small_eval();
        let table = training_size_sweep(&data, &[10], &SweepScheme::ALL, 2, &cfg, 1).unwrap();
        assert_eq!(table.len(), 4);
        assert_eq!(table[0].mean_n_train, 10.0);
        assert!(training_size_sweep(&data, &[high.len() + 1], &SweepScheme::ALL, 1, &cfg, 1).is_err());
    }

    #[test]
    fn family_comparison_runs() {
        let data = dataset(5);
        let sets = vec![vec![Family::NgramRel], vec![Family::Lexicon("sentiment".into())]];
        let rows = compare_families(&data, &sets, &small_eval(), 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].families, sets[1]);
    }

    #[test]
    fn report_outputs() {
        let data = dataset(6);
        let (_, s3, _) = run_s2_s3(&data, &small_eval(), 1).unwrap();
        let text = s3.to_text();
        assert!(text.contains("r_dis") && text.contains("[1000, 2500)"));
        let v: serde_json::Value = serde_json::from_str(&s3.to_json().unwrap()).unwrap();
        for key in ["setting", "n_train", "n_test", "mse", "pearson_r", "r_dis", "r_aa", "r_bb", "residuals"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let mut buf = Vec::new();
        s3.write_residuals_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), s3.n_test + 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mse_decomposes(pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
                let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let res: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a - b).collect();
                let m = crate::stats::mean(&res);
                let lhs = mse(&y, &p).unwrap();
                let rhs = crate::stats::variance(&res) + m * m;
                prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs));
            }

            #[test]
            fn r_dis_affine_invariant(y in proptest::collection::vec(-5.0f64..5.0, 3..30), a in 0.1f64..10.0, b in -3.0f64..3.0) {
                let p: Vec<f64> = y.iter().enumerate().map(|(i, v)| v.sin() + i as f64 * 0.1).collect();
                if let Ok(r) = pearson_r(&y, &p) {
                    let p2: Vec<f64> = p.iter().map(|v| a * v + b).collect();
                    let r2 = pearson_r(&y, &p2).unwrap();
                    prop_assert!((disattenuated_r(r, 0.7, 0.7).unwrap() - disattenuated_r(r2, 0.7, 0.7).unwrap()).abs() < 1e-9);
                }
            }
        }
    }
}
