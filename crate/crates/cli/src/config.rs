//! Run configuration: built-in defaults, then a TOML file, then `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trustlang::corpus::Version;
use trustlang::dla::{DlaConfig, Sign};
use trustlang::eval::{ErrorMetric, EvalConfig, Setting, SweepScheme};
use trustlang::features::{Family, FeatureConfig};
use trustlang::model::{default_lambda_grid, ModelConfig, WeightScheme};
use trustlang::reduce::ReductionConfig;
use trustlang::synth::SynthConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub messages: PathBuf,
    pub responses: PathBuf,
    pub lexica: Vec<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            messages: "data/messages.jsonl".into(),
            responses: "data/responses.csv".into(),
            lexica: Vec::new(),
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub families: Vec<Family>,
    pub lambda_grid: Vec<f64>,
    pub lambda_folds: usize,
    pub weight_scheme: WeightScheme,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            families: Vec::new(),
            lambda_grid: default_lambda_grid(),
            lambda_folds: 5,
            weight_scheme: WeightScheme::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainGroup {
    /// 3-question-only users above `eval.train_wc_threshold`: the S2/S3 model.
    Short,
    /// Users with 10-question scores above `eval.test_wc_threshold`.
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub group: TrainGroup,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { group: TrainGroup::Short }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub settings: Vec<Setting>,
    pub folds: usize,
    pub train_wc_threshold: u64,
    pub test_wc_threshold: u64,
    pub r_aa: f64,
    pub r_bb: f64,
    pub bin_edges: Vec<u64>,
    pub bin_metric: ErrorMetric,
    /// Empty skips the training-size sweep.
    pub sweep_sizes: Vec<usize>,
    pub sweep_schemes: Vec<SweepScheme>,
    pub sweep_repeats: usize,
    /// Empty skips the feature-family comparison.
    pub family_sets: Vec<Vec<Family>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            settings: vec![Setting::S1, Setting::S2, Setting::S3],
            folds: e.folds,
            train_wc_threshold: e.train_wc_threshold,
            test_wc_threshold: e.test_wc_threshold,
            r_aa: e.r_aa,
            r_bb: e.r_bb,
            bin_edges: e.bin_edges,
            bin_metric: e.bin_metric,
            sweep_sizes: Vec::new(),
            sweep_schemes: SweepScheme::ALL.to_vec(),
            sweep_repeats: 5,
            family_sets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlaSection {
    pub family: Family,
    pub unigrams_only: bool,
    pub alpha: f64,
    pub k: usize,
    pub sign: Sign,
    pub label: Version,
}

impl Default for DlaSection {
    fn default() -> Self {
        let d = DlaConfig::default();
        DlaSection {
            family: d.family,
            unigrams_only: d.unigrams_only,
            alpha: d.alpha,
            k: d.k,
            sign: d.sign,
            label: Version::Short,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub features: FeatureConfig,
    pub reduction: ReductionConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub dla: DlaSection,
    /// Corpus generator settings; its `seed` is replaced by the run seed.
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            features: FeatureConfig::default(),
            reduction: ReductionConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            dla: DlaSection::default(),
            synth: SynthConfig::demo(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parse the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("`{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Report keys in `given` that the defaults do not know, as dotted paths.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            _ => {}
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by `file` (if any), overlaid by `overrides` (`key=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let defaults = toml::Table::try_from(RunConfig::default())
            .map_err(|e| CliError::Internal(format!("serializing defaults: {e}")))?;
        let mut given = toml::Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            given = text
                .parse::<toml::Table>()
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| usage(format!("override `{o}` must look like section.key=value")))?;
            set_path(&mut given, k.trim(), parse_value(v.trim()))?;
        }
        let mut unknown = Vec::new();
        unknown_keys(&given, &defaults, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(usage(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        let mut merged = defaults;
        merge(&mut merged, given);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.features.validate()?;
        self.reduction.validate()?;
        self.model.weight_scheme.validate()?;
        if self.eval.folds < 2 {
            return Err(usage("eval.folds must be at least 2"));
        }
        if !(self.dla.alpha > 0.0 && self.dla.alpha < 1.0) {
            return Err(usage("dla.alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Internal(format!("serializing config: {e}")))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Hash of the settings that determine the feature matrices.
    pub fn features_hash(&self) -> Result<String, CliError> {
        let key = serde_json::json!({
            "messages": self.paths.messages,
            "responses": self.paths.responses,
            "lexica": self.paths.lexica,
            "features": self.features,
        });
        Ok(sha256_hex(key.to_string().as_bytes()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            families: self.model.families.clone(),
            reduction: self.reduction.clone(),
            lambda_grid: self.model.lambda_grid.clone(),
            lambda_folds: self.model.lambda_folds,
            weight_scheme: self.model.weight_scheme,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            model: self.model_config(),
            folds: self.eval.folds,
            train_wc_threshold: self.eval.train_wc_threshold,
            test_wc_threshold: self.eval.test_wc_threshold,
            r_aa: self.eval.r_aa,
            r_bb: self.eval.r_bb,
            bin_edges: self.eval.bin_edges.clone(),
            bin_metric: self.eval.bin_metric,
        }
    }

    pub fn dla_config(&self) -> DlaConfig {
        DlaConfig {
            family: self.dla.family.clone(),
            unigrams_only: self.dla.unigrams_only,
            alpha: self.dla.alpha,
            k: self.dla.k,
            sign: self.dla.sign,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
