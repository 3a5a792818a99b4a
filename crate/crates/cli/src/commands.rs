//! Subcommand implementations. Each writes into its own directory under
//! `paths.out` and finishes with a manifest.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use trustlang::corpus::{load_corpus, read_scores, write_scores, Version};
use trustlang::dla::{run_dla, top_k, write_wordcloud_csv, DlaResult};
use trustlang::eval::{
    compare_families, run_s2_s3, run_setting, training_size_sweep, write_bins_csv,
    write_sweep_csv, Dataset, EvaluationReport, FamilyComparisonRow, Setting,
};
use trustlang::features::{write_matrices, FeatureMatrix, Lexicon};
use trustlang::model::TraitModel;
use trustlang::synth::generate;
use trustlang::tokenizer::tokenize as tokenize_text;
use trustlang::Error;

use crate::config::{sha256_hex, RunConfig, TrainGroup};
use crate::manifest::{missing, Manifest};
use crate::CliError;

type Res<T = ()> = Result<T, CliError>;

fn create(path: &Path) -> Res<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn csv_err(e: csv::Error) -> CliError {
    Error::Serialization(e.to_string()).into()
}

fn out_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.out.join(name)
}

pub fn synth(cfg: &mut RunConfig, dest: Option<PathBuf>) -> Res {
    cfg.synth.seed = cfg.seed;
    cfg.synth.validate()?;
    let corpus = generate(&cfg.synth)?;
    let dir = dest.unwrap_or_else(|| out_dir(cfg, "corpus"));
    let paths = corpus.write(&dir)?;
    let details = json!({
        "n_users": cfg.synth.n_users(),
        "n_messages": corpus.messages.len(),
        "lexica": corpus.lexica.iter().map(|l| l.name.clone()).collect::<Vec<_>>(),
    });
    Manifest::new("synth", cfg, details)?.write(&dir, &paths)?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn tokenize(texts: &[String]) -> Res {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut emit = |line: &str| -> Res {
        writeln!(out, "{}", tokenize_text(line).join("\t")).map_err(|e| Error::io("<stdout>", e).into())
    };
    if texts.is_empty() {
        for line in std::io::stdin().lock().lines() {
            emit(&line.map_err(|e| Error::io("<stdin>", e))?)?;
        }
    } else {
        for t in texts {
            emit(t)?;
        }
    }
    Ok(())
}

fn matrix_file(m: &FeatureMatrix) -> String {
    format!("{}.csv", m.family.to_string().replace(':', "_"))
}

pub fn featurize(cfg: &RunConfig) -> Res {
    let mut corpus = load_corpus(&cfg.paths.messages, &cfg.paths.responses)?;
    let lexica = cfg
        .paths
        .lexica
        .iter()
        .map(|p| Lexicon::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let data = Dataset::build(&mut corpus, &cfg.features, &lexica)?;

    let dir = out_dir(cfg, "features");
    let mut paths = write_matrices(&dir, &data.matrices)?;
    let users = dir.join("users.csv");
    write_scores(&corpus, create(&users)?)?;
    paths.push(users);

    let families: Vec<_> = data
        .matrices
        .iter()
        .map(|m| json!({ "family": m.family, "file": matrix_file(m), "columns": m.n_cols() }))
        .collect();
    let details = json!({ "n_users": data.len(), "families": families });
    Manifest::new("featurize", cfg, details)?.write(&dir, &paths)?;
    for m in &data.matrices {
        println!("{}\t{} users\t{} features", m.family, m.n_rows(), m.n_cols());
    }
    Ok(())
}

/// Reload the output of `featurize`. With `check_stale`, the features must
/// have been built from the current paths and feature settings.
pub fn load_features(cfg: &RunConfig, dir: &Path, check_stale: bool) -> Res<Dataset> {
    let manifest = Manifest::read(dir, "featurize")?;
    if manifest.command != "featurize" {
        return Err(missing(&dir.join("manifest.json"), "featurize"));
    }
    if check_stale && manifest.features_hash != cfg.features_hash()? {
        return Err(Error::Data(format!(
            "features in {} were built from different inputs or feature settings (re-run `trustlang featurize`)",
            dir.display()
        ))
        .into());
    }
    let built: RunConfig = toml::from_str(&manifest.config)
        .map_err(|e| Error::Data(format!("{}: unreadable manifest config: {e}", dir.display())))?;

    let users_path = dir.join("users.csv");
    if !users_path.is_file() {
        return Err(missing(&users_path, "featurize"));
    }
    let scores = read_scores(
        File::open(&users_path).map_err(|e| Error::io(&users_path, e))?,
        &users_path.to_string_lossy(),
    )?;
    let user_ids: Vec<String> = scores.iter().map(|s| s.user_id.clone()).collect();
    let word_counts = scores
        .iter()
        .map(|s| {
            s.word_count
                .ok_or_else(|| Error::Data(format!("{}: user {} has no word count", users_path.display(), s.user_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let families = manifest.details["families"]
        .as_array()
        .ok_or_else(|| Error::Data(format!("{}: manifest lists no feature families", dir.display())))?;
    let mut matrices = Vec::with_capacity(families.len());
    for f in families {
        let file = f["file"]
            .as_str()
            .ok_or_else(|| Error::Data(format!("{}: malformed family entry", dir.display())))?;
        let path = dir.join(file);
        if !path.is_file() {
            return Err(missing(&path, "featurize"));
        }
        let reader = File::open(&path).map_err(|e| Error::io(&path, e))?;
        matrices.push(FeatureMatrix::read_triplets(reader, &path.to_string_lossy(), Some(user_ids.clone()))?);
    }
    Ok(Dataset {
        user_ids,
        word_counts,
        trust_3q: scores.iter().map(|s| s.trust_3q).collect(),
        trust_10q: scores.iter().map(|s| s.trust_10q).collect(),
        matrices,
        feature_config: built.features,
    })
}

fn default_features(cfg: &RunConfig) -> Res<Dataset> {
    load_features(cfg, &out_dir(cfg, "features"), true)
}

/// The model `train` fits for `cfg` on `data`.
pub fn fit_model(cfg: &RunConfig, data: &Dataset) -> Res<TraitModel> {
    let ecfg = cfg.eval_config();
    Ok(match cfg.train.group {
        TrainGroup::Short => trustlang::eval::fit_s2_s3_model(data, &ecfg, cfg.seed)?.0,
        TrainGroup::Long => {
            let rows = data.long_rows(ecfg.test_wc_threshold);
            data.fit(&rows, Version::Long, &ecfg.model, cfg.seed)?
        }
    })
}

pub fn train(cfg: &RunConfig) -> Res {
    let data = default_features(cfg)?;
    let model = fit_model(cfg, &data)?;
    let dir = out_dir(cfg, "model");
    let path = dir.join("model.json");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    model.save(&path)?;
    let details = json!({
        "group": cfg.train.group,
        "n_train": model.metadata.n_train,
        "label_version": model.metadata.label_version,
        "lambda": model.lambda,
        "families": model.metadata.families,
        "dims": model.pipeline.dims(),
    });
    Manifest::new("train", cfg, details)?.write(&dir, std::slice::from_ref(&path))?;
    println!(
        "{}: {} users, lambda {}, {} dimensions",
        path.display(),
        model.metadata.n_train,
        model.lambda,
        model.pipeline.dims()
    );
    Ok(())
}

pub fn predict(cfg: &RunConfig, model: Option<PathBuf>, features: Option<PathBuf>) -> Res {
    let model_path = model.unwrap_or_else(|| out_dir(cfg, "model").join("model.json"));
    if !model_path.is_file() {
        return Err(missing(&model_path, "train"));
    }
    let model = TraitModel::load(&model_path)?;
    let data = match &features {
        Some(dir) => load_features(cfg, dir, false)?,
        None => default_features(cfg)?,
    };
    if model.metadata.feature_config != data.feature_config {
        return Err(Error::Data(format!(
            "{} was trained on features built with different settings (re-run `trustlang train`)",
            model_path.display()
        ))
        .into());
    }
    let predictions = model.predict(&data.matrices)?;

    let dir = out_dir(cfg, "predictions");
    let path = dir.join("predictions.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["user_id", "word_count", "prediction"]).map_err(csv_err)?;
    for ((id, wc), p) in data.user_ids.iter().zip(&data.word_counts).zip(&predictions) {
        w.write_record([id.as_str(), &wc.to_string(), &p.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    drop(w);

    let model_bytes = std::fs::read(&model_path).map_err(|e| Error::io(&model_path, e))?;
    let details = json!({
        "model": model_path,
        "model_sha256": sha256_hex(&model_bytes),
        "features": features,
        "n_users": data.len(),
    });
    Manifest::new("predict", cfg, details)?.write(&dir, std::slice::from_ref(&path))?;
    println!("{}: {} predictions", path.display(), predictions.len());
    Ok(())
}

fn write_report(dir: &Path, report: &EvaluationReport, paths: &mut Vec<PathBuf>) -> Res {
    let s = &report.setting;
    let json_path = dir.join(format!("{s}.json"));
    let mut w = create(&json_path)?;
    writeln!(w, "{}", report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    w.flush().map_err(|e| Error::io(&json_path, e))?;
    paths.push(json_path);

    let text_path = dir.join(format!("{s}.txt"));
    let mut w = create(&text_path)?;
    write!(w, "{}", report.to_text()).map_err(|e| Error::io(&text_path, e))?;
    w.flush().map_err(|e| Error::io(&text_path, e))?;
    paths.push(text_path);

    let residuals = dir.join(format!("residuals_{s}.csv"));
    report.write_residuals_csv(create(&residuals)?)?;
    paths.push(residuals);

    if let Some(bins) = &report.bins {
        let p = dir.join(format!("bins_{s}.csv"));
        write_bins_csv(bins, create(&p)?)?;
        paths.push(p);
    }
    Ok(())
}

fn write_families_csv(rows: &[FamilyComparisonRow], path: &Path) -> Res {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["families", "dims", "pearson_r", "r_dis", "mse"]).map_err(csv_err)?;
    for r in rows {
        let fams: Vec<String> = r.families.iter().map(|f| f.to_string()).collect();
        w.write_record([
            fams.join("+"),
            r.dims.to_string(),
            r.pearson_r.to_string(),
            r.r_dis.to_string(),
            r.mse.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reports for the configured settings, in the configured order.
pub fn evaluate(cfg: &RunConfig, data: &Dataset) -> Res<Vec<EvaluationReport>> {
    let ecfg = cfg.eval_config();
    let mut s2s3 = None;
    let mut reports = Vec::new();
    for &setting in &cfg.eval.settings {
        let report = match setting {
            Setting::S1 => run_setting(data, Setting::S1, &ecfg, cfg.seed)?,
            Setting::S2 | Setting::S3 => {
                if s2s3.is_none() {
                    let (s2, s3, _) = run_s2_s3(data, &ecfg, cfg.seed)?;
                    s2s3 = Some((s2, s3));
                }
                let (s2, s3) = s2s3.as_ref().expect("filled above");
                if setting == Setting::S2 { s2.clone() } else { s3.clone() }
            }
        };
        reports.push(report);
    }
    Ok(reports)
}

pub fn eval(cfg: &RunConfig) -> Res {
    if cfg.eval.settings.is_empty() && cfg.eval.sweep_sizes.is_empty() && cfg.eval.family_sets.is_empty() {
        return Err(CliError::Usage("nothing to evaluate: eval.settings is empty".into()));
    }
    let data = default_features(cfg)?;
    let ecfg = cfg.eval_config();
    let dir = out_dir(cfg, "eval");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths = Vec::new();

    let reports = evaluate(cfg, &data)?;
    for r in &reports {
        write_report(&dir, r, &mut paths)?;
        print!("{}", r.to_text());
    }
    if !cfg.eval.sweep_sizes.is_empty() {
        let rows = training_size_sweep(
            &data,
            &cfg.eval.sweep_sizes,
            &cfg.eval.sweep_schemes,
            cfg.eval.sweep_repeats,
            &ecfg,
            cfg.seed,
        )?;
        let p = dir.join("sweep.csv");
        write_sweep_csv(&rows, create(&p)?)?;
        paths.push(p);
        for r in &rows {
            println!("sweep\t{}\t{}\tr={:.4}", r.size, r.scheme, r.mean_r);
        }
    }
    if !cfg.eval.family_sets.is_empty() {
        let rows = compare_families(&data, &cfg.eval.family_sets, &ecfg, cfg.seed)?;
        let p = dir.join("families.csv");
        write_families_csv(&rows, &p)?;
        paths.push(p);
    }
    let details = json!({
        "settings": cfg.eval.settings,
        "summary": reports
            .iter()
            .map(|r| json!({ "setting": r.setting, "pearson_r": r.pearson_r, "r_dis": r.r_dis, "mse": r.mse }))
            .collect::<Vec<_>>(),
    });
    Manifest::new("eval", cfg, details)?.write(&dir, &paths)?;
    Ok(())
}

/// All DLA results for the configured label, plus the top-k selection.
pub fn differential(cfg: &RunConfig, data: &Dataset) -> Res<(Vec<DlaResult>, Vec<DlaResult>)> {
    let labels = data.labels(cfg.dla.label);
    let rows: Vec<usize> = (0..data.len()).filter(|&r| labels[r].is_some()).collect();
    let y: Vec<f64> = rows.iter().map(|&r| labels[r].expect("filtered")).collect();
    let dcfg = cfg.dla_config();
    let results = run_dla(&data.matrices, &rows, &y, &dcfg)?;
    let top = top_k(&results, dcfg.k, dcfg.sign);
    Ok((results, top))
}

pub fn dla(cfg: &RunConfig) -> Res {
    let data = default_features(cfg)?;
    let (results, top) = differential(cfg, &data)?;
    let dir = out_dir(cfg, "dla");

    let cloud = dir.join("wordcloud.csv");
    write_wordcloud_csv(&top, create(&cloud)?)?;

    let all = dir.join("results.csv");
    let mut w = csv::Writer::from_writer(create(&all)?);
    w.write_record(["feature", "r", "p", "passed", "frequency"]).map_err(csv_err)?;
    for r in &results {
        w.write_record([
            r.feature.as_str(),
            &r.r.to_string(),
            &r.p.to_string(),
            if r.passed { "1" } else { "0" },
            &r.frequency.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&all, e))?;
    drop(w);

    let details = json!({
        "label": cfg.dla.label,
        "tested": results.len(),
        "passed": results.iter().filter(|r| r.passed).count(),
    });
    Manifest::new("dla", cfg, details)?.write(&dir, &[cloud, all])?;
    for r in &top {
        println!("{}\t{:+.4}\t{:.3e}", r.feature, r.r, r.p);
    }
    Ok(())
}
