//! Acceptance suite. Runs every criterion in sequence (the corpora are large,
//! so they are never held in memory together) and prints one line per
//! criterion before failing on any miss.
//!
//! `cargo test --release -p trustlang --test acceptance -- --nocapture`

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trustlang::corpus::{load_corpus, reverse_score, Corpus, Message, QuestionnaireResponse};
use trustlang::dla::{benjamini_hochberg, run_dla, top_k, write_wordcloud_csv, DlaConfig, Sign};
use trustlang::eval::{
    cross_validate_10fold, disattenuated_r, fit_s2_s3_model, run_s2_s3, run_setting, training_size_sweep,
    Dataset, EvalConfig, Setting, SweepScheme,
};
use trustlang::features::{FeatureConfig, Lexicon};
use trustlang::model::{fit_ridge, WeightKind, WeightScheme};
use trustlang::reduce::{randomized_svd, RsvdParams};
use trustlang::synth::{generate, SynthConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

// ---------------------------------------------------------------- 1. ridge

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Normal equations in the original feature units: penalizing the z-scored
/// coefficient βⱼ·sdⱼ is the penalty λ·sdⱼ²·βⱼ², and the intercept is free.
fn ridge_oracle(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let d = x[0].len();
    let wmax = w.iter().cloned().fold(0.0, f64::max);
    let w: Vec<f64> = w.iter().map(|v| v / wmax).collect();
    let ws: f64 = w.iter().sum();
    let sd2: Vec<f64> = (0..d)
        .map(|j| {
            let m = x.iter().zip(&w).map(|(r, wi)| wi * r[j]).sum::<f64>() / ws;
            x.iter().zip(&w).map(|(r, wi)| wi * (r[j] - m).powi(2)).sum::<f64>() / ws
        })
        .collect();
    let aug: Vec<Vec<f64>> = x
        .iter()
        .map(|r| std::iter::once(1.0).chain(r.iter().cloned()).collect())
        .collect();
    let mut a = vec![vec![0.0; d + 1]; d + 1];
    let mut b = vec![0.0; d + 1];
    for ((row, yi), wi) in aug.iter().zip(y).zip(&w) {
        for i in 0..=d {
            b[i] += wi * row[i] * yi;
            for j in 0..=d {
                a[i][j] += wi * row[i] * row[j];
            }
        }
    }
    for j in 0..d {
        a[j + 1][j + 1] += lambda * sd2[j];
    }
    let sol = gauss_solve(a, b);
    (sol[0], sol[1..].to_vec())
}

fn criterion_ridge() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut problems = 0;
    for _ in 0..34 {
        let (n, d) = (20, 5);
        let scales: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
        let offsets: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| offsets[j] + scales[j] * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        let beta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + 0.5 * noise
            })
            .collect();
        let w: Vec<f64> = (0..n)
            .map(|i| if i % 7 == 3 { 0.0 } else { rng.random_range(0.0..3.0) })
            .collect();
        let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
        for lambda in [0.0, 1.0, 100.0] {
            if problems == 100 {
                break;
            }
            problems += 1;
            let fit = fit_ridge(&xm, &y, &w, lambda).expect("fit");
            let (b0, b) = ridge_oracle(&x, &y, &w, lambda);
            worst = worst.max((fit.intercept - b0).abs());
            for (got, want) in fit.coefficients.iter().zip(&b) {
                worst = worst.max((got - want).abs());
            }
        }
    }
    let t = start.elapsed();
    outcome(
        problems == 100 && worst <= 1e-8 && within(t, 5),
        format!("{problems} problems, max |Δ| = {worst:.2e} (≤ 1e-8), {t:.2?} (< 5 s)"),
    )
}

// ---------------------------------------------------------------- 2. rsvd

fn criterion_rsvd() -> Outcome {
    let start = Instant::now();
    let mut worst_sv = 0.0f64;
    let mut worst_orth = 0.0f64;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let a = DMatrix::from_fn(50, 30, |_, _| StandardNormal.sample(&mut rng));
        let exact = {
            let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().cloned().collect();
            s.sort_by(|x, y| y.total_cmp(x));
            s
        };
        let r = randomized_svd(&a, 10, RsvdParams::default(), trial);
        assert_eq!(r.singular_values.len(), 10);
        for (got, want) in r.singular_values.iter().zip(&exact) {
            worst_sv = worst_sv.max((got - want).abs() / want);
        }
        let gram = r.components.tr_mul(&r.components);
        for i in 0..10 {
            for j in 0..10 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((gram[(i, j)] - target).abs());
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst_sv <= 1e-6 && worst_orth <= 1e-8 && within(t, 10),
        format!(
            "50 matrices 50x30, max rel σ error {worst_sv:.2e} (≤ 1e-6), orthonormality {worst_orth:.2e} (≤ 1e-8), {t:.2?} (< 10 s)"
        ),
    )
}

// ---------------------------------------------------------------- 3. BH

/// Largest k such that some k p-values all sit at or below k·α/m, found by
/// enumerating every subset; everything at or below that cutoff is rejected.
fn bh_brute_force(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let mut best = 0usize;
    for mask in 1u32..(1 << m) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let cut = k as f64 * alpha / m as f64;
        if (0..m).filter(|i| mask & (1 << i) != 0).all(|i| p[i] <= cut) {
            best = k;
        }
    }
    if best == 0 {
        return vec![false; m];
    }
    let cut = best as f64 * alpha / m as f64;
    p.iter().map(|&v| v <= cut).collect()
}

fn criterion_bh() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut rejections = 0usize;
    let alpha = 0.05;
    for _ in 0..1000 {
        let m = rng.random_range(1..=12usize);
        let mut p: Vec<f64> = Vec::with_capacity(m);
        for i in 0..m {
            let v = match rng.random_range(0..10) {
                0..=3 => rng.random::<f64>().powi(4) * 0.05,
                4 if i > 0 => p[rng.random_range(0..i)],
                5 => (rng.random_range(1..=m) as f64) * alpha / m as f64,
                _ => rng.random::<f64>(),
            };
            p.push(v);
        }
        let got = benjamini_hochberg(&p, alpha).expect("bh");
        let want = bh_brute_force(&p, alpha);
        rejections += want.iter().filter(|&&r| r).count();
        if got != want {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && within(t, 5),
        format!("1000 lists (m ≤ 12, {rejections} rejections), {mismatches} mismatches, {t:.2?} (< 5 s)"),
    )
}

// ---------------------------------------------------------------- 4. formulas

fn criterion_formulas() -> Outcome {
    let involution = (1u8..=5).all(|v| reverse_score(reverse_score(v).unwrap()).unwrap() == v)
        && (1u8..=5).all(|v| reverse_score(v).unwrap() == 6 - v);
    let lin = WeightScheme::new(WeightKind::Linear);
    let logi = WeightScheme::new(WeightKind::Logistic);
    let linear = lin.weight(200) == 0.0 && lin.weight(1000) == 1.0 && lin.weight(600) == 0.5;
    let logistic = logi.weight(600) == 0.5 && logi.weight(400) <= 1e-10;
    let dis = disattenuated_r(0.70, 0.70, 0.70).unwrap() == 1.0;
    outcome(
        involution && linear && logistic && dis,
        format!(
            "reverse involution {involution}, W_linear {linear}, W_logistic {logistic} (W(400) = {:.1e}), r_dis(.7,.7,.7) = {}",
            logi.weight(400),
            disattenuated_r(0.70, 0.70, 0.70).unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 5, 6, 8. synthetic replication

struct SeedRun {
    seed: u64,
    r1: f64,
    r2: f64,
    r3: f64,
    mae_low: f64,
    mae_mid: f64,
    planted_pos: bool,
    planted_neg: bool,
    eval_time: Duration,
}

fn bin_error(report: &trustlang::eval::EvaluationReport, lower: u64) -> f64 {
    report
        .bins
        .as_ref()
        .expect("bins")
        .iter()
        .find(|b| b.lower == lower)
        .and_then(|b| b.error)
        .unwrap_or(f64::NAN)
}

fn replication_run(seed: u64) -> SeedRun {
    let start = Instant::now();
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let synth = generate(&cfg).expect("synth");
    let mut corpus = synth.to_corpus().expect("corpus");
    let data = Dataset::build(&mut corpus, &FeatureConfig::default(), &synth.lexica).expect("features");
    let ecfg = EvalConfig::default();
    let s1 = cross_validate_10fold(&data, &ecfg, seed).expect("S1");
    let (s2, s3, _) = run_s2_s3(&data, &ecfg, seed).expect("S2/S3");
    let eval_time = start.elapsed();

    let rows: Vec<usize> = (0..data.len()).filter(|&r| data.trust_3q[r].is_some()).collect();
    let labels: Vec<f64> = rows.iter().map(|&r| data.trust_3q[r].unwrap()).collect();
    let results = run_dla(&data.matrices, &rows, &labels, &DlaConfig::default()).expect("dla");
    let names = |sign| -> HashSet<String> { top_k(&results, 10, sign).into_iter().map(|r| r.feature).collect() };
    let (pos, neg) = (names(Sign::Positive), names(Sign::Negative));
    SeedRun {
        seed,
        r1: s1.pearson_r,
        r2: s2.pearson_r,
        r3: s3.pearson_r,
        mae_low: bin_error(&s3, 0),
        mae_mid: bin_error(&s3, 1000),
        planted_pos: synth.vocabulary.positive.iter().all(|w| pos.contains(w)),
        planted_neg: synth.vocabulary.negative.iter().all(|w| neg.contains(w)),
        eval_time,
    }
}

fn criteria_replication() -> (Outcome, Outcome, Outcome) {
    let runs: Vec<SeedRun> = (0..5).map(replication_run).collect();
    let total: Duration = runs.iter().map(|r| r.eval_time).sum();

    let table2 = runs.iter().filter(|r| r.r3 > r.r2 && r.r1 < r.r3).count();
    let rs: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: S1 {:.3} S2 {:.3} S3 {:.3}", r.seed, r.r1, r.r2, r.r3))
        .collect();
    let c5 = outcome(
        table2 >= 4 && within(total, 180),
        format!("{table2}/5 seeds with S3 > S2 and S1 < S3 (need 4); {}; {total:.1?} (< 3 min)", rs.join("; ")),
    );

    let fig1 = runs.iter().filter(|r| r.mae_mid < r.mae_low).count();
    let bins: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.3} vs {:.3}", r.seed, r.mae_mid, r.mae_low))
        .collect();
    let c6 = outcome(
        fig1 >= 4,
        format!("{fig1}/5 seeds with MAE[1000,2500) < MAE[0,250) (need 4); {}", bins.join("; ")),
    );

    let planted = runs.iter().filter(|r| r.planted_pos && r.planted_neg).count();
    let c8 = outcome(
        planted >= 4,
        format!("{planted}/5 seeds with all planted words in both top-10 lists at alpha 0.05 (need 4)"),
    );
    (c5, c6, c8)
}

// ---------------------------------------------------------------- 7. sweep

fn criterion_sweep() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        seed: 0,
        n_short: 8400,
        wc_median: 1000.0,
        ..SynthConfig::default()
    };
    let synth = generate(&cfg).expect("synth");
    let mut corpus = synth.to_corpus().expect("corpus");
    let data = Dataset::build(&mut corpus, &FeatureConfig::default(), &synth.lexica).expect("features");
    drop(corpus);
    let schemes = [SweepScheme::ThresholdHigh, SweepScheme::ThresholdLow];
    let rows = training_size_sweep(&data, &[200, 4000], &schemes, 5, &EvalConfig::default(), 0).expect("sweep");
    let r = |size: usize, scheme: SweepScheme| {
        rows.iter()
            .find(|row| row.size == size && row.scheme == scheme)
            .map(|row| row.mean_r)
            .expect("sweep cell")
    };
    let (h200, l200) = (r(200, SweepScheme::ThresholdHigh), r(200, SweepScheme::ThresholdLow));
    let (h4k, l4k) = (r(4000, SweepScheme::ThresholdHigh), r(4000, SweepScheme::ThresholdLow));
    outcome(
        l200 > h200 && h4k >= l4k - 0.02,
        format!(
            "200 users: threshold-200 {l200:.4} vs threshold-1000 {h200:.4}; 4000 users: threshold-1000 {h4k:.4} vs threshold-200 {l4k:.4} (margin 0.02); {:.1?}",
            start.elapsed()
        ),
    )
}

// ---------------------------------------------------------------- 9. leakage

fn user_index(id: &str) -> usize {
    id[1..].parse().expect("synthetic user id")
}

fn leakage_model(messages: Vec<Message>, responses: Vec<QuestionnaireResponse>, lexica: &[Lexicon]) -> (String, String) {
    let mut corpus = Corpus::from_parts(messages, responses).expect("corpus");
    let data = Dataset::build(&mut corpus, &FeatureConfig::default(), lexica).expect("features");
    let (model, test) = fit_s2_s3_model(&data, &EvalConfig::default(), 7).expect("fit");
    assert!(!test.is_empty());
    (model.pipeline.to_json().expect("pipeline json"), model.to_json().expect("model json"))
}

fn criterion_leakage() -> Outcome {
    let base_cfg = SynthConfig {
        seed: 11,
        n_short: 800,
        n_long: 120,
        ..SynthConfig::default()
    };
    let base = generate(&base_cfg).expect("synth");
    let other = generate(&SynthConfig { seed: 12, ..base_cfg.clone() }).expect("synth");
    let n_long = base_cfg.n_long;
    let is_test = |id: &str| user_index(id) < n_long;

    let reference = leakage_model(base.messages.clone(), base.responses.clone(), &base.lexica);

    // Test users permuted: user i takes the messages and answers of user n_long-1-i.
    let rename = |id: &str| format!("u{:06}", n_long - 1 - user_index(id));
    let permuted_msgs = base
        .messages
        .iter()
        .cloned()
        .map(|mut m| {
            if is_test(&m.user_id) {
                m.user_id = rename(&m.user_id);
            }
            m
        })
        .collect();
    let permuted_resp = base
        .responses
        .iter()
        .cloned()
        .map(|mut r| {
            if is_test(&r.user_id) {
                r.user_id = rename(&r.user_id);
            }
            r
        })
        .collect();
    let permuted = leakage_model(permuted_msgs, permuted_resp, &base.lexica);

    // Test users replaced by different people.
    let replaced_msgs = base
        .messages
        .iter()
        .filter(|m| !is_test(&m.user_id))
        .chain(other.messages.iter().filter(|m| is_test(&m.user_id)))
        .cloned()
        .collect();
    let replaced_resp = base
        .responses
        .iter()
        .filter(|r| !is_test(&r.user_id))
        .chain(other.responses.iter().filter(|r| is_test(&r.user_id)))
        .cloned()
        .collect();
    let replaced = leakage_model(replaced_msgs, replaced_resp, &base.lexica);

    let same = |a: &(String, String), b: &(String, String)| (a.0 == b.0, a.1 == b.1);
    let (pp, pm) = same(&reference, &permuted);
    let (rp, rm) = same(&reference, &replaced);
    outcome(
        pp && pm && rp && rm,
        format!(
            "permuted test users: pipeline identical {pp}, model identical {pm}; replaced test users: pipeline identical {rp}, model identical {rm} ({} model bytes)",
            reference.1.len()
        ),
    )
}

// ---------------------------------------------------------------- 10. reproducibility

fn demo_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let synth = generate(&SynthConfig::demo()).expect("synth");
    let written = synth.write(dir).expect("write corpus");
    let mut out: Vec<(String, Vec<u8>)> = written
        .iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(p).unwrap()))
        .collect();

    let mut corpus = load_corpus(&dir.join("messages.jsonl"), &dir.join("responses.csv")).expect("load");
    let lexica: Vec<Lexicon> = synth
        .lexica
        .iter()
        .map(|l| Lexicon::load(&dir.join("lexica").join(format!("{}.csv", l.name))).expect("lexicon"))
        .collect();
    let data = Dataset::build(&mut corpus, &FeatureConfig::default(), &lexica).expect("features");
    let ecfg = EvalConfig::default();
    let s1 = run_setting(&data, Setting::S1, &ecfg, 42).expect("S1");
    let (s2, s3, model) = run_s2_s3(&data, &ecfg, 42).expect("S2/S3");
    out.push(("model.json".into(), model.to_json().unwrap().into_bytes()));
    for r in [&s1, &s2, &s3] {
        out.push((format!("{}.json", r.setting), r.to_json().unwrap().into_bytes()));
        let mut csv = Vec::new();
        r.write_residuals_csv(&mut csv).unwrap();
        out.push((format!("residuals_{}.csv", r.setting), csv));
    }
    let rows: Vec<usize> = (0..data.len()).filter(|&r| data.trust_3q[r].is_some()).collect();
    let labels: Vec<f64> = rows.iter().map(|&r| data.trust_3q[r].unwrap()).collect();
    let dcfg = DlaConfig::default();
    let results = run_dla(&data.matrices, &rows, &labels, &dcfg).expect("dla");
    let mut cloud = Vec::new();
    write_wordcloud_csv(&top_k(&results, dcfg.k, dcfg.sign), &mut cloud).unwrap();
    out.push(("wordcloud.csv".into(), cloud));
    out
}

fn criterion_reproducibility() -> Outcome {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = demo_pipeline(a.path());
    let second = demo_pipeline(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        first.len() == second.len() && differing.is_empty(),
        format!(
            "{} artifacts compared across two demo runs, differing: {differing:?}; {:.1?}",
            first.len(),
            start.elapsed()
        ),
    )
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "weighted ridge oracle", guarded(criterion_ridge)),
        (2, "randomized SVD oracle", guarded(criterion_rsvd)),
        (3, "Benjamini-Hochberg oracle", guarded(criterion_bh)),
        (4, "formula fidelity", guarded(criterion_formulas)),
    ];
    let (c5, c6, c8) = catch_unwind(AssertUnwindSafe(criteria_replication)).unwrap_or_else(|_| {
        let f = || outcome(false, "replication run panicked");
        (f(), f(), f())
    });
    results.push((5, "S1 < S3 and S2 < S3 on synthetic data", c5));
    results.push((6, "error falls with word count", c6));
    results.push((7, "training-size sweep", guarded(criterion_sweep)));
    results.push((8, "planted-feature recovery by DLA", c8));
    results.push((9, "no test-user leakage", guarded(criterion_leakage)));
    results.push((10, "byte-identical reruns", guarded(criterion_reproducibility)));
    results.sort_by_key(|r| r.0);

    for (id, name, o) in &results {
        println!("criterion {id:>2} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
