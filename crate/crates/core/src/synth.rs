//! Seeded synthetic corpora with a planted latent trait.
//!
//! Each user draws a trait `z ~ N(0, 1)` and a log-normal word count. Tokens
//! come from a unigram distribution over planted positive words, planted
//! negative words and a Zipfian neutral pool; the planted words' logits move
//! by `±signal_strength · z` before softmax renormalization. Questionnaire
//! items are answered `clamp(round(3 + z + noise), 1, 5)`, stored inverted for
//! reverse-scored items.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, weighted::WeightedAliasIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_messages, write_responses, Corpus, Message, QuestionnaireResponse};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::features::Lexicon;

const POSITIVE_WORDS: &[&str] = &[
    "friends", "family", "thanks", "love", "together", "team", "believe", "kind", "share", "support",
];
const NEGATIVE_WORDS: &[&str] = &[
    "liars", "hate", "fake", "suspicious", "never", "lies", "cheat", "scam", "fraud", "alone",
];
const SOCIAL_TOKENS: &[&str] = &[":)", "lol", "#tbt", "!", "?"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Users who answer only the 3-question subset.
    pub n_short: usize,
    /// Users who answer all items (and so have both scores).
    pub n_long: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_neutral: usize,
    /// Logit shift of each planted word per unit of trait.
    pub signal_strength: f64,
    /// Probability of each planted word at `z = 0`.
    pub loaded_base_prob: f64,
    pub wc_median: f64,
    pub wc_sigma: f64,
    pub wc_min: u64,
    pub wc_max: u64,
    pub item_noise_sd: f64,
    pub items_short: usize,
    pub items_long: usize,
    pub reverse_fraction: f64,
    pub min_message_len: usize,
    pub max_message_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_short: 5000,
            n_long: 600,
            n_positive: 5,
            n_negative: 5,
            n_neutral: 200,
            signal_strength: 0.17,
            loaded_base_prob: 0.004,
            wc_median: 800.0,
            wc_sigma: 1.0,
            wc_min: 20,
            wc_max: 6000,
            item_noise_sd: 1.2,
            items_short: 3,
            items_long: 10,
            reverse_fraction: 0.3,
            min_message_len: 5,
            max_message_len: 40,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// A small corpus for quick demos and tests.
    pub fn demo() -> Self {
        SynthConfig {
            n_short: 1500,
            n_long: 300,
            signal_strength: 0.5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.n_positive == 0 || self.n_negative == 0 || self.n_neutral == 0 {
            return bad("word pool sizes must be at least 1");
        }
        if self.n_short + self.n_long == 0 {
            return bad("no users requested");
        }
        if !(self.item_noise_sd > 0.0) {
            return bad("item_noise_sd must be positive");
        }
        if !(self.signal_strength >= 0.0) || !self.signal_strength.is_finite() {
            return bad("signal_strength must be finite and non-negative");
        }
        let loaded = (self.n_positive + self.n_negative) as f64 * self.loaded_base_prob;
        if !(self.loaded_base_prob > 0.0) || loaded >= 1.0 {
            return bad("planted words must leave probability mass for the neutral pool");
        }
        if !(self.wc_median >= 1.0) || !(self.wc_sigma >= 0.0) || self.wc_min > self.wc_max || self.wc_max == 0 {
            return bad("invalid word-count distribution");
        }
        if self.items_short == 0 || self.items_short > self.items_long {
            return bad("need 1 <= items_short <= items_long");
        }
        if !(0.0..=1.0).contains(&self.reverse_fraction) {
            return bad("reverse_fraction must lie in [0, 1]");
        }
        if self.min_message_len == 0 || self.min_message_len > self.max_message_len {
            return bad("invalid message length range");
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.n_short + self.n_long
    }
}

/// Fixed vocabulary for a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub neutral: Vec<String>,
}

fn pseudo_word(mut i: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let mut w = String::new();
    loop {
        let s = i % syllables;
        w.push(CONSONANTS[s / VOWELS.len()] as char);
        w.push(VOWELS[s % VOWELS.len()] as char);
        i /= syllables;
        if i == 0 {
            break;
        }
        i -= 1;
    }
    w
}

fn planted(list: &[&str], n: usize, tag: &str) -> Vec<String> {
    (0..n)
        .map(|i| list.get(i).map_or_else(|| format!("{tag}{i}"), |w| w.to_string()))
        .collect()
}

impl Vocabulary {
    pub fn new(cfg: &SynthConfig) -> Self {
        let positive = planted(POSITIVE_WORDS, cfg.n_positive, "trustpos");
        let negative = planted(NEGATIVE_WORDS, cfg.n_negative, "trustneg");
        let taken: std::collections::HashSet<&str> =
            positive.iter().chain(&negative).map(String::as_str).collect();
        let mut neutral: Vec<String> = SOCIAL_TOKENS
            .iter()
            .take(cfg.n_neutral)
            .map(|s| s.to_string())
            .collect();
        // Two-syllable words first, so the common words stay short.
        let mut i = CONSONANTS.len() * VOWELS.len();
        while neutral.len() < cfg.n_neutral {
            let w = pseudo_word(i);
            if !taken.contains(w.as_str()) {
                neutral.push(w);
            }
            i += 1;
        }
        Vocabulary {
            positive,
            negative,
            neutral,
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.positive.iter().chain(&self.negative).chain(&self.neutral)
    }

    /// Unigram probabilities for a user with trait `z`, in `all()` order.
    fn probabilities(&self, cfg: &SynthConfig, z: f64) -> Vec<f64> {
        let n_loaded = self.positive.len() + self.negative.len();
        let neutral_mass = 1.0 - n_loaded as f64 * cfg.loaded_base_prob;
        let zipf: Vec<f64> = (0..self.neutral.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        let zsum: f64 = zipf.iter().sum();
        let shift = cfg.signal_strength * z;
        let logits: Vec<f64> = std::iter::repeat_n(cfg.loaded_base_prob.ln() + shift, self.positive.len())
            .chain(std::iter::repeat_n(cfg.loaded_base_prob.ln() - shift, self.negative.len()))
            .chain(zipf.iter().map(|p| (p / zsum * neutral_mass).ln()))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// Item ids and flags for the configured questionnaire.
pub fn items(cfg: &SynthConfig) -> Vec<(String, bool, bool)> {
    let f = cfg.reverse_fraction;
    (0..cfg.items_long)
        .map(|i| {
            let reversed = ((i + 1) as f64 * f + 0.5).floor() > (i as f64 * f + 0.5).floor();
            (format!("item{:02}", i + 1), reversed, i < cfg.items_short)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub vocabulary: Vocabulary,
    pub messages: Vec<Message>,
    pub responses: Vec<QuestionnaireResponse>,
    /// `(user_id, trait)`, sorted by user id.
    pub ground_truth: Vec<(String, f64)>,
    pub lexica: Vec<Lexicon>,
}

struct GeneratedUser {
    messages: Vec<Message>,
    responses: Vec<QuestionnaireResponse>,
    trait_value: f64,
}

fn user_id(i: usize) -> String {
    format!("u{i:06}")
}

fn generate_user(
    i: usize,
    cfg: &SynthConfig,
    vocab: &Vocabulary,
    words: &[&str],
    item_specs: &[(String, bool, bool)],
) -> GeneratedUser {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
    let id = user_id(i);
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
    let wc_dist = LogNormal::new(cfg.wc_median.ln(), cfg.wc_sigma).expect("validated");
    let wc = (wc_dist.sample(&mut rng).round() as u64).clamp(cfg.wc_min.max(1), cfg.wc_max) as usize;

    let probs = vocab.probabilities(cfg, z);
    let picker = WeightedAliasIndex::new(probs).expect("valid probabilities");
    let mut messages = Vec::new();
    let mut produced = 0;
    while produced < wc {
        let len = rng.random_range(cfg.min_message_len..=cfg.max_message_len).min(wc - produced);
        let text = (0..len).map(|_| words[picker.sample(&mut rng)]).collect::<Vec<_>>().join(" ");
        messages.push(Message {
            user_id: id.clone(),
            message_id: format!("{id}-{:04}", messages.len()),
            text,
            created_at: None,
        });
        produced += len;
    }

    let long = i < cfg.n_long;
    let noise = Normal::new(0.0, cfg.item_noise_sd).expect("validated");
    let responses = item_specs
        .iter()
        .filter(|(_, _, in_3q)| long || *in_3q)
        .map(|(item, reversed, in_3q)| {
            let raw = (3.0 + z + noise.sample(&mut rng)).round().clamp(1.0, 5.0) as u8;
            QuestionnaireResponse {
                user_id: id.clone(),
                item_id: item.clone(),
                value: if *reversed { 6 - raw } else { raw },
                reverse_scored: *reversed,
                in_3q: *in_3q,
            }
        })
        .collect();
    GeneratedUser {
        messages,
        responses,
        trait_value: z,
    }
}

fn demo_lexica(cfg: &SynthConfig, vocab: &Vocabulary) -> Result<Vec<Lexicon>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let n_topics = 8;
    let mut topic_triples = Vec::new();
    for w in vocab.all() {
        let a = rng.random_range(0..n_topics);
        let b = (a + 1 + rng.random_range(0..n_topics - 1)) % n_topics;
        let share: f64 = rng.random_range(0.5..1.0);
        topic_triples.push((w.clone(), format!("topic{a}"), share));
        topic_triples.push((w.clone(), format!("topic{b}"), 1.0 - share));
    }
    let sentiment = vocab
        .positive
        .iter()
        .map(|w| (w.clone(), "warm".to_string(), 1.0))
        .chain(vocab.negative.iter().map(|w| (w.clone(), "wary".to_string(), 1.0)));
    Ok(vec![
        Lexicon::from_entries("topics", topic_triples)?,
        Lexicon::from_entries("sentiment", sentiment)?,
    ])
}

/// Generate a corpus. Output is a pure function of the configuration.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg);
    let words: Vec<&str> = vocab.all().map(String::as_str).collect();
    let item_specs = items(cfg);
    let users: Vec<GeneratedUser> = (0..cfg.n_users())
        .into_par_iter()
        .map(|i| generate_user(i, cfg, &vocab, &words, &item_specs))
        .collect();

    let mut messages = Vec::new();
    let mut responses = Vec::new();
    let mut ground_truth = Vec::with_capacity(users.len());
    for (i, u) in users.into_iter().enumerate() {
        messages.extend(u.messages);
        responses.extend(u.responses);
        ground_truth.push((user_id(i), u.trait_value));
    }
    let lexica = demo_lexica(cfg, &vocab)?;
    Ok(SynthCorpus {
        config: cfg.clone(),
        vocabulary: vocab,
        messages,
        responses,
        ground_truth,
        lexica,
    })
}

impl SynthCorpus {
    pub fn to_corpus(&self) -> Result<Corpus> {
        Corpus::from_parts(self.messages.clone(), self.responses.clone())
    }

    pub fn trait_map(&self) -> HashMap<&str, f64> {
        self.ground_truth.iter().map(|(u, z)| (u.as_str(), *z)).collect()
    }

    /// Write `messages.jsonl`, `responses.csv`, `ground_truth.csv` and
    /// `lexica/<name>.csv` under `dir`, returning the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let create = |p: &Path| std::fs::File::create(p).map_err(|e| Error::io(p, e));
        std::fs::create_dir_all(dir.join("lexica")).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();

        let p = dir.join("messages.jsonl");
        write_messages(&self.messages, create(&p)?)?;
        paths.push(p);
        let p = dir.join("responses.csv");
        write_responses(&self.responses, create(&p)?)?;
        paths.push(p);

        let p = dir.join("ground_truth.csv");
        let mut w = std::io::BufWriter::new(create(&p)?);
        let io = |e| Error::io(dir.join("ground_truth.csv"), e);
        writeln!(w, "user_id,trait").map_err(io)?;
        for (u, z) in &self.ground_truth {
            writeln!(w, "{u},{z}").map_err(io)?;
        }
        w.flush().map_err(io)?;
        paths.push(p);

        for lex in &self.lexica {
            let p = dir.join("lexica").join(format!("{}.csv", lex.name));
            lex.write_csv(create(&p)?)?;
            paths.push(p);
        }
        Ok(paths)
    }

    /// In-sample r of an OLS fit of the trait on each user's planted-word
    /// relative frequencies: the best a model of the planted words can do.
    pub fn planted_word_oracle_r(&self) -> Result<f64> {
        let planted: Vec<&str> = self
            .vocabulary
            .positive
            .iter()
            .chain(&self.vocabulary.negative)
            .map(String::as_str)
            .collect();
        let index: HashMap<&str, usize> = planted.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        let mut per_user: BTreeMap<&str, (Vec<f64>, f64)> = BTreeMap::new();
        for m in &self.messages {
            let entry = per_user
                .entry(m.user_id.as_str())
                .or_insert_with(|| (vec![0.0; planted.len()], 0.0));
            for tok in m.text.split_whitespace() {
                entry.1 += 1.0;
                if let Some(&j) = index.get(tok) {
                    entry.0[j] += 1.0;
                }
            }
        }
        let traits = self.trait_map();
        let n = per_user.len();
        let rows: Vec<&(Vec<f64>, f64)> = per_user.values().collect();
        let x = nalgebra::DMatrix::from_fn(n, planted.len(), |i, j| rows[i].0[j] / rows[i].1);
        let y: Vec<f64> = per_user.keys().map(|u| traits[u]).collect();
        let fit = crate::model::fit_ridge(&x, &y, &vec![1.0; n], 0.0)?;
        oracle_r(&y, &fit.predict(&x))
    }
}

/// Pearson r between ground-truth traits and scores or predictions.
pub fn oracle_r(traits: &[f64], predictions: &[f64]) -> Result<f64> {
    crate::stats::pearson_r(traits, predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Version;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_short: 60,
            n_long: 40,
            wc_median: 150.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small(1)).unwrap();
        let b = generate(&small(1)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(2)).unwrap();
        assert_ne!(a.messages, c.messages);
    }

    #[test]
    fn written_files_are_identical_and_trait_free() {
        let corpus = generate(&small(3)).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = corpus.write(d1.path()).unwrap();
        generate(&small(3)).unwrap().write(d2.path()).unwrap();
        for p in &p1 {
            let rel = p.strip_prefix(d1.path()).unwrap();
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(d2.path().join(rel)).unwrap());
        }
        let messages = std::fs::read_to_string(d1.path().join("messages.jsonl")).unwrap();
        let responses = std::fs::read_to_string(d1.path().join("responses.csv")).unwrap();
        for (_, z) in corpus.ground_truth.iter().take(20) {
            let s = z.to_string();
            assert!(!messages.contains(&s) && !responses.contains(&s));
        }
        let loaded = crate::corpus::load_corpus(
            &d1.path().join("messages.jsonl"),
            &d1.path().join("responses.csv"),
        )
        .unwrap();
        assert_eq!(loaded, corpus.to_corpus().unwrap());
    }

    #[test]
    fn label_versions_follow_user_kind() {
        let cfg = small(4);
        let corpus = generate(&cfg).unwrap().to_corpus().unwrap();
        assert_eq!(corpus.len(), 100);
        let long = corpus.users.iter().filter(|u| u.trust(Version::Long).is_some()).count();
        assert_eq!(long, cfg.n_long);
        assert!(corpus.users.iter().all(|u| u.trust(Version::Short).is_some()));
        let specs = items(&cfg);
        assert_eq!(specs.iter().filter(|s| s.1).count(), 3);
        assert!(specs.iter().any(|s| s.1 && s.2));
    }

    #[test]
    fn vocabulary_is_distinct_and_single_token() {
        let cfg = SynthConfig {
            n_neutral: 500,
            n_positive: 12,
            ..Default::default()
        };
        let v = Vocabulary::new(&cfg);
        let mut all: Vec<&String> = v.all().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(v.positive.len(), 12);
        for w in v.all() {
            assert_eq!(crate::tokenizer::tokenize(w), std::slice::from_ref(w));
        }
    }

    #[test]
    fn probabilities_are_valid_and_shift_with_trait() {
        let cfg = SynthConfig::default();
        let v = Vocabulary::new(&cfg);
        for z in [-3.0, 0.0, 2.5] {
            let p = v.probabilities(&cfg, z);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x > 0.0));
        }
        let lo = v.probabilities(&cfg, -1.0);
        let hi = v.probabilities(&cfg, 1.0);
        assert!(hi[0] > lo[0]);
        assert!(hi[cfg.n_positive] < lo[cfg.n_positive]);
        let flat = v.probabilities(&cfg, 0.0);
        assert!((flat[0] - cfg.loaded_base_prob).abs() < 1e-12);
    }

    #[test]
    fn word_counts_follow_configuration() {
        let cfg = SynthConfig {
            n_short: 2000,
            n_long: 0,
            wc_median: 300.0,
            wc_sigma: 0.5,
            wc_max: 100_000,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for m in &corpus.messages {
            *counts.entry(&m.user_id).or_default() += m.text.split_whitespace().count();
        }
        let mut logs: Vec<f64> = counts.values().map(|&c| (c as f64).ln()).collect();
        logs.sort_by(f64::total_cmp);
        let mean = crate::stats::mean(&logs);
        let sd = crate::stats::variance(&logs).sqrt();
        assert!((mean - 300f64.ln()).abs() < 0.05, "log mean {mean}");
        assert!((sd - 0.5).abs() < 0.05, "log sd {sd}");
    }

    #[test]
    fn oracle_r_examples() {
        let t = [0.1, -1.0, 2.0, 0.5];
        assert!((oracle_r(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(oracle_r(&t, &[1.0; 4]).is_err());
    }

    #[test]
    fn ten_item_scores_track_trait_better() {
        let mut wins = 0;
        let (mut r3_sum, mut r10_sum) = (0.0, 0.0);
        for seed in 0..20 {
            let cfg = SynthConfig {
                n_short: 0,
                n_long: 200,
                wc_median: 20.0,
                seed,
                ..Default::default()
            };
            let s = generate(&cfg).unwrap();
            let corpus = s.to_corpus().unwrap();
            let z: Vec<f64> = s.ground_truth.iter().map(|g| g.1).collect();
            let s3: Vec<f64> = corpus.users.iter().map(|u| u.trust_3q.unwrap()).collect();
            let s10: Vec<f64> = corpus.users.iter().map(|u| u.trust_10q.unwrap()).collect();
            let (r3, r10) = (oracle_r(&z, &s3).unwrap(), oracle_r(&z, &s10).unwrap());
            r3_sum += r3;
            r10_sum += r10;
            wins += usize::from(r10 > r3);
        }
        assert!(r10_sum > r3_sum, "mean r3 {} vs r10 {}", r3_sum / 20.0, r10_sum / 20.0);
        assert!(wins >= 15);
    }

    #[test]
    fn planted_oracle_grows_with_signal() {
        let run = |s: f64| {
            let cfg = SynthConfig {
                n_short: 400,
                n_long: 0,
                signal_strength: s,
                seed: 7,
                ..Default::default()
            };
            generate(&cfg).unwrap().planted_word_oracle_r().unwrap()
        };
        let (r0, r1, r2) = (run(0.0), run(0.3), run(0.8));
        assert!(r0 < r1 && r1 < r2, "{r0} {r1} {r2}");
        assert!(r0 < 0.3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cases = [
            SynthConfig { n_positive: 0, ..Default::default() },
            SynthConfig { item_noise_sd: 0.0, ..Default::default() },
            SynthConfig { loaded_base_prob: 0.2, ..Default::default() },
            SynthConfig { items_short: 11, ..Default::default() },
            SynthConfig { min_message_len: 0, ..Default::default() },
        ];
        for c in cases {
            assert!(generate(&c).is_err());
        }
    }
}
