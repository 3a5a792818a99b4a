//! Sparse user-level feature matrices.
//!
//! Three kinds of family are produced from tokenized users:
//!
//! * `NGRAM_REL`: relative frequency of each 1..3-gram, normalized per n-gram
//!   order (unigram counts over total unigrams, bigrams over total bigrams...).
//! * `NGRAM_BOOL`: 1 for every n-gram the user produced at least once.
//! * `LEXICON:<name>`: per category, the sum over words of unigram relative
//!   frequency times the word's weight in that category.
//!
//! N-grams never cross message boundaries. Columns are sorted
//! lexicographically so the layout only depends on the set of features.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tokenizer::TokenStream;

pub const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    NgramRel,
    NgramBool,
    Lexicon(String),
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::NgramRel => f.write_str("NGRAM_REL"),
            Family::NgramBool => f.write_str("NGRAM_BOOL"),
            Family::Lexicon(name) => write!(f, "LEXICON:{name}"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NGRAM_REL" => Ok(Family::NgramRel),
            "NGRAM_BOOL" => Ok(Family::NgramBool),
            _ => match s.strip_prefix("LEXICON:") {
                Some(name) if !name.is_empty() => Ok(Family::Lexicon(name.to_string())),
                _ => Err(Error::InvalidArgument(format!("unknown feature family `{s}`"))),
            },
        }
    }
}

impl Serialize for Family {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sparse row: `(column index, value)` pairs sorted by column, no explicit zeros.
pub type SparseRow = Vec<(u32, f64)>;

/// A user × feature matrix for one feature family.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub family: Family,
    pub row_ids: Vec<String>,
    pub column_ids: Vec<String>,
    pub rows: Vec<SparseRow>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_ids.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Value at `(row, col)`, zero when absent.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let r = &self.rows[row];
        r.binary_search_by_key(&(col as u32), |&(c, _)| c)
            .map_or(0.0, |i| r[i].1)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_ids
            .binary_search_by(|c| c.as_str().cmp(name))
            .ok()
    }

    /// Column `col` as a dense vector over all rows.
    pub fn dense_column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    /// Build a matrix from named sparse rows; columns are sorted and deduplicated.
    pub fn from_named_rows(
        family: Family,
        row_ids: Vec<String>,
        named_rows: Vec<BTreeMap<String, f64>>,
    ) -> Self {
        let mut names: Vec<String> = named_rows
            .iter()
            .flat_map(|r| r.keys().cloned())
            .collect();
        names.sort_unstable();
        names.dedup();
        let index: HashMap<&str, u32> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32))
            .collect();
        let rows = named_rows
            .iter()
            .map(|r| {
                let mut row: SparseRow = r
                    .iter()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(k, &v)| (index[k.as_str()], v))
                    .collect();
                row.sort_unstable_by_key(|&(c, _)| c);
                row
            })
            .collect();
        FeatureMatrix {
            family,
            row_ids,
            column_ids: names,
            rows,
        }
    }

    /// Export as `user_id,feature,value` triplets preceded by a `# family:` line.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        writeln!(w, "# family: {}", self.family)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["user_id", "feature", "value"]).map_err(ser)?;
        for (id, row) in self.row_ids.iter().zip(&self.rows) {
            for &(c, v) in row {
                csv.write_record([id.as_str(), self.column_ids[c as usize].as_str(), &v.to_string()])
                    .map_err(ser)?;
            }
        }
        csv.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }

    /// Read a triplet export. Users with no nonzero entries cannot be recovered
    /// from triplets; pass `row_ids` to restore the full row set and order.
    pub fn read_triplets<R: Read>(
        reader: R,
        file: &str,
        row_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut first = String::new();
        reader
            .read_line(&mut first)
            .map_err(|e| Error::io(file, e))?;
        let family: Family = first
            .trim()
            .strip_prefix("# family:")
            .ok_or_else(|| Error::parse(file, 1, "family", "expected `# family: <name>` line"))?
            .trim()
            .parse()?;
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut by_user: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for rec in csv.records() {
            let rec = rec.map_err(|e| Error::parse(file, 0, "<record>", e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize + 1);
            if rec.len() != 3 {
                return Err(Error::parse(file, line, "<record>", "expected 3 fields"));
            }
            let value: f64 = rec[2]
                .parse()
                .map_err(|_| Error::parse(file, line, "value", "not a number"))?;
            by_user
                .entry(rec[0].to_string())
                .or_default()
                .insert(rec[1].to_string(), value);
        }
        let ids = row_ids.unwrap_or_else(|| by_user.keys().cloned().collect());
        let rows = ids
            .iter()
            .map(|id| by_user.remove(id).unwrap_or_default())
            .collect();
        Ok(FeatureMatrix::from_named_rows(family, ids, rows))
    }
}

/// Count contiguous n-grams of the given orders (clamped to 1..=3), joined with
/// single spaces, never spanning a message boundary.
pub fn extract_ngram_counts(
    stream: &TokenStream,
    min_order: usize,
    max_order: usize,
) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    let (lo, hi) = (min_order.max(1), max_order.min(MAX_ORDER));
    for msg in stream.messages() {
        for n in lo..=hi {
            for gram in msg.windows(n) {
                *counts.entry(gram.join(" ")).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn ngram_order(gram: &str) -> usize {
    gram.bytes().filter(|&b| b == b' ').count() + 1
}

/// Divide each n-gram count by the user's total count of n-grams of the same order.
pub fn relative_frequencies(counts: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let mut totals = [0u64; MAX_ORDER + 1];
    for (g, &c) in counts {
        totals[ngram_order(g).min(MAX_ORDER)] += c;
    }
    counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(g, &c)| (g.clone(), c as f64 / totals[ngram_order(g).min(MAX_ORDER)] as f64))
        .collect()
}

pub fn boolean_indicators(counts: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(g, _)| (g.clone(), 1.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexiconKind {
    /// Each term maps to several categories with real weights (topic posteriors).
    Weighted,
    /// Each term belongs to exactly one category with weight 1 (word clusters).
    Categorical,
}

/// Term → (category, weight) mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub name: String,
    pub kind: LexiconKind,
    pub entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl Lexicon {
    /// Build from `(term, category, weight)` triples, inferring the kind.
    pub fn from_entries(
        name: impl Into<String>,
        triples: impl IntoIterator<Item = (String, String, f64)>,
    ) -> Result<Self> {
        let name = name.into();
        let mut entries: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (term, cat, w) in triples {
            if !w.is_finite() {
                return Err(Error::Data(format!(
                    "lexicon `{name}`: non-finite weight for `{term}`"
                )));
            }
            let cats = entries.entry(term).or_default();
            if let Some(existing) = cats.iter_mut().find(|(c, _)| *c == cat) {
                existing.1 += w;
            } else {
                cats.push((cat, w));
            }
        }
        let categorical = entries
            .values()
            .all(|cats| cats.len() == 1 && cats[0].1 == 1.0);
        Ok(Lexicon {
            name,
            kind: if categorical {
                LexiconKind::Categorical
            } else {
                LexiconKind::Weighted
            },
            entries,
        })
    }

    /// Read a `term,category,weight` CSV.
    pub fn read_csv<R: Read>(name: impl Into<String>, reader: R, file: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::parse(file, 1, "<header>", e.to_string()))?
            .clone();
        let header: Vec<&str> = headers.iter().map(str::trim).collect();
        if header != ["term", "category", "weight"] {
            return Err(Error::parse(
                file,
                1,
                "<header>",
                format!("expected `term,category,weight`, found `{}`", header.join(",")),
            ));
        }
        let mut triples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                Error::parse(file, line, "<record>", e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != 3 {
                return Err(Error::parse(file, line, "<record>", "expected 3 fields"));
            }
            let w: f64 = rec[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(file, line, "weight", format!("not a number: `{}`", &rec[2])))?;
            triples.push((rec[0].to_string(), rec[1].trim().to_string(), w));
        }
        Self::from_entries(name, triples)
    }

    /// Load a lexicon file, naming it after the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad lexicon path {}", path.display())))?
            .to_string();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(name, f, &path.display().to_string())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["term", "category", "weight"]).map_err(ser)?;
        for (term, cats) in &self.entries {
            for (c, wt) in cats {
                csv.write_record([term.as_str(), c.as_str(), &wt.to_string()])
                    .map_err(ser)?;
            }
        }
        csv.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

/// Category scores from a user's unigram relative frequencies. Entries that
/// are not unigrams are ignored; zero scores are omitted.
pub fn lexicon_features(relfreq_row: &BTreeMap<String, f64>, lex: &Lexicon) -> BTreeMap<String, f64> {
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for (term, &f) in relfreq_row {
        if term.contains(' ') {
            continue;
        }
        if let Some(cats) = lex.entries.get(term) {
            for (c, w) in cats {
                *scores.entry(c.clone()).or_insert(0.0) += f * w;
            }
        }
    }
    scores.retain(|_, v| *v != 0.0);
    scores
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub min_order: usize,
    pub max_order: usize,
    pub ngram_rel: bool,
    pub ngram_bool: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            min_order: 1,
            max_order: 3,
            ngram_rel: true,
            ngram_bool: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_order < 1 || self.max_order > MAX_ORDER || self.min_order > self.max_order {
            return Err(Error::InvalidArgument(format!(
                "n-gram orders {}..={} must lie within 1..={MAX_ORDER}",
                self.min_order, self.max_order
            )));
        }
        Ok(())
    }
}

/// N-gram key: up to three token ids; unused slots hold `u32::MAX`.
type GramKey = [u32; MAX_ORDER];

struct UserGrams {
    counts: Vec<(GramKey, u32)>,
    /// Unigram relative frequencies keyed by token id, for lexicon scoring.
    unigram_relfreq: Vec<(u32, f64)>,
}

fn count_user(ids: &[u32], bounds: &[usize], cfg: &FeatureConfig) -> UserGrams {
    let mut counts: HashMap<GramKey, u32> = HashMap::new();
    let mut unigrams: HashMap<u32, u32> = HashMap::new();
    let ends = bounds.iter().skip(1).copied().chain(std::iter::once(ids.len()));
    for (start, end) in bounds.iter().copied().zip(ends) {
        let msg = &ids[start..end];
        for &t in msg {
            *unigrams.entry(t).or_insert(0) += 1;
        }
        for n in cfg.min_order..=cfg.max_order {
            for w in msg.windows(n) {
                let mut key = [u32::MAX; MAX_ORDER];
                key[..n].copy_from_slice(w);
                *counts.entry(key).or_insert(0) += 1;
            }
        }
    }
    let total_uni: u32 = unigrams.values().sum();
    let mut unigram_relfreq: Vec<(u32, f64)> = unigrams
        .into_iter()
        .map(|(t, c)| (t, f64::from(c) / f64::from(total_uni)))
        .collect();
    unigram_relfreq.sort_unstable_by_key(|&(t, _)| t);
    let mut counts: Vec<(GramKey, u32)> = counts.into_iter().collect();
    counts.sort_unstable_by_key(|&(k, _)| k);
    UserGrams {
        counts,
        unigram_relfreq,
    }
}

fn gram_order(key: &GramKey) -> usize {
    key.iter().take_while(|&&t| t != u32::MAX).count()
}

/// Build one matrix per enabled n-gram family and one per lexicon, all with
/// the same row order as `streams`.
pub fn build_feature_matrices(
    streams: &[TokenStream],
    cfg: &FeatureConfig,
    lexica: &[Lexicon],
) -> Result<Vec<FeatureMatrix>> {
    cfg.validate()?;
    let row_ids: Vec<String> = streams.iter().map(|s| s.user_id.clone()).collect();

    // Token interning, sequential so ids are deterministic.
    let mut vocab: HashMap<&str, u32> = HashMap::new();
    let mut words: Vec<&str> = Vec::new();
    let encoded: Vec<Vec<u32>> = streams
        .iter()
        .map(|s| {
            s.tokens
                .iter()
                .map(|t| {
                    *vocab.entry(t.as_str()).or_insert_with(|| {
                        words.push(t.as_str());
                        (words.len() - 1) as u32
                    })
                })
                .collect()
        })
        .collect();

    let per_user: Vec<UserGrams> = encoded
        .par_iter()
        .zip(streams.par_iter())
        .map(|(ids, s)| count_user(ids, &s.boundaries, cfg))
        .collect();

    let mut out = Vec::new();
    if cfg.ngram_rel || cfg.ngram_bool {
        let mut keys: Vec<GramKey> = per_user
            .iter()
            .flat_map(|u| u.counts.iter().map(|&(k, _)| k))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut named: Vec<(String, GramKey)> = keys
            .into_iter()
            .map(|k| {
                let n = gram_order(&k);
                let name = k[..n]
                    .iter()
                    .map(|&t| words[t as usize])
                    .collect::<Vec<_>>()
                    .join(" ");
                (name, k)
            })
            .collect();
        named.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let col_of: HashMap<GramKey, u32> = named
            .iter()
            .enumerate()
            .map(|(i, (_, k))| (*k, i as u32))
            .collect();
        let column_ids: Vec<String> = named.into_iter().map(|(n, _)| n).collect();

        let mut rel_rows = Vec::with_capacity(per_user.len());
        let mut bool_rows = Vec::with_capacity(per_user.len());
        for u in &per_user {
            let mut totals = [0u64; MAX_ORDER + 1];
            for (k, c) in &u.counts {
                totals[gram_order(k)] += u64::from(*c);
            }
            let mut rel: SparseRow = u
                .counts
                .iter()
                .map(|(k, c)| (col_of[k], f64::from(*c) / totals[gram_order(k)] as f64))
                .collect();
            rel.sort_unstable_by_key(|&(c, _)| c);
            if cfg.ngram_bool {
                bool_rows.push(rel.iter().map(|&(c, _)| (c, 1.0)).collect());
            }
            if cfg.ngram_rel {
                rel_rows.push(rel);
            }
        }
        if cfg.ngram_rel {
            out.push(FeatureMatrix {
                family: Family::NgramRel,
                row_ids: row_ids.clone(),
                column_ids: column_ids.clone(),
                rows: rel_rows,
            });
        }
        if cfg.ngram_bool {
            out.push(FeatureMatrix {
                family: Family::NgramBool,
                row_ids: row_ids.clone(),
                column_ids,
                rows: bool_rows,
            });
        }
    }

    // Per user, unigram relative frequencies in word order.
    let by_word: Vec<Vec<(u32, f64)>> = if lexica.is_empty() {
        Vec::new()
    } else {
        per_user
            .iter()
            .map(|u| {
                let mut v = u.unigram_relfreq.clone();
                v.sort_unstable_by(|a, b| words[a.0 as usize].cmp(words[b.0 as usize]));
                v
            })
            .collect()
    };
    for lex in lexica {
        let mut cats: Vec<&str> = lex
            .entries
            .values()
            .flat_map(|cs| cs.iter().map(|(c, _)| c.as_str()))
            .collect();
        cats.sort_unstable();
        cats.dedup();
        let cat_idx: HashMap<&str, u32> = cats.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
        // Per token id: the token's (category column, weight) list.
        let token_cats: Vec<Vec<(u32, f64)>> = words
            .iter()
            .map(|w| {
                lex.entries
                    .get(*w)
                    .map(|cs| cs.iter().map(|(c, wt)| (cat_idx[c.as_str()], *wt)).collect())
                    .unwrap_or_default()
            })
            .collect();
        let rows: Vec<SparseRow> = by_word
            .iter()
            .map(|relfreq| {
                let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
                for &(t, f) in relfreq {
                    for &(c, w) in &token_cats[t as usize] {
                        *acc.entry(c).or_insert(0.0) += f * w;
                    }
                }
                acc.into_iter().filter(|&(_, v)| v != 0.0).collect()
            })
            .collect();
        out.push(FeatureMatrix {
            family: Family::Lexicon(lex.name.clone()),
            row_ids: row_ids.clone(),
            column_ids: cats.into_iter().map(String::from).collect(),
            rows,
        });
    }

    for m in &out {
        if m.row_ids != row_ids {
            return Err(Error::Internal(format!("row ids of {} are misaligned", m.family)));
        }
    }
    Ok(out)
}

/// Write each matrix as `<dir>/<family>.csv` (`:` replaced by `_`), returning the paths.
pub fn write_matrices(dir: &Path, matrices: &[FeatureMatrix]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for m in matrices {
        let path = dir.join(format!("{}.csv", m.family.to_string().replace(':', "_")));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        m.write_triplets(std::io::BufWriter::new(f))?;
        paths.push(path);
    }
    Ok(paths)
}
