//! Users, their messages, and questionnaire-based trust scores.
//!
//! Messages arrive as JSON lines, questionnaire responses as CSV. Every item
//! in the responses file belongs to the 10-question version; items flagged
//! `in_3q` also make up the 3-question version. A user's score for a version
//! is the mean of their (reverse-scored where flagged) responses to that
//! version's items, and is only set when the user answered all of them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Questionnaire version a score was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Version {
    #[serde(rename = "3q")]
    Short,
    #[serde(rename = "10q")]
    Long,
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Version::Short => f.write_str("3q"),
            Version::Long => f.write_str("10q"),
        }
    }
}

impl FromStr for Version {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3q" | "3" | "short" => Ok(Version::Short),
            "10q" | "10" | "long" => Ok(Version::Long),
            other => Err(Error::InvalidArgument(format!(
                "unknown questionnaire version `{other}` (expected 3q or 10q)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub user_id: String,
    pub message_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionnaireResponse {
    pub user_id: String,
    pub item_id: String,
    pub value: u8,
    pub reverse_scored: bool,
    /// Item belongs to the 3-question subset (every item is in the 10-question set).
    pub in_3q: bool,
}

impl QuestionnaireResponse {
    pub fn in_version(&self, version: Version) -> bool {
        match version {
            Version::Short => self.in_3q,
            Version::Long => true,
        }
    }

    /// Response value after applying the item's reverse-scoring flag.
    pub fn scored_value(&self) -> Result<u8> {
        if self.reverse_scored {
            reverse_score(self.value)
        } else {
            check_value(self.value)?;
            Ok(self.value)
        }
    }
}

/// Definition of one questionnaire item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub reverse_scored: bool,
    pub in_3q: bool,
}

/// The item universe of a questionnaire, keyed by item id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instrument {
    pub items: BTreeMap<String, ItemSpec>,
}

impl Instrument {
    pub fn items_of(&self, version: Version) -> impl Iterator<Item = &str> {
        self.items
            .iter()
            .filter(move |(_, spec)| version == Version::Long || spec.in_3q)
            .map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub messages: Vec<Message>,
    /// Token count under [`crate::tokenizer::tokenize`]; unset until tokenized.
    pub word_count: Option<u64>,
    pub responses: Vec<QuestionnaireResponse>,
    pub trust_3q: Option<f64>,
    pub trust_10q: Option<f64>,
}

impl UserRecord {
    pub fn new(user_id: impl Into<String>) -> Self {
        UserRecord {
            user_id: user_id.into(),
            ..Default::default()
        }
    }

    pub fn trust(&self, version: Version) -> Option<f64> {
        match version {
            Version::Short => self.trust_3q,
            Version::Long => self.trust_10q,
        }
    }
}

/// All users of a study, ordered by user id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
    pub instrument: Instrument,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.users[i])
    }

    /// Assemble a corpus from in-memory messages and responses, scoring every
    /// user against every version they answered completely.
    pub fn from_parts(
        messages: Vec<Message>,
        responses: Vec<QuestionnaireResponse>,
    ) -> Result<Self> {
        let mut users: BTreeMap<String, UserRecord> = BTreeMap::new();

        let mut seen = HashSet::new();
        for m in messages {
            if !seen.insert((m.user_id.clone(), m.message_id.clone())) {
                return Err(Error::Data(format!(
                    "duplicate message: user `{}` message `{}`",
                    m.user_id, m.message_id
                )));
            }
            users
                .entry(m.user_id.clone())
                .or_insert_with(|| UserRecord::new(&m.user_id))
                .messages
                .push(m);
        }

        let mut instrument = Instrument::default();
        for r in &responses {
            check_value(r.value)?;
            let spec = ItemSpec {
                reverse_scored: r.reverse_scored,
                in_3q: r.in_3q,
            };
            match instrument.items.get(&r.item_id) {
                Some(existing) if *existing != spec => {
                    return Err(Error::Data(format!(
                        "item `{}` has inconsistent reverse_scored/in_3q flags",
                        r.item_id
                    )));
                }
                Some(_) => {}
                None => {
                    instrument.items.insert(r.item_id.clone(), spec);
                }
            }
        }
        for r in responses {
            users
                .entry(r.user_id.clone())
                .or_insert_with(|| UserRecord::new(&r.user_id))
                .responses
                .push(r);
        }

        for user in users.values_mut() {
            let mut items = HashSet::new();
            for r in &user.responses {
                if !items.insert(r.item_id.as_str()) {
                    return Err(Error::Data(format!(
                        "user `{}` answered item `{}` more than once",
                        user.user_id, r.item_id
                    )));
                }
            }
            for version in [Version::Short, Version::Long] {
                let complete = instrument.items_of(version).all(|id| items.contains(id))
                    && instrument.items_of(version).next().is_some();
                if complete {
                    let score = score_questionnaire(&instrument, &user.responses, version)?;
                    match version {
                        Version::Short => user.trust_3q = Some(score),
                        Version::Long => user.trust_10q = Some(score),
                    }
                }
            }
        }

        Ok(Corpus {
            users: users.into_values().collect(),
            instrument,
        })
    }
}

fn check_value(value: u8) -> Result<()> {
    if (1..=5).contains(&value) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "value {value} out of range [1,5]"
        )))
    }
}

/// Invert a 1–5 response: 1 ↔ 5, 2 ↔ 4, 3 fixed.
pub fn reverse_score(value: u8) -> Result<u8> {
    check_value(value)?;
    Ok(6 - value)
}

/// Mean of the (reverse-scored where flagged) responses to every item of `version`.
///
/// Responses to items outside the version are ignored. Each of the version's
/// items must be answered exactly once.
pub fn score_questionnaire(
    instrument: &Instrument,
    responses: &[QuestionnaireResponse],
    version: Version,
) -> Result<f64> {
    let wanted: BTreeSet<&str> = instrument.items_of(version).collect();
    if wanted.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "instrument has no items for version {version}"
        )));
    }
    let mut answered: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sum = 0u32;
    for r in responses.iter().filter(|r| wanted.contains(r.item_id.as_str())) {
        *answered.entry(r.item_id.as_str()).or_default() += 1;
        sum += u32::from(r.scored_value()?);
    }
    let missing: Vec<&str> = wanted
        .iter()
        .filter(|id| !answered.contains_key(*id))
        .copied()
        .collect();
    let duplicated: Vec<&str> = answered
        .iter()
        .filter(|(_, &n)| n > 1)
        .map(|(id, _)| *id)
        .collect();
    if !missing.is_empty() || !duplicated.is_empty() {
        return Err(Error::Data(format!(
            "responses do not cover version {version} exactly once (missing: [{}], duplicated: [{}])",
            missing.join(", "),
            duplicated.join(", ")
        )));
    }
    Ok(f64::from(sum) / wanted.len() as f64)
}

#[derive(Deserialize)]
struct RawMessage {
    user_id: Option<serde_json::Value>,
    message_id: Option<serde_json::Value>,
    text: Option<serde_json::Value>,
    created_at: Option<serde_json::Value>,
}

fn string_field(
    file: &str,
    line: usize,
    field: &str,
    value: Option<serde_json::Value>,
) -> Result<String> {
    match value {
        Some(serde_json::Value::String(s)) => Ok(s),
        // Numeric identifiers are common in exports; accept them verbatim.
        Some(serde_json::Value::Number(n)) if field != "text" => Ok(n.to_string()),
        Some(other) => Err(Error::parse(
            file,
            line,
            field,
            format!("expected a string, found {other}"),
        )),
        None => Err(Error::parse(file, line, field, "missing")),
    }
}

/// Parse messages from JSON lines. Blank lines are skipped.
pub fn read_messages<R: Read>(reader: R, file: &str) -> Result<Vec<Message>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawMessage = serde_json::from_str(&line)
            .map_err(|e| Error::parse(file, lineno, "<line>", e.to_string()))?;
        let user_id = string_field(file, lineno, "user_id", raw.user_id)?;
        let message_id = string_field(file, lineno, "message_id", raw.message_id)?;
        let text = string_field(file, lineno, "text", raw.text)?;
        if text.trim().is_empty() {
            return Err(Error::parse(file, lineno, "text", "empty after trimming whitespace"));
        }
        let created_at = match raw.created_at {
            None | Some(serde_json::Value::Null) => None,
            other => Some(string_field(file, lineno, "created_at", other)?),
        };
        out.push(Message {
            user_id,
            message_id,
            text,
            created_at,
        });
    }
    Ok(out)
}

pub const RESPONSES_HEADER: [&str; 5] = ["user_id", "item_id", "value", "reverse_scored", "in_3q"];

fn parse_flag(file: &str, line: usize, field: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::parse(
            file,
            line,
            field,
            format!("expected 0 or 1, found `{other}`"),
        )),
    }
}

/// Parse questionnaire responses from CSV with header
/// `user_id,item_id,value,reverse_scored,in_3q`.
pub fn read_responses<R: Read>(reader: R, file: &str) -> Result<Vec<QuestionnaireResponse>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(file, 1, "<header>", e.to_string()))?
        .clone();
    // An entirely empty file carries no responses.
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let header: Vec<&str> = headers.iter().map(str::trim).collect();
    if header != RESPONSES_HEADER {
        return Err(Error::parse(
            file,
            1,
            "<header>",
            format!("expected `{}`, found `{}`", RESPONSES_HEADER.join(","), header.join(",")),
        ));
    }

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(file, line, "<record>", e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != RESPONSES_HEADER.len() {
            return Err(Error::parse(
                file,
                line,
                "<record>",
                format!("expected {} fields, found {}", RESPONSES_HEADER.len(), record.len()),
            ));
        }
        let value: u8 = record[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(file, line, "value", format!("not an integer: `{}`", &record[2])))?;
        if !(1..=5).contains(&value) {
            return Err(Error::parse(file, line, "value", "value out of range [1,5]"));
        }
        let user_id = record[0].trim().to_string();
        let item_id = record[1].trim().to_string();
        if user_id.is_empty() {
            return Err(Error::parse(file, line, "user_id", "empty"));
        }
        if item_id.is_empty() {
            return Err(Error::parse(file, line, "item_id", "empty"));
        }
        out.push(QuestionnaireResponse {
            user_id,
            item_id,
            value,
            reverse_scored: parse_flag(file, line, "reverse_scored", &record[3])?,
            in_3q: parse_flag(file, line, "in_3q", &record[4])?,
        });
    }
    Ok(out)
}

/// Load a corpus from a messages JSONL file and a responses CSV file.
pub fn load_corpus(messages_path: &Path, responses_path: &Path) -> Result<Corpus> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::io(p, e));
    let messages = read_messages(open(messages_path)?, &messages_path.display().to_string())?;
    let responses = read_responses(open(responses_path)?, &responses_path.display().to_string())?;
    Corpus::from_parts(messages, responses)
}

/// Write messages as JSON lines, one object per message.
pub fn write_messages<W: Write>(messages: &[Message], writer: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    for m in messages {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n").map_err(|e| Error::io("<messages>", e))?;
    }
    w.flush().map_err(|e| Error::io("<messages>", e))
}

/// Write responses as CSV with the header `read_responses` expects.
pub fn write_responses<W: Write>(responses: &[QuestionnaireResponse], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(RESPONSES_HEADER).map_err(ser)?;
    let flag = |b: bool| if b { "1" } else { "0" };
    for r in responses {
        w.write_record([
            r.user_id.as_str(),
            r.item_id.as_str(),
            &r.value.to_string(),
            flag(r.reverse_scored),
            flag(r.in_3q),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `user_id,trust_3q,trust_10q,word_count`, leaving missing cells empty.
pub fn write_scores<W: Write>(corpus: &Corpus, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(["user_id", "trust_3q", "trust_10q", "word_count"])
        .map_err(ser)?;
    for u in &corpus.users {
        w.write_record([
            u.user_id.clone(),
            fmt_opt(u.trust_3q),
            fmt_opt(u.trust_10q),
            u.word_count.map(|c| c.to_string()).unwrap_or_default(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}

/// One row of a scores file written by [`write_scores`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub user_id: String,
    pub trust_3q: Option<f64>,
    pub trust_10q: Option<f64>,
    pub word_count: Option<u64>,
}

/// Read a `user_id,trust_3q,trust_10q,word_count` file.
pub fn read_scores<R: Read>(reader: R, file: &str) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(file, 1, "<header>", e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["user_id", "trust_3q", "trust_10q", "word_count"] {
        return Err(Error::parse(file, 1, "<header>", "expected `user_id,trust_3q,trust_10q,word_count`"));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(file, line, "<record>", e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let opt = |i: usize, field: &str| -> Result<Option<f64>> {
            let raw = record[i].trim();
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse()
                .map(Some)
                .map_err(|_| Error::parse(file, line, field, format!("not a number: `{raw}`")))
        };
        let wc = record[3].trim();
        out.push(ScoreRow {
            user_id: record[0].to_string(),
            trust_3q: opt(1, "trust_3q")?,
            trust_10q: opt(2, "trust_10q")?,
            word_count: if wc.is_empty() {
                None
            } else {
                Some(wc.parse().map_err(|_| Error::parse(file, line, "word_count", format!("not an integer: `{wc}`")))?)
            },
        });
    }
    Ok(out)
}
