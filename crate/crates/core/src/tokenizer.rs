//! Social-media tokenizer.
//!
//! Rules, applied left to right over each whitespace-separated chunk:
//!
//! * URLs (`http://`, `https://`, `www.`) become the literal token `<url>`;
//!   trailing punctuation is peeled back off first.
//! * `#tag` and `@name` stay single tokens.
//! * Emoticons (`:)`, `;-P`, `(:`, `<3`, `^_^`, ...) stay single tokens and
//!   keep their case. Letter-eyed ones such as `xD` only count when they are
//!   the whole chunk.
//! * Words are runs of letters, digits and `_`, with internal apostrophes or
//!   hyphens (`don't`, `well-known`).
//! * Anything else becomes a one-character token.
//!
//! Everything except emoticons is lowercased. There is no other normalization:
//! elongations like `soooo` survive verbatim.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, UserRecord};

pub const URL_TOKEN: &str = "<url>";

static URL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?i:https?://|www\.)\S+").unwrap());
static URL_PREFIX: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?i:https?://|www\.)").unwrap());
static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[#@][\p{L}\p{N}_]+").unwrap());
static EMOTICON: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"^(?:",
        r"</?3",                                  // hearts
        r"|\^_*\^",                               // ^^ ^_^
        r"|-_+-",                                 // -_-
        r"|[>}\]]?[:;=][-o'^]?[)\](\[dDpP/\\|*$@3oO]", // eyes, nose, mouth
        r"|[)\](\[][-o'^]?[:;=]",                 // reversed (: (-:
        r")"
    ))
    .unwrap()
});
static LETTER_EMOTICON: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:[xX][dDpP]|[xX]-[dDpP]|8-?[)D])$").unwrap());
static WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[\p{L}\p{N}_]+(?:['’-][\p{L}\p{N}_]+)*").unwrap());

const URL_TRAILING: &[char] = &['.', ',', '!', '?', ';', ':', ')', ']', '}', '"', '\''];

fn push_word(out: &mut Vec<String>, s: &str) {
    out.push(s.to_lowercase());
}

fn tokenize_chunk(chunk: &str, out: &mut Vec<String>) {
    if LETTER_EMOTICON.is_match(chunk) {
        out.push(chunk.to_string());
        return;
    }
    let mut rest = chunk;
    while !rest.is_empty() {
        if let Some(m) = URL.find(rest) {
            let prefix = URL_PREFIX.find(rest).map_or(0, |p| p.end());
            let url_len = m.as_str().trim_end_matches(URL_TRAILING).len().max(prefix);
            out.push(URL_TOKEN.to_string());
            rest = &rest[url_len..];
            continue;
        }
        if let Some(m) = TAG.find(rest) {
            push_word(out, m.as_str());
            rest = &rest[m.end()..];
            continue;
        }
        if let Some(m) = EMOTICON.find(rest) {
            // Reject a match glued to a following letter or digit ("time:3pm").
            let next = rest[m.end()..].chars().next();
            if !next.is_some_and(char::is_alphanumeric) {
                out.push(m.as_str().to_string());
                rest = &rest[m.end()..];
                continue;
            }
        }
        if let Some(m) = WORD.find(rest) {
            push_word(out, m.as_str());
            rest = &rest[m.end()..];
            continue;
        }
        let c = rest.chars().next().unwrap();
        out.push(c.to_string());
        rest = &rest[c.len_utf8()..];
    }
}

/// Split `text` into tokens. Deterministic; the empty string yields no tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        tokenize_chunk(chunk, &mut out);
    }
    out
}

/// A user's tokens across all messages, with the start offset of each message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub user_id: String,
    pub tokens: Vec<String>,
    /// Start index of each message's tokens in `tokens`. Messages that
    /// tokenize to nothing get no boundary, keeping the list strictly increasing.
    pub boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn word_count(&self) -> u64 {
        self.tokens.len() as u64
    }

    /// Token slices of each message, in order.
    pub fn messages(&self) -> impl Iterator<Item = &[String]> {
        let ends = self
            .boundaries
            .iter()
            .skip(1)
            .copied()
            .chain(std::iter::once(self.tokens.len()));
        self.boundaries
            .iter()
            .copied()
            .zip(ends)
            .map(|(start, end)| &self.tokens[start..end])
    }
}

pub fn tokenize_user(record: &UserRecord) -> TokenStream {
    let mut tokens = Vec::new();
    let mut boundaries = Vec::new();
    for m in &record.messages {
        let toks = tokenize(&m.text);
        if toks.is_empty() {
            continue;
        }
        boundaries.push(tokens.len());
        tokens.extend(toks);
    }
    TokenStream {
        user_id: record.user_id.clone(),
        tokens,
        boundaries,
    }
}

/// Tokenize every user, recording each user's word count on the corpus.
pub fn tokenize_corpus(corpus: &mut Corpus) -> Vec<TokenStream> {
    use rayon::prelude::*;

    let streams: Vec<TokenStream> = corpus.users.par_iter().map(tokenize_user).collect();
    for (user, stream) in corpus.users.iter_mut().zip(&streams) {
        user.word_count = Some(stream.word_count());
    }
    streams
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Message;

    fn toks(s: &str) -> Vec<&'static str> {
        tokenize(s)
            .into_iter()
            .map(|t| &*Box::leak(t.into_boxed_str()))
            .collect()
    }

    #[test]
    fn empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n\t ").is_empty());
    }

    #[test]
    fn emoticon_kept() {
        assert_eq!(toks("I trust you :)"), ["i", "trust", "you", ":)"]);
    }

    #[test]
    fn url_and_hashtag() {
        assert_eq!(
            toks("see http://a.b/c #trust!!"),
            ["see", "<url>", "#trust", "!", "!"]
        );
    }

    #[test]
    fn golden() {
        let cases: &[(&str, &[&str])] = &[
            ("Sooooo HAPPY!!! :D", &["sooooo", "happy", "!", "!", "!", ":D"]),
            ("don't @Bob, it's well-known", &["don't", "@bob", ",", "it's", "well-known"]),
            ("(see www.example.com/x).", &["(", "see", "<url>", ")", "."]),
            ("love u <3 xD", &["love", "u", "<3", "xD"]),
            ("(: ;-P ^_^ -_-", &["(:", ";-P", "^_^", "-_-"]),
            ("meet at time:3pm", &["meet", "at", "time", ":", "3pm"]),
            ("yes:(", &["yes", ":("]),
            ("https://t.co/abc, ok", &["<url>", ",", "ok"]),
            ("Ça va? 😀", &["ça", "va", "?", "😀"]),
            ("#Trust and @Name", &["#trust", "and", "@name"]),
            ("a...b", &["a", ".", ".", ".", "b"]),
            ("xDone", &["xdone"]),
        ];
        for (input, expected) in cases {
            assert_eq!(&toks(input), expected, "input: {input:?}");
        }
    }

    fn user(texts: &[&str]) -> UserRecord {
        UserRecord {
            user_id: "u".into(),
            messages: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Message {
                    user_id: "u".into(),
                    message_id: i.to_string(),
                    text: t.to_string(),
                    created_at: None,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn user_concatenation() {
        let s = tokenize_user(&user(&["a b", "c"]));
        assert_eq!(s.tokens, ["a", "b", "c"]);
        assert_eq!(s.boundaries, [0, 2]);
        assert_eq!(s.word_count(), 3);
        let msgs: Vec<_> = s.messages().collect();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[1], ["c"]);
    }

    #[test]
    fn user_without_messages() {
        let s = tokenize_user(&user(&[]));
        assert!(s.tokens.is_empty());
        assert!(s.boundaries.is_empty());
        assert_eq!(s.word_count(), 0);
    }

    #[test]
    fn thousand_words() {
        let text = vec!["word"; 1000].join(" ");
        assert_eq!(tokenize_user(&user(&[&text])).word_count(), 1000);
    }

    #[test]
    fn corpus_word_counts_are_set() {
        let mut corpus = Corpus {
            users: vec![user(&["a b :)", "c"])],
            ..Default::default()
        };
        let streams = tokenize_corpus(&mut corpus);
        assert_eq!(corpus.users[0].word_count, Some(4));
        assert_eq!(streams[0].word_count(), 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn token_count_is_additive(a in "\\PC{0,40}", b in "\\PC{0,40}") {
                let joined = tokenize(&format!("{a} {b}"));
                prop_assert_eq!(joined.len(), tokenize(&a).len() + tokenize(&b).len());
            }

            #[test]
            fn deterministic_and_whitespace_free(s in "\\PC{0,80}") {
                let t1 = tokenize(&s);
                prop_assert_eq!(&t1, &tokenize(&s));
                prop_assert!(t1.iter().all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)));
            }

            #[test]
            fn boundaries_strictly_increase(texts in proptest::collection::vec("\\PC{0,20}", 0..6)) {
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                let s = tokenize_user(&user(&refs));
                prop_assert!(s.boundaries.windows(2).all(|w| w[0] < w[1]));
                let total: usize = texts.iter().map(|t| tokenize(t).len()).sum();
                prop_assert_eq!(s.word_count() as usize, total);
            }
        }
    }
}
