//! Tokenization, TF-IDF weighting, keywords and extractive summaries.
//!
//! All maps are ordered so that floating-point sums run in the same order
//! on every call.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_KEYWORDS: usize = 10;
pub const DEFAULT_SUMMARY_SENTENCES: usize = 3;

static STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");
static STOPWORDS_RO: &str = include_str!("../data/stopwords_ro.txt");

/// Sparse real-valued term weights.
pub type Weights = BTreeMap<String, f64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TermVector {
    pub counts: BTreeMap<String, u64>,
}

impl TermVector {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(t, &c)| (t.as_str(), c))
    }
}

impl<S: Into<String>> FromIterator<(S, u64)> for TermVector {
    fn from_iter<I: IntoIterator<Item = (S, u64)>>(iter: I) -> Self {
        let mut counts = BTreeMap::new();
        for (t, c) in iter {
            if c > 0 {
                *counts.entry(t.into()).or_insert(0) += c;
            }
        }
        TermVector { counts }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: u64,
    pub df: BTreeMap<String, u64>,
}

impl CorpusStats {
    /// Checks `1 <= df(t) <= doc_count` for every term.
    pub fn validate(&self) -> Result<(), String> {
        for (t, &df) in &self.df {
            if df == 0 || df > self.doc_count {
                return Err(format!("document frequency of '{t}' out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageDigest {
    pub message_id: String,
    pub keywords: Vec<String>,
    pub summary: String,
    pub vector: TermVector,
    pub weighted: Weights,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stopwords(BTreeSet<String>);

impl Stopwords {
    /// The built-in English and Romanian lists.
    pub fn builtin() -> Self {
        let mut s = Stopwords::default();
        s.extend_from_str(STOPWORDS_EN);
        s.extend_from_str(STOPWORDS_RO);
        s
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let mut s = Stopwords::default();
        s.extend_from_str(&std::fs::read_to_string(path)?);
        Ok(s)
    }

    /// Adds one lowercase term per line; `#` starts a comment.
    pub fn extend_from_str(&mut self, list: &str) {
        for line in list.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.0.insert(line.to_lowercase());
            }
        }
    }

    pub fn contains(&self, term: &str) -> bool {
        self.0.contains(term)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for Stopwords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Stopwords(iter.into_iter().map(Into::into).collect())
    }
}

/// Maximal runs of letters or digits, lowercased; single-character tokens
/// are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|run| !run.is_empty())
        // Lowercasing can introduce combining marks (U+0130 -> "i\u{307}").
        .map(|run| run.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|t| t.chars().count() > 1)
        .collect()
}

pub fn term_vector<S: AsRef<str>>(tokens: &[S], stopwords: &Stopwords) -> TermVector {
    let mut counts = BTreeMap::new();
    for t in tokens {
        let t = t.as_ref();
        if !stopwords.contains(t) {
            *counts.entry(t.to_string()).or_insert(0) += 1;
        }
    }
    TermVector { counts }
}

pub fn record_document(stats: &mut CorpusStats, vector: &TermVector) {
    stats.doc_count += 1;
    for term in vector.counts.keys() {
        *stats.df.entry(term.clone()).or_insert(0) += 1;
    }
}

/// `ln((1 + N) / (1 + df)) + 1`.
pub fn idf(stats: &CorpusStats, term: &str) -> f64 {
    let df = stats.df.get(term).copied().unwrap_or(0) as f64;
    ((1.0 + stats.doc_count as f64) / (1.0 + df)).ln() + 1.0
}

pub fn tfidf_weights(vector: &TermVector, stats: &CorpusStats) -> Result<Weights, TextError> {
    if stats.doc_count == 0 {
        return Err(TextError::EmptyCorpus);
    }
    Ok(vector.iter().map(|(t, c)| (t.to_string(), c as f64 * idf(stats, t))).collect())
}

/// The `k` highest-weight terms, ties broken lexicographically.
pub fn top_keywords(weighted: &Weights, k: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, f64)> = weighted.iter().map(|(t, &w)| (t, w)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(t, _)| t.clone()).collect()
}

/// Splits at `.`, `!` or `?` followed by whitespace or end of text.
/// Returned slices are trimmed and non-empty.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                let sentence = text[start..end].trim();
                if !sentence.is_empty() {
                    out.push(sentence);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Extractive summary: the `n` sentences with the highest
/// `sum(weights) / (1 + tokens)` score, in document order.
pub fn summarize(text: &str, weighted: &Weights, n: usize) -> String {
    let sentences = split_sentences(text);
    if sentences.len() <= n {
        return sentences.join(" ");
    }
    let mut scored: Vec<(usize, f64)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tokens = tokenize(s);
            let sum: f64 = tokens.iter().map(|t| weighted.get(t).copied().unwrap_or(0.0)).sum();
            (i, sum / (1.0 + tokens.len() as f64))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = scored.into_iter().take(n).map(|(i, _)| i).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| sentences[i]).collect::<Vec<_>>().join(" ")
}

pub fn norm(v: &Weights) -> f64 {
    v.values().map(|w| w * w).sum::<f64>().sqrt()
}

/// Scales `v` to unit length; the zero vector maps to the empty map.
pub fn normalize(v: &Weights) -> Weights {
    let n = norm(v);
    if n == 0.0 {
        return Weights::new();
    }
    v.iter().filter(|(_, &w)| w != 0.0).map(|(t, &w)| (t.clone(), w / n)).collect()
}

pub fn cosine_similarity(a: &Weights, b: &Weights) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small.iter().filter_map(|(t, &x)| large.get(t).map(|&y| x * y)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Settings for [`digest`].
#[derive(Debug, Clone)]
pub struct DigestOptions {
    pub keywords: usize,
    pub summary_sentences: usize,
}

impl Default for DigestOptions {
    fn default() -> Self {
        DigestOptions { keywords: DEFAULT_KEYWORDS, summary_sentences: DEFAULT_SUMMARY_SENTENCES }
    }
}

/// Builds the digest of one message and records it in `stats`.
///
/// Terms come from the subject followed by the body; the summary is drawn
/// from the body alone, or from the subject when the body is empty.
pub fn digest(
    message_id: &str,
    subject: &str,
    body: &str,
    stopwords: &Stopwords,
    stats: &mut CorpusStats,
    opts: &DigestOptions,
) -> MessageDigest {
    let source = format!("{subject}\n{body}");
    let vector = term_vector(&tokenize(&source), stopwords);
    record_document(stats, &vector);
    let weighted = tfidf_weights(&vector, stats).expect("corpus has at least the recorded document");
    let keywords = top_keywords(&weighted, opts.keywords);
    let summary_source = if body.trim().is_empty() { subject } else { body };
    let summary = summarize(summary_source, &weighted, opts.summary_sentences);
    MessageDigest { message_id: message_id.to_string(), keywords, summary, vector, weighted }
}
