//! Category decisions: multinomial naive Bayes over the category set,
//! centroid-based novelty detection that opens new categories, exact
//! train/untrain for user corrections, a Graham-style spam filter and
//! spherical k-means for splitting a category into sub-categories.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{GraphStore, Provenance, StoreError, SPAM_ID, UNSORTED_ID};
use crate::text::{cosine_similarity, normalize, top_keywords, MessageDigest, TermVector, Weights};

const SUBCLUSTER_MAX_ITERATIONS: usize = 20;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("untrained model")]
    Untrained,
    #[error("too few members")]
    TooFewMembers,
    #[error("max depth reached")]
    MaxDepthReached,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub assign_threshold: f64,
    pub new_category_similarity: f64,
    pub laplace: f64,
    pub keyword_count: usize,
    pub subcluster_k: usize,
    pub subcluster_min_size: usize,
    pub subcluster_min_child: usize,
    pub spam_threshold: f64,
    pub unknown_token_prob: f64,
    pub interesting_tokens: usize,
    pub min_token_evidence: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            assign_threshold: 0.30,
            new_category_similarity: 0.25,
            laplace: 1.0,
            keyword_count: 10,
            subcluster_k: 2,
            subcluster_min_size: 12,
            subcluster_min_child: 3,
            spam_threshold: 0.90,
            unknown_token_prob: 0.40,
            interesting_tokens: 15,
            min_token_evidence: 5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.to_string()));
        if !(self.assign_threshold > 0.0 && self.assign_threshold <= 1.0) {
            return bad("assign_threshold must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.new_category_similarity) {
            return bad("new_category_similarity must be in [0, 1)");
        }
        if !(self.laplace > 0.0 && self.laplace.is_finite()) {
            return bad("laplace must be positive");
        }
        if self.keyword_count == 0 {
            return bad("keyword_count must be at least 1");
        }
        if self.subcluster_k < 2 {
            return bad("subcluster_k must be at least 2");
        }
        if self.subcluster_min_child == 0 || self.subcluster_min_size < self.subcluster_k * self.subcluster_min_child {
            return bad("subcluster_min_size must allow subcluster_k children of subcluster_min_child");
        }
        if !(0.0..=1.0).contains(&self.spam_threshold) || !(0.0..=1.0).contains(&self.unknown_token_prob) {
            return bad("spam probabilities must be in [0, 1]");
        }
        if self.interesting_tokens == 0 {
            return bad("interesting_tokens must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub token_counts: BTreeMap<String, u64>,
    pub total_tokens: u64,
    pub doc_count: u64,
}

/// Token count tables per category. Entries that drop to zero are removed,
/// so `untrain` after `train` restores the exact previous value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryModel {
    pub categories: BTreeMap<String, CategoryCounts>,
    /// Term -> total count over all categories. Keys form the vocabulary.
    pub vocabulary: BTreeMap<String, u64>,
}

impl CategoryModel {
    pub fn train(&mut self, vector: &TermVector, category_id: &str) {
        let counts = self.categories.entry(category_id.to_string()).or_default();
        for (t, c) in vector.iter() {
            *counts.token_counts.entry(t.to_string()).or_insert(0) += c;
            counts.total_tokens += c;
            *self.vocabulary.entry(t.to_string()).or_insert(0) += c;
        }
        counts.doc_count += 1;
    }

    /// Inverse of [`train`](Self::train). Counts floor at zero; returns a
    /// warning for every count that would have gone negative.
    pub fn untrain(&mut self, vector: &TermVector, category_id: &str) -> Vec<String> {
        let mut warnings = Vec::new();
        let Some(counts) = self.categories.get_mut(category_id) else {
            let w = format!("untrain: category {category_id} was never trained");
            warn!("{w}");
            return vec![w];
        };
        for (t, c) in vector.iter() {
            let have = counts.token_counts.get(t).copied().unwrap_or(0);
            let take = c.min(have);
            if take < c {
                warnings.push(format!("untrain: count of '{t}' in {category_id} floored at 0"));
            }
            if have == take {
                counts.token_counts.remove(t);
            } else {
                counts.token_counts.insert(t.to_string(), have - take);
            }
            counts.total_tokens -= take;
            if let Some(v) = self.vocabulary.get_mut(t) {
                *v -= take.min(*v);
                if *v == 0 {
                    self.vocabulary.remove(t);
                }
            }
        }
        if counts.doc_count == 0 {
            warnings.push(format!("untrain: document count of {category_id} floored at 0"));
        }
        counts.doc_count = counts.doc_count.saturating_sub(1);
        if counts.doc_count == 0 && counts.total_tokens == 0 {
            self.categories.remove(category_id);
        }
        for w in &warnings {
            warn!("{w}");
        }
        warnings
    }

    pub fn is_trained(&self) -> bool {
        self.categories.values().any(|c| c.doc_count > 0)
    }

    pub fn remove_category(&mut self, category_id: &str) {
        if let Some(counts) = self.categories.remove(category_id) {
            for (t, c) in counts.token_counts {
                if let Some(v) = self.vocabulary.get_mut(&t) {
                    *v -= c.min(*v);
                    if *v == 0 {
                        self.vocabulary.remove(&t);
                    }
                }
            }
        }
    }

    /// Posterior over every category with at least one document.
    ///
    /// Scores are computed in log space,
    /// `ln P(c) + sum_t tf(t) * ln((count_c(t) + alpha) / (total_c + alpha * |V|))`,
    /// then normalized as `exp(s - max) / sum exp(s - max)`.
    pub fn classify(&self, vector: &TermVector, alpha: f64) -> Result<BTreeMap<String, f64>> {
        let total_docs: u64 = self.categories.values().map(|c| c.doc_count).sum();
        if total_docs == 0 {
            return Err(ClassifierError::Untrained);
        }
        let vocab = self.vocabulary.len().max(1) as f64;
        let scores: Vec<(&String, f64)> = self
            .categories
            .iter()
            .filter(|(_, c)| c.doc_count > 0)
            .map(|(id, c)| {
                let prior = (c.doc_count as f64 / total_docs as f64).ln();
                let denom = c.total_tokens as f64 + alpha * vocab;
                let likelihood: f64 = vector
                    .iter()
                    .map(|(t, tf)| {
                        let count = c.token_counts.get(t).copied().unwrap_or(0) as f64;
                        tf as f64 * ((count + alpha) / denom).ln()
                    })
                    .sum();
                (id, prior + likelihood)
            })
            .collect();
        let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|(_, s)| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(scores.into_iter().zip(exps).map(|((id, _), e)| (id.clone(), e / z)).collect())
    }
}

/// Every argmax category (ties included) plus every category at or above
/// `threshold`; ordered by descending score then id.
pub fn decide_memberships(posteriors: &BTreeMap<String, f64>, threshold: f64) -> Vec<(String, f64)> {
    let max = posteriors.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<(String, f64)> = posteriors
        .iter()
        .filter(|(_, &p)| p == max || p >= threshold)
        .map(|(c, &p)| (c.clone(), p))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// The argmax category of a posterior map; ties go to the smallest id.
pub fn argmax(posteriors: &BTreeMap<String, f64>) -> Option<&str> {
    posteriors
        .iter()
        .fold(None, |best: Option<(&String, f64)>, (c, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((c, p)),
        })
        .map(|(c, _)| c.as_str())
}

/// L2-normalized mean of the members' normalized vectors. No members
/// gives the empty centroid.
pub fn update_centroid<'a, I>(members: I) -> Weights
where
    I: IntoIterator<Item = &'a Weights>,
{
    let mut sum = Weights::new();
    let mut n = 0usize;
    for v in members {
        n += 1;
        for (t, w) in normalize(v) {
            *sum.entry(t).or_insert(0.0) += w;
        }
    }
    if n == 0 {
        return Weights::new();
    }
    for w in sum.values_mut() {
        *w /= n as f64;
    }
    normalize(&sum)
}

/// Whether a category takes part in centroid matching and naive Bayes.
pub fn is_topic_category(category_id: &str) -> bool {
    category_id != UNSORTED_ID && category_id != SPAM_ID
}

/// Highest cosine similarity between `weighted` and any topic centroid.
pub fn max_centroid_similarity(store: &GraphStore, weighted: &Weights) -> Option<(String, f64)> {
    store
        .categories()
        .filter(|c| is_topic_category(&c.category_id))
        .map(|c| (c.category_id.clone(), cosine_similarity(weighted, &c.centroid)))
        .fold(None, |best, (id, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((id, s)),
        })
}

/// Opens a new auto category for `message_id` when no topic category exists
/// or none has a centroid within `tau`. The message is assigned with score
/// 1.0 and the centroid starts as its normalized vector.
///
/// A message with an empty weighted vector only opens a category when the
/// topic set is empty.
pub fn maybe_create_category(
    store: &mut GraphStore,
    message_id: &str,
    tau: f64,
    now: DateTime<Utc>,
) -> Result<Option<String>> {
    let digest = store
        .message(message_id)
        .ok_or_else(|| StoreError::UnknownMessage(message_id.to_string()))?
        .digest
        .clone();
    let best = max_centroid_similarity(store, &digest.weighted);
    let create = match best {
        None => true,
        Some(_) if digest.weighted.is_empty() => false,
        Some((_, sim)) => sim < tau,
    };
    if !create {
        return Ok(None);
    }
    let name = category_name(&digest);
    let id = store.create_category(&name, None, Provenance::Auto, false, now)?;
    store.assign(message_id, &id, 1.0, Provenance::Auto)?;
    store.set_centroid(&id, normalize(&digest.weighted))?;
    Ok(Some(id))
}

fn category_name(digest: &MessageDigest) -> String {
    let top = top_keywords(&digest.weighted, 2);
    if top.is_empty() {
        "misc".to_string()
    } else {
        top.join("-")
    }
}

/// Recomputes a category's centroid from its current members.
pub fn refresh_centroid(store: &mut GraphStore, category_id: &str) -> Result<()> {
    let centroid = {
        let members: Vec<&Weights> = store
            .member_ids(category_id)
            .filter_map(|m| store.message(m))
            .map(|r| &r.digest.weighted)
            .collect();
        update_centroid(members)
    };
    store.set_centroid(category_id, centroid)?;
    Ok(())
}

/// Good/bad token tables for the spam filter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpamModel {
    pub good: BTreeMap<String, u64>,
    pub bad: BTreeMap<String, u64>,
    pub ngood: u64,
    pub nbad: u64,
}

impl SpamModel {
    pub fn train(&mut self, vector: &TermVector, is_spam: bool) {
        let table = if is_spam { &mut self.bad } else { &mut self.good };
        for (t, c) in vector.iter() {
            *table.entry(t.to_string()).or_insert(0) += c;
        }
        if is_spam {
            self.nbad += 1;
        } else {
            self.ngood += 1;
        }
    }

    pub fn untrain(&mut self, vector: &TermVector, is_spam: bool) {
        let table = if is_spam { &mut self.bad } else { &mut self.good };
        for (t, c) in vector.iter() {
            if let Some(v) = table.get_mut(t) {
                *v -= c.min(*v);
                if *v == 0 {
                    table.remove(t);
                }
            }
        }
        if is_spam {
            self.nbad = self.nbad.saturating_sub(1);
        } else {
            self.ngood = self.ngood.saturating_sub(1);
        }
    }
}

fn ratio(x: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        (x / n as f64).min(1.0)
    }
}

/// Spam probability of one token. Tokens with `2g + b` below the evidence
/// threshold, or with no usable counts at all, get `unknown_token_prob`.
pub fn graham_token_prob(token: &str, model: &SpamModel, config: &ClassifierConfig) -> f64 {
    let g = model.good.get(token).copied().unwrap_or(0);
    let b = model.bad.get(token).copied().unwrap_or(0);
    if 2 * g + b < config.min_token_evidence {
        return config.unknown_token_prob;
    }
    let good = ratio(2.0 * g as f64, model.ngood);
    let bad = ratio(b as f64, model.nbad);
    if good + bad == 0.0 {
        return config.unknown_token_prob;
    }
    (bad / (good + bad)).clamp(0.01, 0.99)
}

/// Combines the most interesting token probabilities.
pub fn combine_probabilities(probs: &[(String, f64)], interesting: usize) -> f64 {
    let mut ranked: Vec<&(String, f64)> = probs.iter().collect();
    ranked.sort_by(|a, b| {
        (b.1 - 0.5)
            .abs()
            .total_cmp(&(a.1 - 0.5).abs())
            .then_with(|| b.1.total_cmp(&a.1))
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(interesting);
    if ranked.is_empty() {
        return 0.5;
    }
    let spam: f64 = ranked.iter().map(|(_, p)| p).product();
    let ham: f64 = ranked.iter().map(|(_, p)| 1.0 - p).product();
    spam / (spam + ham)
}

/// Spam score of a token list; duplicates count once.
pub fn graham_score<S: AsRef<str>>(tokens: &[S], model: &SpamModel, config: &ClassifierConfig) -> f64 {
    let distinct: BTreeSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let probs: Vec<(String, f64)> =
        distinct.into_iter().map(|t| (t.to_string(), graham_token_prob(t, model, config))).collect();
    combine_probabilities(&probs, config.interesting_tokens)
}

pub fn is_spam(score: f64, config: &ClassifierConfig) -> bool {
    score > config.spam_threshold
}

/// Everything the classifier persists under the store's `classifier` key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierState {
    pub category_model: CategoryModel,
    pub spam_model: SpamModel,
    pub config: ClassifierConfig,
    /// Message -> categories its digest is currently trained on.
    pub training_log: BTreeMap<String, BTreeSet<String>>,
    /// Message -> user spam verdict currently trained into the spam model.
    pub spam_labels: BTreeMap<String, bool>,
}

impl ClassifierState {
    pub fn new(config: ClassifierConfig) -> Self {
        ClassifierState { config, ..Default::default() }
    }

    pub fn is_trained_on(&self, message_id: &str, category_id: &str) -> bool {
        self.training_log.get(message_id).is_some_and(|s| s.contains(category_id))
    }

    /// Trains `message_id` on `category_id` unless it already is.
    pub fn train_message(&mut self, message_id: &str, vector: &TermVector, category_id: &str) {
        if self.training_log.entry(message_id.to_string()).or_default().insert(category_id.to_string()) {
            self.category_model.train(vector, category_id);
        }
    }

    /// Removes a training recorded by [`train_message`](Self::train_message).
    pub fn untrain_message(&mut self, message_id: &str, vector: &TermVector, category_id: &str) -> bool {
        let removed = self.training_log.get_mut(message_id).is_some_and(|s| s.remove(category_id));
        if self.training_log.get(message_id).is_some_and(BTreeSet::is_empty) {
            self.training_log.remove(message_id);
        }
        if removed {
            self.category_model.untrain(vector, category_id);
        }
        removed
    }

    /// Untrains every category `message_id` was trained on.
    pub fn untrain_all(&mut self, message_id: &str, vector: &TermVector) -> Vec<String> {
        let cats: Vec<String> = self.training_log.get(message_id).into_iter().flatten().cloned().collect();
        for c in &cats {
            self.untrain_message(message_id, vector, c);
        }
        cats
    }

    /// Sets the user spam verdict, replacing any earlier one.
    pub fn label_spam(&mut self, message_id: &str, vector: &TermVector, is_spam: bool) {
        match self.spam_labels.get(message_id).copied() {
            Some(prev) if prev == is_spam => return,
            Some(prev) => self.spam_model.untrain(vector, prev),
            None => {}
        }
        self.spam_model.train(vector, is_spam);
        self.spam_labels.insert(message_id.to_string(), is_spam);
    }

    /// Drops model state for categories that no longer exist in `store`.
    pub fn retain_categories(&mut self, store: &GraphStore) {
        let gone: Vec<String> =
            self.category_model.categories.keys().filter(|c| store.category(c).is_none()).cloned().collect();
        for c in &gone {
            self.category_model.remove_category(c);
        }
        for cats in self.training_log.values_mut() {
            cats.retain(|c| store.category(c).is_some());
        }
        self.training_log.retain(|m, cats| !cats.is_empty() && store.message(m).is_some());
    }

    pub fn classify(&self, vector: &TermVector) -> Result<BTreeMap<String, f64>> {
        self.category_model.classify(vector, self.config.laplace)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("classifier state serializes")
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self, serde_json::Error> {
        if value.is_null() {
            return Ok(Self::default());
        }
        serde_json::from_value(value.clone())
    }
}

/// Moves a message from `from` (if any) to `to`: untrains and unlinks the
/// old category, trains the new one, adds a user edge with score 1.0 and
/// refreshes both centroids. Correcting to the category it is already in
/// is a no-op. The built-in categories get edges but no training.
pub fn apply_correction(
    store: &mut GraphStore,
    state: &mut ClassifierState,
    message_id: &str,
    from: Option<&str>,
    to: &str,
) -> Result<()> {
    let vector = store
        .message(message_id)
        .ok_or_else(|| StoreError::UnknownMessage(message_id.to_string()))?
        .digest
        .vector
        .clone();
    for c in from.into_iter().chain(Some(to)) {
        if store.category(c).is_none() {
            return Err(StoreError::UnknownCategory(c.to_string()).into());
        }
    }
    if from == Some(to) {
        return Ok(());
    }
    if from.is_none()
        && state.is_trained_on(message_id, to)
        && store.edge(message_id, to).is_some_and(|e| e.provenance == Provenance::User)
    {
        return Ok(());
    }

    if let Some(from) = from {
        state.untrain_message(message_id, &vector, from);
        if store.edge(message_id, from).is_some() {
            store.unassign(message_id, from)?;
        }
        if is_topic_category(from) {
            refresh_centroid(store, from)?;
        }
    }
    store.assign(message_id, to, 1.0, Provenance::User)?;
    if is_topic_category(to) {
        state.train_message(message_id, &vector, to);
        refresh_centroid(store, to)?;
    }
    Ok(())
}

/// One proposed sub-category.
#[derive(Debug, Clone, PartialEq)]
pub struct Subcluster {
    pub name: String,
    pub members: Vec<String>,
    pub centroid: Weights,
}

/// Splits a category's members with spherical k-means.
///
/// Seeding is deterministic: the first seed is the member least similar
/// to the category centroid, each further seed the member least similar to
/// the seeds chosen so far (ties to the smallest message id). Members go to
/// the most similar centroid (ties to the lower index) until assignments
/// stop changing or the iteration cap is hit. If any cluster ends up with
/// fewer than `subcluster_min_child` members the result is empty.
pub fn subcluster(
    parent_name: &str,
    parent_depth: usize,
    max_depth: usize,
    members: &[(String, Weights)],
    config: &ClassifierConfig,
) -> Result<Vec<Subcluster>> {
    if members.len() < config.subcluster_min_size {
        return Err(ClassifierError::TooFewMembers);
    }
    if parent_depth >= max_depth {
        return Err(ClassifierError::MaxDepthReached);
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| members[a].0.cmp(&members[b].0));
    let vectors: Vec<Weights> = order.iter().map(|&i| normalize(&members[i].1)).collect();
    let ids: Vec<&str> = order.iter().map(|&i| members[i].0.as_str()).collect();

    let category_centroid = update_centroid(vectors.iter());
    let k = config.subcluster_k;
    let mut seeds: Vec<usize> = Vec::with_capacity(k);
    // Members are sorted by id, so the first minimum found wins ties.
    let argmin = |score: &dyn Fn(usize) -> f64| {
        (0..vectors.len()).fold((0usize, f64::INFINITY), |best, i| {
            let s = score(i);
            if s < best.1 {
                (i, s)
            } else {
                best
            }
        })
        .0
    };
    seeds.push(argmin(&|i| cosine_similarity(&vectors[i], &category_centroid)));
    while seeds.len() < k {
        let chosen = seeds.clone();
        seeds.push(argmin(&|i| {
            chosen.iter().map(|&s| cosine_similarity(&vectors[i], &vectors[s])).fold(f64::NEG_INFINITY, f64::max)
        }));
    }

    let mut centroids: Vec<Weights> = seeds.iter().map(|&s| vectors[s].clone()).collect();
    let mut assignment: Vec<usize> = vec![usize::MAX; vectors.len()];
    for _ in 0..SUBCLUSTER_MAX_ITERATIONS {
        let next: Vec<usize> = vectors
            .iter()
            .map(|v| {
                let mut best = (0usize, f64::NEG_INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let s = cosine_similarity(v, c);
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                best.0
            })
            .collect();
        let stable = next == assignment;
        assignment = next;
        centroids = (0..k)
            .map(|j| update_centroid(vectors.iter().zip(&assignment).filter(|(_, &a)| a == j).map(|(v, _)| v)))
            .collect();
        if stable {
            break;
        }
    }

    let mut clusters: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        clusters[a].push(ids[i].to_string());
    }
    if clusters.iter().any(|c| c.len() < config.subcluster_min_child) {
        return Ok(Vec::new());
    }
    Ok(clusters
        .into_iter()
        .zip(centroids)
        .map(|(members, centroid)| {
            let keyword = top_keywords(&centroid, 1).pop().unwrap_or_else(|| "misc".to_string());
            Subcluster { name: format!("{parent_name}/{keyword}"), members, centroid }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mime::{MessageLocation, SourceKind};
    use crate::store::{MessageHeaders, MessageRecord, DEFAULT_MAX_DEPTH};
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn tv(pairs: &[(&str, u64)]) -> TermVector {
        pairs.iter().map(|&(t, c)| (t, c)).collect()
    }

    fn w(pairs: &[(&str, f64)]) -> Weights {
        pairs.iter().map(|&(t, x)| (t.to_string(), x)).collect()
    }

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
    }

    fn worked_example_model() -> CategoryModel {
        let mut m = CategoryModel::default();
        m.train(&tv(&[("grid", 2), ("scheduling", 1)]), "A");
        m.train(&tv(&[("invoice", 1), ("payment", 1), ("due", 1)]), "B");
        m
    }

    #[test]
    fn train_counts() {
        let mut m = CategoryModel::default();
        m.train(&tv(&[("grid", 2), ("scheduling", 1)]), "A");
        assert_eq!(m.categories["A"].total_tokens, 3);
        assert_eq!(m.categories["A"].doc_count, 1);
        assert_eq!(m.vocabulary.len(), 2);

        let once = m.clone();
        m.train(&tv(&[("grid", 2), ("scheduling", 1)]), "A");
        assert_eq!(m.categories["A"].token_counts["grid"], 2 * once.categories["A"].token_counts["grid"]);
        assert_eq!(m.categories["A"].total_tokens, 6);

        let before_a = m.categories["A"].clone();
        m.train(&tv(&[("invoice", 4)]), "B");
        assert_eq!(m.categories["A"], before_a);
    }

    #[test]
    fn untrain_inverse_and_floor() {
        let base = worked_example_model();
        let d = tv(&[("grid", 1), ("new", 3)]);
        let mut m = base.clone();
        m.train(&d, "A");
        assert!(m.untrain(&d, "A").is_empty());
        assert_eq!(m, base);

        let mut m = base.clone();
        let warnings = m.untrain(&tv(&[("ghost", 2)]), "A");
        assert!(!warnings.is_empty());
        assert_eq!(m.categories["A"].token_counts, base.categories["A"].token_counts);

        let mut m = base.clone();
        m.train(&d, "A");
        m.train(&d, "B");
        let b_before = m.categories["B"].clone();
        m.untrain(&d, "A");
        assert_eq!(m.categories["B"], b_before);
    }

    #[test]
    fn classify_worked_example() {
        let m = worked_example_model();
        assert_eq!(m.vocabulary.len(), 5);
        let post = m.classify(&tv(&[("grid", 1)]), 1.0).unwrap();
        assert!((post["A"] - 0.75).abs() < 1e-12);
        assert!((post["B"] - 0.25).abs() < 1e-12);
        assert_eq!(decide_memberships(&post, 0.30), vec![("A".to_string(), post["A"])]);
    }

    #[test]
    fn classify_edge_cases() {
        let mut single = CategoryModel::default();
        single.train(&tv(&[("x", 1)]), "only");
        assert_eq!(single.classify(&tv(&[("y", 3)]), 1.0).unwrap()["only"], 1.0);

        let mut m = worked_example_model();
        m.train(&tv(&[("grid", 1)]), "A");
        let post = m.classify(&TermVector::default(), 1.0).unwrap();
        assert!((post["A"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((post["B"] - 1.0 / 3.0).abs() < 1e-12);

        assert!(matches!(CategoryModel::default().classify(&tv(&[("x", 1)]), 1.0), Err(ClassifierError::Untrained)));
    }

    #[test]
    fn decide_membership_rules() {
        let p = |pairs: &[(&str, f64)]| pairs.iter().map(|&(c, x)| (c.to_string(), x)).collect::<BTreeMap<_, _>>();
        assert_eq!(
            decide_memberships(&p(&[("A", 0.5), ("B", 0.5)]), 0.30),
            vec![("A".to_string(), 0.5), ("B".to_string(), 0.5)]
        );
        assert_eq!(decide_memberships(&p(&[("A", 1.0)]), 0.30), vec![("A".to_string(), 1.0)]);
        assert_eq!(
            decide_memberships(&p(&[("A", 0.2), ("B", 0.45), ("C", 0.35)]), 0.30),
            vec![("B".to_string(), 0.45), ("C".to_string(), 0.35)]
        );
        assert_eq!(argmax(&p(&[("B", 0.5), ("A", 0.5)])), Some("A"));
    }

    #[test]
    fn centroid_examples() {
        let v = w(&[("a", 3.0), ("b", 4.0)]);
        assert_eq!(update_centroid([&v]), w(&[("a", 0.6), ("b", 0.8)]));
        assert_eq!(update_centroid([&v, &v]), update_centroid([&v]));
        let c = update_centroid([&w(&[("a", 1.0)]), &w(&[("b", 1.0)])]);
        assert!((c["a"] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c["b"] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(update_centroid(std::iter::empty::<&Weights>()).is_empty());
    }

    fn record(id: &str, weighted: Weights) -> MessageRecord {
        let vector = weighted.keys().map(|t| (t.as_str(), 1u64)).collect();
        MessageRecord {
            digest: MessageDigest {
                message_id: id.into(),
                keywords: top_keywords(&weighted, 10),
                summary: String::new(),
                vector,
                weighted,
            },
            location: MessageLocation {
                account_id: "acct".into(),
                mailbox: "INBOX".into(),
                uid: 1,
                uidvalidity: 1,
                source_kind: SourceKind::Imap,
            },
            headers: MessageHeaders::default(),
            content_id: format!("synth-{id}"),
            spam_score: None,
        }
    }

    #[test]
    fn new_category_on_empty_set() {
        let mut store = GraphStore::new(DEFAULT_MAX_DEPTH, now());
        store.add_message(record("m1", w(&[("grid", 2.0), ("outage", 1.0), ("power", 1.5)])));
        let id = maybe_create_category(&mut store, "m1", 0.25, now()).unwrap().unwrap();
        let cat = store.category(&id).unwrap();
        assert_eq!(cat.name, "grid-power");
        assert_eq!(cat.provenance, Provenance::Auto);
        assert!(!cat.pinned);
        assert_eq!(store.edge("m1", &id).unwrap().score, 1.0);
        assert!((crate::text::norm(&cat.centroid) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn novelty_threshold() {
        let mut store = GraphStore::new(DEFAULT_MAX_DEPTH, now());
        store.add_message(record("m1", w(&[("grid", 1.0), ("power", 1.0)])));
        let first = maybe_create_category(&mut store, "m1", 0.25, now()).unwrap().unwrap();

        // orthogonal: similarity 0 < tau
        store.add_message(record("m2", w(&[("invoice", 1.0)])));
        assert!(maybe_create_category(&mut store, "m2", 0.25, now()).unwrap().is_some());

        // near duplicate: similarity ~0.99 >= tau
        store.add_message(record("m3", w(&[("grid", 1.0), ("power", 0.9)])));
        assert!(maybe_create_category(&mut store, "m3", 0.25, now()).unwrap().is_none());
        assert!(max_centroid_similarity(&store, &store.message("m3").unwrap().digest.weighted).unwrap().1 > 0.9);

        // same top keywords as the first category -> suffixed name
        store.add_message(record("m4", w(&[("grid", 1.0), ("power", 1.0), ("zzz", 0.0)])));
        let again = maybe_create_category(&mut store, "m4", 0.9999999, now()).unwrap();
        assert!(again.is_none() || store.category(&again.unwrap()).unwrap().name != store.category(&first).unwrap().name);
    }

    #[test]
    fn correction_moves_message() {
        let mut store = GraphStore::new(DEFAULT_MAX_DEPTH, now());
        let mut state = ClassifierState::new(ClassifierConfig::default());
        let a = store.create_category("A", None, Provenance::User, true, now()).unwrap();
        let b = store.create_category("B", None, Provenance::User, true, now()).unwrap();
        for (id, terms, cat) in [
            ("a1", &[("grid", 1.0), ("power", 1.0)][..], &a),
            ("a2", &[("grid", 1.0), ("outage", 1.0)][..], &a),
            ("b1", &[("invoice", 1.0), ("payment", 1.0)][..], &b),
        ] {
            store.add_message(record(id, w(terms)));
            let v = store.message(id).unwrap().digest.vector.clone();
            state.train_message(id, &v, cat);
            store.assign(id, cat, 1.0, Provenance::Auto).unwrap();
        }
        // m looks like B but was filed under A by self-training
        store.add_message(record("m", w(&[("invoice", 1.0), ("grid", 1.0)])));
        let v = store.message("m").unwrap().digest.vector.clone();
        state.train_message("m", &v, &a);
        store.assign("m", &a, 0.6, Provenance::Auto).unwrap();
        let before = state.classify(&v).unwrap();
        assert_eq!(argmax(&before), Some(a.as_str()));

        apply_correction(&mut store, &mut state, "m", Some(&a), &b).unwrap();
        let after = state.classify(&v).unwrap();
        assert_eq!(argmax(&after), Some(b.as_str()));
        assert!(after[&b] > before[&b]);
        assert!(store.edge("m", &a).is_none());
        assert_eq!(store.edge("m", &b).unwrap().provenance, Provenance::User);

        // no-op to the same category
        let snapshot = (store.clone(), state.clone());
        apply_correction(&mut store, &mut state, "m", Some(&b), &b).unwrap();
        assert_eq!((store.clone(), state.clone()), snapshot);

        // pure addition leaves A untouched
        let a_counts = state.category_model.categories[&a].clone();
        apply_correction(&mut store, &mut state, "a1", None, &b).unwrap();
        assert_eq!(state.category_model.categories[&a], a_counts);
        assert!(store.edge("a1", &a).is_some());
        assert!(store.edge("a1", &b).is_some());
        // repeating the addition changes nothing
        let snapshot = state.clone();
        apply_correction(&mut store, &mut state, "a1", None, &b).unwrap();
        assert_eq!(state, snapshot);

        assert!(apply_correction(&mut store, &mut state, "ghost", None, &b).is_err());
        assert!(apply_correction(&mut store, &mut state, "m", None, "ghost").is_err());
    }

    fn spam_model(token: &str, g: u64, b: u64) -> SpamModel {
        let mut m = SpamModel { ngood: 10, nbad: 10, ..Default::default() };
        if g > 0 {
            m.good.insert(token.into(), g);
        }
        if b > 0 {
            m.bad.insert(token.into(), b);
        }
        m
    }

    #[test]
    fn graham_token_examples() {
        let cfg = ClassifierConfig::default();
        assert_eq!(graham_token_prob("t", &spam_model("t", 0, 5), &cfg), 0.99);
        assert_eq!(graham_token_prob("t", &spam_model("t", 3, 0), &cfg), 0.01);
        assert_eq!(graham_token_prob("t", &spam_model("t", 1, 1), &cfg), 0.40);
        // g=2, b=4: good = min(1, 4/10) = 0.4, bad = 0.4 -> 0.5
        assert!((graham_token_prob("t", &spam_model("t", 2, 4), &cfg) - 0.5).abs() < 1e-15);
        // evidence present but no message counts at all
        let empty = SpamModel { good: [("t".to_string(), 9)].into_iter().collect(), ..Default::default() };
        assert_eq!(graham_token_prob("t", &empty, &cfg), 0.40);
    }

    #[test]
    fn graham_combination_examples() {
        let p = |v: &[f64]| v.iter().enumerate().map(|(i, &x)| (format!("t{i}"), x)).collect::<Vec<_>>();
        assert!((combine_probabilities(&p(&[0.99]), 15) - 0.99).abs() < 1e-12);
        assert!((combine_probabilities(&p(&[0.99, 0.01]), 15) - 0.5).abs() < 1e-12);
        assert!((combine_probabilities(&p(&[0.99, 0.99]), 15) - 0.9801 / 0.9802).abs() < 1e-12);
        assert_eq!(combine_probabilities(&[], 15), 0.5);
        // only the most extreme probabilities count
        let many = p(&[0.99, 0.45, 0.55, 0.5]);
        assert!((combine_probabilities(&many, 1) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn label_spam_swaps_tables() {
        let mut s = ClassifierState::default();
        let v = tv(&[("cheap", 2), ("pills", 1)]);
        s.label_spam("m", &v, true);
        assert_eq!(s.spam_model.bad["cheap"], 2);
        assert_eq!(s.spam_model.nbad, 1);
        s.label_spam("m", &v, true);
        assert_eq!(s.spam_model.nbad, 1);
        s.label_spam("m", &v, false);
        assert!(s.spam_model.bad.is_empty());
        assert_eq!(s.spam_model.nbad, 0);
        assert_eq!(s.spam_model.good["cheap"], 2);
        assert_eq!(s.spam_model.ngood, 1);
    }

    fn topic_members(prefix: &str, vocab: &[&str], n: usize, offset: usize) -> Vec<(String, Weights)> {
        (0..n)
            .map(|i| {
                let v: Weights = (0..4)
                    .map(|j| (vocab[(i + j) % vocab.len()].to_string(), 1.0 + ((i * 7 + j) % 3) as f64))
                    .collect();
                (format!("{prefix}{:02}", i + offset), v)
            })
            .collect()
    }

    #[test]
    fn subcluster_disjoint_topics() {
        let x = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"];
        let y = ["golf", "hotel", "india", "juliet", "kilo", "lima"];
        let mut members = topic_members("x", &x, 12, 0);
        members.extend(topic_members("y", &y, 12, 0));
        let out = subcluster("Work", 1, 3, &members, &ClassifierConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        for c in &out {
            assert_eq!(c.members.len(), 12);
            let prefix = &c.members[0][..1];
            assert!(c.members.iter().all(|m| m.starts_with(prefix)));
            assert!(c.name.starts_with("Work/"));
        }
        // deterministic
        assert_eq!(out, subcluster("Work", 1, 3, &members, &ClassifierConfig::default()).unwrap());
    }

    #[test]
    fn subcluster_degenerate_and_errors() {
        let same = w(&[("a", 1.0), ("b", 2.0)]);
        let members: Vec<(String, Weights)> = (0..24).map(|i| (format!("m{i:02}"), same.clone())).collect();
        assert!(subcluster("P", 1, 3, &members, &ClassifierConfig::default()).unwrap().is_empty());

        let few: Vec<(String, Weights)> = members[..5].to_vec();
        assert!(matches!(subcluster("P", 1, 3, &few, &ClassifierConfig::default()), Err(ClassifierError::TooFewMembers)));
        assert!(matches!(
            subcluster("P", 3, 3, &members, &ClassifierConfig::default()),
            Err(ClassifierError::MaxDepthReached)
        ));
    }

    #[test]
    fn config_defaults_valid() {
        ClassifierConfig::default().validate().unwrap();
        let bad = ClassifierConfig { assign_threshold: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn vector_strategy() -> impl Strategy<Value = TermVector> {
        proptest::collection::btree_map("[a-e]", 1u64..4, 0..5).prop_map(|counts| TermVector { counts })
    }

    fn model_strategy() -> impl Strategy<Value = CategoryModel> {
        proptest::collection::vec((vector_strategy(), "[ABC]"), 0..6).prop_map(|docs| {
            let mut m = CategoryModel::default();
            for (v, c) in docs {
                m.train(&v, &c);
            }
            m
        })
    }

    proptest! {
        #[test]
        fn untrain_train_identity(m in model_strategy(), d in vector_strategy(), c in "[A-D]") {
            let mut trained = m.clone();
            trained.train(&d, &c);
            let warnings = trained.untrain(&d, &c);
            prop_assert!(warnings.is_empty());
            prop_assert_eq!(trained, m);
        }

        #[test]
        fn posteriors_normalized(m in model_strategy(), d in vector_strategy()) {
            if let Ok(post) = m.classify(&d, 1.0) {
                let sum: f64 = post.values().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(post.values().all(|&p| p >= 0.0));
                prop_assert!(!decide_memberships(&post, 0.3).is_empty());
            }
        }

        #[test]
        fn graham_permutation_invariant(
            tokens in proptest::collection::vec("[a-h]", 0..12),
            seed in any::<u64>(),
        ) {
            let mut model = SpamModel { ngood: 7, nbad: 5, ..Default::default() };
            for (i, t) in ["a", "b", "c", "d", "e", "f"].iter().enumerate() {
                model.good.insert(t.to_string(), (seed >> i) & 7);
                model.bad.insert(t.to_string(), (seed >> (i + 8)) & 7);
            }
            let cfg = ClassifierConfig::default();
            let score = graham_score(&tokens, &model, &cfg);
            prop_assert!((0.0..=1.0).contains(&score));
            let mut reversed = tokens.clone();
            reversed.reverse();
            prop_assert_eq!(score, graham_score(&reversed, &model, &cfg));
            for t in &tokens {
                let p = graham_token_prob(t, &model, &cfg);
                prop_assert!(p == cfg.unknown_token_prob || (0.01..=0.99).contains(&p));
            }
        }
    }
}
