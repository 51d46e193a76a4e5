//! Orchestration: the ingestion pipeline, user corrections and category
//! management over one store, plus sync jobs and read-only views.
//!
//! All mutations go through [`Engine`], which applies each operation as a
//! transaction: on any error, including a failed persist, the in-memory
//! state is rolled back to what is on disk.

mod config;
mod sync;
pub mod views;

use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use log::{info, warn};
use thiserror::Error;

use crate::classifier::{
    apply_correction, argmax, decide_memberships, graham_score, is_spam, is_topic_category, max_centroid_similarity,
    maybe_create_category, refresh_centroid, subcluster, ClassifierError, ClassifierState,
};
use crate::mime::{parse_message, RawMessage};
use crate::store::{
    Category, GraphStore, MessageHeaders, MessageRecord, Neighbor, Provenance, RepairAction, StoreError, SPAM_ID,
    UNSORTED_ID,
};
use crate::text::{cosine_similarity, digest, DigestOptions, MessageDigest, Stopwords, TermVector, Weights};
use crate::transport::mbox::import_mbox;
use crate::transport::{SyncState, TransportError};

pub use config::{default_data_dir, AppConfig, CONFIG_ENV, CONFIG_FILE, DEFAULT_HTTP_PORT, HOME_ENV, STORE_FILE};
pub use sync::{AccountProgress, JobState, Service, SyncJob};

/// Errors grouped by how a client should react to them.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::UnknownMessage(_)
            | StoreError::UnknownCategory(_)
            | StoreError::UnknownId(_)
            | StoreError::NoSuchEdge => ServiceError::NotFound(msg),
            StoreError::DepthExceeded => ServiceError::Conflict(msg),
            StoreError::InvalidScore(_) => ServiceError::Invalid(msg),
            StoreError::Corrupt(_) | StoreError::UnsupportedVersion(_) | StoreError::Io(_) => {
                ServiceError::Internal(msg)
            }
        }
    }
}

impl From<ClassifierError> for ServiceError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Store(s) => s.into(),
            ClassifierError::InvalidConfig(_) => ServiceError::Invalid(e.to_string()),
            ClassifierError::Untrained | ClassifierError::TooFewMembers | ClassifierError::MaxDepthReached => {
                ServiceError::Conflict(e.to_string())
            }
        }
    }
}

impl From<TransportError> for ServiceError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::InvalidConfig(_) | TransportError::UnreadableFile { .. } => {
                ServiceError::Invalid(e.to_string())
            }
            _ => ServiceError::Internal(e.to_string()),
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always returns the same instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// Runs after the new store file is written and before it replaces the old
/// one. Returning an error aborts the persist.
pub type PersistHook = Box<dyn FnMut(&Path) -> io::Result<()> + Send>;

/// Outcome of one pipeline run.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct PipelineReport {
    pub ingested: usize,
    pub duplicates: usize,
    pub created_categories: Vec<String>,
    pub assignments: usize,
    pub spam: usize,
    pub errors: Vec<String>,
    pub repairs: Vec<RepairAction>,
}

pub struct Engine {
    config: AppConfig,
    store_path: PathBuf,
    store: GraphStore,
    classifier: ClassifierState,
    stopwords: Stopwords,
    clock: Arc<dyn Clock>,
    persist_hook: Option<PersistHook>,
}

impl Engine {
    /// Loads the store from the data directory, or starts an empty one.
    pub fn open(config: AppConfig, clock: Arc<dyn Clock>) -> Result<Engine> {
        config.validate()?;
        std::fs::create_dir_all(&config.data_dir).map_err(|e| {
            ServiceError::Invalid(format!("cannot create data dir {}: {e}", config.data_dir.display()))
        })?;
        let store_path = config.store_path();
        let mut store = if store_path.exists() {
            GraphStore::load(&store_path)?
        } else {
            GraphStore::new(config.max_depth, clock.now())
        };
        store.max_depth = config.max_depth;
        let mut classifier = ClassifierState::from_value(&store.classifier)
            .map_err(|e| ServiceError::Internal(format!("corrupt classifier state: {e}")))?;
        classifier.config = config.classifier.clone();
        let stopwords = config.stopwords()?;
        Ok(Engine { config, store_path, store, classifier, stopwords, clock, persist_hook: None })
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn store(&self) -> &GraphStore {
        &self.store
    }

    pub fn classifier(&self) -> &ClassifierState {
        &self.classifier
    }

    pub fn store_path(&self) -> &Path {
        &self.store_path
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn set_persist_hook(&mut self, hook: Option<PersistHook>) {
        self.persist_hook = hook;
    }

    /// Writes the current state to disk (also creates the file on `init`).
    pub fn persist(&mut self) -> Result<()> {
        self.store.classifier = self.classifier.to_value();
        let hook = &mut self.persist_hook;
        self.store.persist_with_hook(&self.store_path, |p| match hook {
            Some(h) => h(p),
            None => Ok(()),
        })?;
        Ok(())
    }

    /// Runs `op`, repairs invariants, persists; rolls back on any error.
    fn transaction<T>(&mut self, op: impl FnOnce(&mut Engine) -> Result<T>) -> Result<(T, Vec<RepairAction>)> {
        let backup = (self.store.clone(), self.classifier.clone());
        let outcome = op(self).and_then(|value| {
            let repairs = self.store.commit_batch();
            self.classifier.retain_categories(&self.store);
            self.persist()?;
            Ok((value, repairs))
        });
        if outcome.is_err() {
            (self.store, self.classifier) = backup;
        }
        outcome
    }

    fn digest_options(&self) -> DigestOptions {
        DigestOptions {
            keywords: self.config.classifier.keyword_count,
            summary_sentences: self.config.summary_sentences,
        }
    }

    /// Ingests raw messages in (account, mailbox, uid) order and commits
    /// `sync_state` together with them. Per-message failures are reported,
    /// not raised.
    pub fn run_pipeline(&mut self, mut messages: Vec<RawMessage>, sync_state: SyncState) -> Result<PipelineReport> {
        messages.sort_by(|a, b| a.location.sort_key().cmp(&b.location.sort_key()));
        let (mut report, repairs) = self.transaction(|engine| {
            let mut report = PipelineReport::default();
            for raw in &messages {
                if let Err(e) = engine.ingest(raw, &mut report) {
                    let l = &raw.location;
                    warn!("ingest {}/{}/{}: {e}", l.account_id, l.mailbox, l.uid);
                    report.errors.push(format!("{}/{}/{}: {e}", l.account_id, l.mailbox, l.uid));
                }
            }
            engine.store.sync_state.merge(sync_state);
            Ok(report)
        })?;
        report.repairs = repairs;
        info!(
            "pipeline: {} ingested, {} duplicates, {} new categories, {} spam",
            report.ingested,
            report.duplicates,
            report.created_categories.len(),
            report.spam
        );
        Ok(report)
    }

    fn ingest(&mut self, raw: &RawMessage, report: &mut PipelineReport) -> Result<()> {
        let parsed = parse_message(raw);
        let mut record = MessageRecord {
            digest: MessageDigest {
                message_id: parsed.message_id.clone(),
                keywords: Vec::new(),
                summary: String::new(),
                vector: TermVector::default(),
                weighted: Weights::new(),
            },
            location: raw.location.clone(),
            headers: MessageHeaders {
                from: parsed.from.clone(),
                to: parsed.to.clone(),
                cc: parsed.cc.clone(),
                subject: parsed.subject.clone(),
                date: parsed.date,
                attachments: parsed.attachments.clone(),
            },
            content_id: parsed.content_id.clone(),
            spam_score: None,
        };
        let id = self.store.resolve_message_id(&record);
        if self.store.message(&id).is_some() {
            self.store.add_message(record);
            report.duplicates += 1;
            return Ok(());
        }
        let opts = self.digest_options();
        record.digest =
            digest(&id, &parsed.subject, &parsed.body_text, &self.stopwords, &mut self.store.corpus_stats, &opts);
        let score = self.spam_score(&record.digest.vector);
        record.spam_score = Some(score);
        let id = self.store.add_message(record);
        report.ingested += 1;
        if is_spam(score, &self.classifier.config) {
            self.store.assign(&id, SPAM_ID, score, Provenance::Auto)?;
            report.spam += 1;
            report.assignments += 1;
            return Ok(());
        }
        self.categorize(&id, report)
    }

    fn spam_score(&self, vector: &TermVector) -> f64 {
        let tokens: Vec<&str> = vector.iter().map(|(t, _)| t).collect();
        graham_score(&tokens, &self.classifier.spam_model, &self.classifier.config)
    }

    /// Novelty check, then naive Bayes; self-trains on the argmax only.
    fn categorize(&mut self, id: &str, report: &mut PipelineReport) -> Result<()> {
        let (vector, weighted) = {
            let d = &self.store.message(id).ok_or_else(|| StoreError::UnknownMessage(id.into()))?.digest;
            (d.vector.clone(), d.weighted.clone())
        };
        let tau = self.classifier.config.new_category_similarity;
        let trained = self.classifier.category_model.is_trained();
        let novel = !trained || max_centroid_similarity(&self.store, &weighted).is_none_or(|(_, s)| s < tau);
        if novel {
            if let Some(created) = maybe_create_category(&mut self.store, id, tau, self.clock.now())? {
                self.classifier.train_message(id, &vector, &created);
                report.created_categories.push(created);
                report.assignments += 1;
                return Ok(());
            }
        }
        if !trained {
            return Ok(());
        }
        let posteriors = self.classifier.classify(&vector)?;
        for (category, p) in decide_memberships(&posteriors, self.classifier.config.assign_threshold) {
            if self.store.category(&category).is_none() {
                continue;
            }
            self.store.assign(id, &category, p, Provenance::Auto)?;
            report.assignments += 1;
            refresh_centroid(&mut self.store, &category)?;
        }
        if let Some(best) = argmax(&posteriors) {
            self.classifier.train_message(id, &vector, best);
        }
        Ok(())
    }

    fn require_message(&self, id: &str) -> Result<()> {
        match self.store.message(id) {
            Some(_) => Ok(()),
            None => Err(ServiceError::NotFound(format!("unknown message: {id}"))),
        }
    }

    fn require_category(&self, id: &str) -> Result<&Category> {
        self.store.category(id).ok_or_else(|| ServiceError::NotFound(format!("unknown category: {id}")))
    }

    /// Applies a user correction and returns the message's memberships.
    pub fn correct(&mut self, message_id: &str, from: Option<&str>, to: &str) -> Result<Vec<Neighbor>> {
        self.require_message(message_id)?;
        self.require_category(to)?;
        if let Some(f) = from {
            self.require_category(f)?;
        }
        if to == SPAM_ID {
            return self.mark_spam(message_id, true);
        }
        self.transaction(|engine| {
            let from = if from == Some(SPAM_ID) {
                engine.unflag_spam(message_id)?;
                None
            } else {
                from
            };
            apply_correction(&mut engine.store, &mut engine.classifier, message_id, from, to)?;
            Ok(())
        })?;
        Ok(self.store.categories_of(message_id)?)
    }

    /// Same as a correction without a source category.
    pub fn assign(&mut self, message_id: &str, category_id: &str) -> Result<Vec<Neighbor>> {
        self.correct(message_id, None, category_id)
    }

    /// Records the user's spam verdict. Spam leaves every other category;
    /// "not spam" leaves the spam category and is classified again.
    pub fn mark_spam(&mut self, message_id: &str, spam: bool) -> Result<Vec<Neighbor>> {
        self.require_message(message_id)?;
        self.transaction(|engine| {
            let vector = engine.store.message(message_id).expect("checked").digest.vector.clone();
            if spam {
                engine.classifier.label_spam(message_id, &vector, true);
                engine.classifier.untrain_all(message_id, &vector);
                for n in engine.store.categories_of(message_id)? {
                    engine.store.unassign(message_id, &n.id)?;
                    if is_topic_category(&n.id) {
                        refresh_centroid(&mut engine.store, &n.id)?;
                    }
                }
                engine.store.assign(message_id, SPAM_ID, 1.0, Provenance::User)?;
            } else {
                engine.unflag_spam(message_id)?;
                let mut report = PipelineReport::default();
                engine.categorize(message_id, &mut report)?;
            }
            Ok(())
        })?;
        Ok(self.store.categories_of(message_id)?)
    }

    fn unflag_spam(&mut self, message_id: &str) -> Result<()> {
        let vector = self.store.message(message_id).expect("checked").digest.vector.clone();
        self.classifier.label_spam(message_id, &vector, false);
        if self.store.edge(message_id, SPAM_ID).is_some() {
            self.store.unassign(message_id, SPAM_ID)?;
        }
        if self.store.edge(message_id, UNSORTED_ID).is_some_and(|e| e.provenance == Provenance::Auto) {
            self.store.unassign(message_id, UNSORTED_ID)?;
        }
        let score = self.spam_score(&vector);
        if let Some(m) = self.store.message_mut(message_id) {
            m.spam_score = Some(score);
        }
        Ok(())
    }

    /// Creates a pinned user category.
    pub fn create_category(&mut self, name: &str, parent: Option<&str>) -> Result<Category> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ServiceError::Invalid("category name is empty".into()));
        }
        if let Some(p) = parent {
            self.require_category(p)?;
        }
        let now = self.clock.now();
        let (id, _) = self.transaction(|engine| {
            Ok(engine.store.create_category(name, parent, Provenance::User, true, now)?)
        })?;
        Ok(self.store.category(&id).expect("just created").clone())
    }

    /// Splits a category into auto sub-categories. An empty result means the
    /// members did not separate.
    pub fn subcluster(&mut self, category_id: &str) -> Result<Vec<Category>> {
        let parent = self.require_category(category_id)?.clone();
        if !is_topic_category(category_id) {
            return Err(ServiceError::Invalid(format!("cannot split built-in category {category_id}")));
        }
        let members: Vec<(String, Weights)> = self
            .store
            .member_ids(category_id)
            .map(|m| (m.to_string(), self.store.message(m).expect("member exists").digest.weighted.clone()))
            .collect();
        let depth = self.store.depth(category_id);
        let clusters =
            subcluster(&parent.name, depth, self.store.max_depth, &members, &self.classifier.config)?;
        if clusters.is_empty() {
            return Ok(Vec::new());
        }
        let now = self.clock.now();
        let (ids, _) = self.transaction(|engine| {
            let mut ids = Vec::new();
            for cluster in &clusters {
                let child =
                    engine.store.create_category(&cluster.name, Some(category_id), Provenance::Auto, false, now)?;
                engine.store.set_centroid(&child, cluster.centroid.clone())?;
                for m in &cluster.members {
                    let weighted = &engine.store.message(m).expect("member exists").digest.weighted;
                    let score = cosine_similarity(weighted, &cluster.centroid);
                    engine.store.assign(m, &child, score, Provenance::Auto)?;
                }
                ids.push(child);
            }
            Ok(ids)
        })?;
        Ok(ids.iter().filter_map(|id| self.store.category(id).cloned()).collect())
    }

    /// Imports new messages from an mbox file for `account_id`.
    pub fn import_mbox(&mut self, path: &Path, account_id: &str) -> Result<PipelineReport> {
        let fetched = import_mbox(path, account_id, &self.store.sync_state)?;
        self.run_pipeline(fetched.messages, fetched.new_state)
    }
}
