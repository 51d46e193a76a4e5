//! The bipartite message/category graph and its on-disk form.
//!
//! Messages and categories are the two node sets; every edge joins one of
//! each. Categories additionally carry parent links forming a forest of
//! bounded depth. Invariants that mutations may temporarily break (edgeless
//! messages, empty auto categories) are repaired by [`GraphStore::commit_batch`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::mime::{Attachment, MessageLocation};
use crate::text::{CorpusStats, MessageDigest, Weights};
use crate::transport::SyncState;

pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_MAX_DEPTH: usize = 3;
pub const UNSORTED_ID: &str = "unsorted";
pub const SPAM_ID: &str = "spam";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("depth exceeded")]
    DepthExceeded,
    #[error("unknown message: {0}")]
    UnknownMessage(String),
    #[error("unknown category: {0}")]
    UnknownCategory(String),
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("no such edge")]
    NoSuchEdge,
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Auto,
    User,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Auto => "auto",
            Provenance::User => "user",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub category_id: String,
    pub name: String,
    pub provenance: Provenance,
    pub parent: Option<String>,
    pub pinned: bool,
    /// Unit-length mean of the members' weighted vectors, or empty.
    pub centroid: Weights,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub message_id: String,
    pub category_id: String,
    pub score: f64,
    pub provenance: Provenance,
}

/// Header fields kept for display; bodies stay on the server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageHeaders {
    pub from: String,
    pub to: Vec<String>,
    pub cc: Vec<String>,
    pub subject: String,
    pub date: Option<DateTime<Utc>>,
    pub attachments: Vec<Attachment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub digest: MessageDigest,
    pub location: MessageLocation,
    pub headers: MessageHeaders,
    /// Hash-derived id of the raw bytes, used when Message-IDs collide.
    pub content_id: String,
    pub spam_score: Option<f64>,
}

impl MessageRecord {
    pub fn id(&self) -> &str {
        &self.digest.message_id
    }
}

/// One side of an edge as seen from the other endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RepairAction {
    AssignedToUnsorted { message_id: String },
    DeletedCategory { category_id: String, reparented: Vec<String> },
    RenamedCategory { category_id: String, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Edge {
    score: f64,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphStore {
    pub max_depth: usize,
    revision: u64,
    next_category_seq: u64,
    categories: BTreeMap<String, Category>,
    messages: BTreeMap<String, MessageRecord>,
    /// message -> category -> edge
    edges: BTreeMap<String, BTreeMap<String, Edge>>,
    /// category -> messages; mirror of `edges`.
    members: BTreeMap<String, BTreeSet<String>>,
    pub corpus_stats: CorpusStats,
    pub sync_state: SyncState,
    /// Opaque classifier state, owned by the classifier module.
    pub classifier: Value,
    extra: Map<String, Value>,
}

impl GraphStore {
    /// A store holding only the pinned `unsorted` and `spam` categories.
    pub fn new(max_depth: usize, now: DateTime<Utc>) -> Self {
        let mut store = GraphStore {
            max_depth,
            revision: 0,
            next_category_seq: 1,
            categories: BTreeMap::new(),
            messages: BTreeMap::new(),
            edges: BTreeMap::new(),
            members: BTreeMap::new(),
            corpus_stats: CorpusStats::default(),
            sync_state: SyncState::default(),
            classifier: Value::Null,
            extra: Map::new(),
        };
        for (id, name) in [(UNSORTED_ID, "unsorted"), (SPAM_ID, "spam")] {
            store.insert_category(Category {
                category_id: id.to_string(),
                name: name.to_string(),
                provenance: Provenance::User,
                parent: None,
                pinned: true,
                centroid: Weights::new(),
                created_at: now,
            });
        }
        store
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn message(&self, id: &str) -> Option<&MessageRecord> {
        self.messages.get(id)
    }

    pub fn messages(&self) -> impl Iterator<Item = &MessageRecord> {
        self.messages.values()
    }

    pub fn message_count(&self) -> usize {
        self.messages.len()
    }

    pub fn category(&self, id: &str) -> Option<&Category> {
        self.categories.get(id)
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> {
        self.categories.values()
    }

    pub fn children(&self, id: &str) -> impl Iterator<Item = &Category> + '_ {
        let id = id.to_string();
        self.categories.values().filter(move |c| c.parent.as_deref() == Some(id.as_str()))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeMap::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = Membership> + '_ {
        self.edges.iter().flat_map(|(m, cats)| {
            cats.iter().map(move |(c, e)| Membership {
                message_id: m.clone(),
                category_id: c.clone(),
                score: e.score,
                provenance: e.provenance,
            })
        })
    }

    pub fn member_count(&self, category_id: &str) -> usize {
        self.members.get(category_id).map_or(0, BTreeSet::len)
    }

    pub fn member_ids(&self, category_id: &str) -> impl Iterator<Item = &str> {
        self.members.get(category_id).into_iter().flatten().map(String::as_str)
    }

    pub fn degree(&self, message_id: &str) -> usize {
        self.edges.get(message_id).map_or(0, BTreeMap::len)
    }

    pub fn edge(&self, message_id: &str, category_id: &str) -> Option<Membership> {
        self.edges.get(message_id)?.get(category_id).map(|e| Membership {
            message_id: message_id.to_string(),
            category_id: category_id.to_string(),
            score: e.score,
            provenance: e.provenance,
        })
    }

    /// Depth of a category, roots being depth 1.
    pub fn depth(&self, category_id: &str) -> usize {
        let mut depth = 0;
        let mut cursor = self.categories.get(category_id);
        while let Some(c) = cursor {
            depth += 1;
            if depth > self.categories.len() {
                break;
            }
            cursor = c.parent.as_ref().and_then(|p| self.categories.get(p));
        }
        depth
    }

    /// Stores a message and returns the id it is stored under.
    ///
    /// A Message-ID already present from the same account refers to the same
    /// message: the location is refreshed and nothing else changes. The same
    /// Message-ID arriving from another account is stored under the record's
    /// `content_id` instead.
    pub fn add_message(&mut self, mut record: MessageRecord) -> String {
        let id = record.id().to_string();
        if let Some(existing) = self.messages.get_mut(&id) {
            if existing.location.account_id == record.location.account_id {
                existing.location = record.location;
                return id;
            }
            if existing.content_id == record.content_id {
                return id;
            }
            let alt = record.content_id.clone();
            if let Some(existing) = self.messages.get_mut(&alt) {
                if existing.location.account_id == record.location.account_id {
                    existing.location = record.location;
                }
                return alt;
            }
            record.digest.message_id = alt.clone();
            self.messages.insert(alt.clone(), record);
            return alt;
        }
        self.messages.insert(id.clone(), record);
        id
    }

    /// Id under which `record` would be stored, without storing it.
    pub fn resolve_message_id(&self, record: &MessageRecord) -> String {
        let id = record.id();
        match self.messages.get(id) {
            None => id.to_string(),
            Some(existing)
                if existing.location.account_id == record.location.account_id
                    || existing.content_id == record.content_id =>
            {
                id.to_string()
            }
            Some(_) => record.content_id.clone(),
        }
    }

    pub fn message_mut(&mut self, id: &str) -> Option<&mut MessageRecord> {
        self.messages.get_mut(id)
    }

    pub fn create_category(
        &mut self,
        name: &str,
        parent: Option<&str>,
        provenance: Provenance,
        pinned: bool,
        created_at: DateTime<Utc>,
    ) -> Result<String> {
        if let Some(p) = parent {
            if !self.categories.contains_key(p) {
                return Err(StoreError::UnknownCategory(p.to_string()));
            }
            if self.depth(p) >= self.max_depth {
                return Err(StoreError::DepthExceeded);
            }
        }
        let id = format!("c{}", self.next_category_seq);
        self.next_category_seq += 1;
        let name = self.unique_sibling_name(parent, name, None);
        self.insert_category(Category {
            category_id: id.clone(),
            name,
            provenance,
            parent: parent.map(str::to_string),
            pinned,
            centroid: Weights::new(),
            created_at,
        });
        Ok(id)
    }

    /// `name`, or `name-2`, `name-3`, ... if a sibling already uses it.
    pub fn unique_sibling_name(&self, parent: Option<&str>, name: &str, exclude: Option<&str>) -> String {
        let taken: BTreeSet<&str> = self
            .categories
            .values()
            .filter(|c| c.parent.as_deref() == parent && Some(c.category_id.as_str()) != exclude)
            .map(|c| c.name.as_str())
            .collect();
        if !taken.contains(name) {
            return name.to_string();
        }
        (2..)
            .map(|n| format!("{name}-{n}"))
            .find(|candidate| !taken.contains(candidate.as_str()))
            .expect("unbounded suffix search")
    }

    fn insert_category(&mut self, category: Category) {
        self.members.entry(category.category_id.clone()).or_default();
        self.categories.insert(category.category_id.clone(), category);
    }

    pub fn set_centroid(&mut self, category_id: &str, centroid: Weights) -> Result<()> {
        let c = self
            .categories
            .get_mut(category_id)
            .ok_or_else(|| StoreError::UnknownCategory(category_id.to_string()))?;
        c.centroid = centroid;
        Ok(())
    }

    /// Adds or overwrites an edge. A user edge is never replaced by an auto one.
    pub fn assign(&mut self, message_id: &str, category_id: &str, score: f64, provenance: Provenance) -> Result<()> {
        if !self.messages.contains_key(message_id) {
            return Err(StoreError::UnknownMessage(message_id.to_string()));
        }
        if !self.categories.contains_key(category_id) {
            return Err(StoreError::UnknownCategory(category_id.to_string()));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(StoreError::InvalidScore(score));
        }
        let slot = self.edges.entry(message_id.to_string()).or_default();
        if let Some(existing) = slot.get(category_id) {
            if existing.provenance == Provenance::User && provenance == Provenance::Auto {
                return Ok(());
            }
        }
        slot.insert(category_id.to_string(), Edge { score, provenance });
        self.members.entry(category_id.to_string()).or_default().insert(message_id.to_string());
        Ok(())
    }

    pub fn unassign(&mut self, message_id: &str, category_id: &str) -> Result<()> {
        let removed = self.edges.get_mut(message_id).and_then(|cats| cats.remove(category_id));
        if removed.is_none() {
            return Err(StoreError::NoSuchEdge);
        }
        if self.edges.get(message_id).is_some_and(BTreeMap::is_empty) {
            self.edges.remove(message_id);
        }
        if let Some(m) = self.members.get_mut(category_id) {
            m.remove(message_id);
        }
        Ok(())
    }

    /// Categories of a message, by descending score then id.
    pub fn categories_of(&self, message_id: &str) -> Result<Vec<Neighbor>> {
        if !self.messages.contains_key(message_id) {
            return Err(StoreError::UnknownMessage(message_id.to_string()));
        }
        let mut out: Vec<Neighbor> = self
            .edges
            .get(message_id)
            .into_iter()
            .flatten()
            .map(|(c, e)| Neighbor { id: c.clone(), score: e.score, provenance: e.provenance })
            .collect();
        sort_neighbors(&mut out);
        Ok(out)
    }

    /// Members of a category, by descending score then id.
    pub fn messages_of(&self, category_id: &str) -> Result<Vec<Neighbor>> {
        if !self.categories.contains_key(category_id) {
            return Err(StoreError::UnknownCategory(category_id.to_string()));
        }
        let mut out: Vec<Neighbor> = self
            .member_ids(category_id)
            .map(|m| {
                let e = self.edges[m][category_id];
                Neighbor { id: m.to_string(), score: e.score, provenance: e.provenance }
            })
            .collect();
        sort_neighbors(&mut out);
        Ok(out)
    }

    /// Counterparts of either a message id or a category id.
    pub fn neighbors(&self, id: &str) -> Result<Vec<Neighbor>> {
        if self.messages.contains_key(id) {
            self.categories_of(id)
        } else if self.categories.contains_key(id) {
            self.messages_of(id)
        } else {
            Err(StoreError::UnknownId(id.to_string()))
        }
    }

    /// Restores the post-commit invariants and bumps the revision.
    ///
    /// 1. Edgeless messages get an auto edge (score 0) to `unsorted`.
    /// 2. Empty unpinned categories are deleted; their children move up to
    ///    the deleted category's parent.
    pub fn commit_batch(&mut self) -> Vec<RepairAction> {
        let mut actions = Vec::new();

        let edgeless: Vec<String> =
            self.messages.keys().filter(|m| self.degree(m) == 0).cloned().collect();
        for message_id in edgeless {
            self.assign(&message_id, UNSORTED_ID, 0.0, Provenance::Auto)
                .expect("unsorted category always exists");
            actions.push(RepairAction::AssignedToUnsorted { message_id });
        }

        loop {
            let victim = self
                .categories
                .values()
                .find(|c| !c.pinned && self.member_count(&c.category_id) == 0)
                .map(|c| c.category_id.clone());
            let Some(victim) = victim else { break };
            let removed = self.categories.remove(&victim).expect("victim exists");
            self.members.remove(&victim);
            let children: Vec<String> = self
                .categories
                .values()
                .filter(|c| c.parent.as_deref() == Some(victim.as_str()))
                .map(|c| c.category_id.clone())
                .collect();
            for child in &children {
                let name = self.categories[child].name.clone();
                let fresh = self.unique_sibling_name(removed.parent.as_deref(), &name, Some(child));
                let c = self.categories.get_mut(child).expect("child exists");
                c.parent = removed.parent.clone();
                if fresh != name {
                    c.name = fresh.clone();
                    actions.push(RepairAction::RenamedCategory { category_id: child.clone(), name: fresh });
                }
            }
            actions.push(RepairAction::DeletedCategory { category_id: victim, reparented: children });
        }

        self.revision += 1;
        actions
    }

    /// Checks every structural invariant, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let corrupt = |what: &str| Err(StoreError::Corrupt(what.to_string()));

        for id in [UNSORTED_ID, SPAM_ID] {
            match self.categories.get(id) {
                Some(c) if c.pinned => {}
                _ => return corrupt("missing built-in category"),
            }
        }
        for c in self.categories.values() {
            if let Some(p) = &c.parent {
                if !self.categories.contains_key(p) {
                    return corrupt("dangling parent");
                }
            }
        }
        for c in self.categories.values() {
            let mut seen = BTreeSet::new();
            let mut cursor = Some(c);
            while let Some(node) = cursor {
                if !seen.insert(node.category_id.as_str()) {
                    return corrupt("category cycle");
                }
                cursor = node.parent.as_ref().and_then(|p| self.categories.get(p));
            }
            if seen.len() > self.max_depth {
                return corrupt("depth exceeded");
            }
        }
        let mut names = BTreeSet::new();
        for c in self.categories.values() {
            if !names.insert((c.parent.as_deref(), c.name.as_str())) {
                return corrupt("duplicate sibling name");
            }
            if c.centroid.values().any(|w| !w.is_finite() || *w < 0.0) {
                return corrupt("invalid centroid");
            }
            let n = crate::text::norm(&c.centroid);
            if !c.centroid.is_empty() && (n - 1.0).abs() > 1e-6 {
                return corrupt("centroid not normalized");
            }
        }
        for (id, m) in &self.messages {
            if m.id() != id {
                return corrupt("message id mismatch");
            }
            if m.digest.vector.counts.values().any(|&c| c == 0) {
                return corrupt("invalid term vector");
            }
            if m.digest.weighted.values().any(|w| !w.is_finite() || *w < 0.0) {
                return corrupt("invalid weights");
            }
        }
        for (m, cats) in &self.edges {
            for (c, e) in cats {
                if !self.messages.contains_key(m) || !self.categories.contains_key(c) {
                    return corrupt("dangling edge");
                }
                if !(0.0..=1.0).contains(&e.score) {
                    return corrupt("edge score out of range");
                }
            }
        }
        if let Err(e) = self.corpus_stats.validate() {
            return Err(StoreError::Corrupt(format!("corpus stats: {e}")));
        }
        Ok(())
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        self.persist_with_hook(path, |_| Ok(()))
    }

    /// Writes the store atomically: a temp file in the same directory is
    /// written and synced, `before_rename` runs, then the temp file replaces
    /// `path`. If anything fails the previous file is left untouched.
    pub fn persist_with_hook<F>(&self, path: &Path, before_rename: F) -> Result<()>
    where
        F: FnOnce(&Path) -> io::Result<()>,
    {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let json = serde_json::to_vec_pretty(&self.to_document()).map_err(io::Error::from)?;
        let mut tmp = tempfile::Builder::new().prefix(".store-").suffix(".tmp").tempfile_in(dir)?;
        tmp.write_all(&json)?;
        tmp.as_file().sync_all()?;
        before_rename(tmp.path())?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json(&bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: Value =
            serde_json::from_slice(bytes).map_err(|e| StoreError::Corrupt(format!("invalid JSON: {e}")))?;
        match value.get("version").and_then(Value::as_u64) {
            Some(v) if v == STORE_VERSION as u64 => {}
            Some(v) => return Err(StoreError::UnsupportedVersion(v)),
            None => return Err(StoreError::Corrupt("missing version".into())),
        }
        let doc: StoreDocument =
            serde_json::from_value(value).map_err(|e| StoreError::Corrupt(format!("schema: {e}")))?;
        Self::from_document(doc)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self.to_document()).expect("store serializes")
    }

    fn to_document(&self) -> StoreDocument {
        StoreDocument {
            version: STORE_VERSION,
            revision: self.revision,
            max_depth: self.max_depth,
            next_category_seq: self.next_category_seq,
            corpus_stats: self.corpus_stats.clone(),
            categories: self.categories.values().cloned().collect(),
            messages: self.messages.values().cloned().collect(),
            edges: self.edges().collect(),
            classifier: self.classifier.clone(),
            sync_state: self.sync_state.clone(),
            extra: self.extra.clone(),
        }
    }

    fn from_document(doc: StoreDocument) -> Result<Self> {
        let corrupt = |what: &str| Err(StoreError::Corrupt(what.to_string()));
        let mut store = GraphStore {
            max_depth: doc.max_depth,
            revision: doc.revision,
            next_category_seq: doc.next_category_seq,
            categories: BTreeMap::new(),
            messages: BTreeMap::new(),
            edges: BTreeMap::new(),
            members: BTreeMap::new(),
            corpus_stats: doc.corpus_stats,
            sync_state: doc.sync_state,
            classifier: doc.classifier,
            extra: doc.extra,
        };
        for c in doc.categories {
            if store.categories.contains_key(&c.category_id) {
                return corrupt("duplicate category id");
            }
            store.insert_category(c);
        }
        for m in doc.messages {
            if store.messages.insert(m.id().to_string(), m).is_some() {
                return corrupt("duplicate message id");
            }
        }
        for e in doc.edges {
            if !store.messages.contains_key(&e.message_id) || !store.categories.contains_key(&e.category_id) {
                return corrupt("dangling edge");
            }
            if store.edge(&e.message_id, &e.category_id).is_some() {
                return corrupt("duplicate edge");
            }
            if !(0.0..=1.0).contains(&e.score) {
                return corrupt("edge score out of range");
            }
            store.assign(&e.message_id, &e.category_id, e.score, e.provenance)?;
        }
        store.validate()?;
        Ok(store)
    }
}

fn sort_neighbors(v: &mut [Neighbor]) {
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreDocument {
    version: u32,
    revision: u64,
    max_depth: usize,
    next_category_seq: u64,
    corpus_stats: CorpusStats,
    categories: Vec<Category>,
    messages: Vec<MessageRecord>,
    edges: Vec<Membership>,
    #[serde(default)]
    classifier: Value,
    #[serde(default)]
    sync_state: SyncState,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mime::SourceKind;
    use crate::text::TermVector;
    use chrono::TimeZone;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
    }

    fn record(id: &str, account: &str, uid: u64) -> MessageRecord {
        MessageRecord {
            digest: MessageDigest {
                message_id: id.to_string(),
                keywords: vec!["grid".into()],
                summary: "Grid.".into(),
                vector: [("grid", 1u64)].into_iter().collect::<TermVector>(),
                weighted: [("grid".to_string(), 1.0)].into_iter().collect(),
            },
            location: MessageLocation {
                account_id: account.to_string(),
                mailbox: "INBOX".into(),
                uid,
                uidvalidity: 1,
                source_kind: SourceKind::Imap,
            },
            headers: MessageHeaders::default(),
            content_id: format!("synth-{account}-{uid}"),
            spam_score: None,
        }
    }

    fn store() -> GraphStore {
        GraphStore::new(DEFAULT_MAX_DEPTH, now())
    }

    #[test]
    fn add_message_is_idempotent() {
        let mut s = store();
        assert_eq!(s.add_message(record("m1", "a", 1)), "m1");
        let edges = s.edge_count();
        assert_eq!(s.add_message(record("m1", "a", 1)), "m1");
        assert_eq!(s.message_count(), 1);
        assert_eq!(s.edge_count(), edges);
    }

    #[test]
    fn same_account_refreshes_location() {
        let mut s = store();
        s.add_message(record("m1", "a", 1));
        let mut again = record("m1", "a", 9);
        again.location.uidvalidity = 8;
        assert_eq!(s.add_message(again), "m1");
        assert_eq!(s.message("m1").unwrap().location.uid, 9);
        assert_eq!(s.message("m1").unwrap().location.uidvalidity, 8);
    }

    #[test]
    fn message_id_collision_across_accounts() {
        let mut s = store();
        s.add_message(record("m1", "a", 1));
        let other = record("m1", "b", 1);
        assert_eq!(s.resolve_message_id(&other), "synth-b-1");
        assert_eq!(s.add_message(other), "synth-b-1");
        assert_eq!(s.message_count(), 2);
        assert_eq!(s.message("synth-b-1").unwrap().location.account_id, "b");
        // Delivering the colliding message again is still a no-op.
        assert_eq!(s.add_message(record("m1", "b", 1)), "synth-b-1");
        assert_eq!(s.message_count(), 2);
    }

    #[test]
    fn create_category_depth_rules() {
        let mut s = store();
        let work = s.create_category("Work", None, Provenance::User, true, now()).unwrap();
        let meetings = s.create_category("Meetings", Some(&work), Provenance::Auto, false, now()).unwrap();
        assert_eq!(s.depth(&meetings), 2);
        let weekly = s.create_category("Weekly", Some(&meetings), Provenance::Auto, false, now()).unwrap();
        assert_eq!(s.depth(&weekly), 3);
        assert!(matches!(
            s.create_category("Too deep", Some(&weekly), Provenance::Auto, false, now()),
            Err(StoreError::DepthExceeded)
        ));
        assert!(matches!(
            s.create_category("x", Some("nope"), Provenance::Auto, false, now()),
            Err(StoreError::UnknownCategory(_))
        ));
    }

    #[test]
    fn duplicate_sibling_names_get_suffix() {
        let mut s = store();
        let a = s.create_category("Work", None, Provenance::User, true, now()).unwrap();
        let b = s.create_category("Work", None, Provenance::User, true, now()).unwrap();
        let c = s.create_category("Work", None, Provenance::User, true, now()).unwrap();
        assert_eq!(s.category(&a).unwrap().name, "Work");
        assert_eq!(s.category(&b).unwrap().name, "Work-2");
        assert_eq!(s.category(&c).unwrap().name, "Work-3");
        // Same name under a different parent is fine.
        let d = s.create_category("Work", Some(&a), Provenance::User, true, now()).unwrap();
        assert_eq!(s.category(&d).unwrap().name, "Work");
    }

    #[test]
    fn assign_overwrite_and_no_downgrade() {
        let mut s = store();
        s.add_message(record("m1", "a", 1));
        let c1 = s.create_category("c", None, Provenance::Auto, false, now()).unwrap();
        s.assign("m1", &c1, 0.9, Provenance::Auto).unwrap();
        assert_eq!(
            s.categories_of("m1").unwrap(),
            vec![Neighbor { id: c1.clone(), score: 0.9, provenance: Provenance::Auto }]
        );
        s.assign("m1", &c1, 1.0, Provenance::User).unwrap();
        s.assign("m1", &c1, 0.5, Provenance::Auto).unwrap();
        assert_eq!(s.edge_count(), 1);
        assert_eq!(
            s.categories_of("m1").unwrap(),
            vec![Neighbor { id: c1.clone(), score: 1.0, provenance: Provenance::User }]
        );
        assert!(matches!(s.assign("zz", &c1, 0.5, Provenance::Auto), Err(StoreError::UnknownMessage(_))));
        assert!(matches!(s.assign("m1", "zz", 0.5, Provenance::Auto), Err(StoreError::UnknownCategory(_))));
        assert!(matches!(s.assign("m1", &c1, 1.5, Provenance::Auto), Err(StoreError::InvalidScore(_))));
    }

    #[test]
    fn unassign_and_repair() {
        let mut s = store();
        s.add_message(record("m1", "a", 1));
        let c1 = s.create_category("c", None, Provenance::User, true, now()).unwrap();
        s.assign("m1", &c1, 0.9, Provenance::Auto).unwrap();
        s.unassign("m1", &c1).unwrap();
        assert_eq!(s.degree("m1"), 0);
        assert!(matches!(s.unassign("m1", &c1), Err(StoreError::NoSuchEdge)));
        let actions = s.commit_batch();
        assert_eq!(actions, vec![RepairAction::AssignedToUnsorted { message_id: "m1".into() }]);
        assert_eq!(s.edge("m1", UNSORTED_ID).unwrap().score, 0.0);
    }

    #[test]
    fn neighbors_both_directions() {
        let mut s = store();
        s.add_message(record("m1", "a", 1));
        s.add_message(record("m2", "a", 2));
        let c1 = s.create_category("c", None, Provenance::Auto, false, now()).unwrap();
        s.assign("m1", &c1, 0.9, Provenance::Auto).unwrap();
        s.assign("m2", &c1, 0.95, Provenance::Auto).unwrap();
        assert_eq!(s.neighbors("m1").unwrap(), vec![Neighbor { id: c1.clone(), score: 0.9, provenance: Provenance::Auto }]);
        let ids: Vec<_> = s.neighbors(&c1).unwrap().into_iter().map(|n| n.id).collect();
        assert_eq!(ids, vec!["m2", "m1"]);
        assert!(matches!(s.neighbors("ghost"), Err(StoreError::UnknownId(_))));
    }

    #[test]
    fn commit_prunes_empty_auto_categories() {
        let mut s = store();
        let r0 = s.revision();
        let c = s.create_category("empty", None, Provenance::Auto, false, now()).unwrap();
        let actions = s.commit_batch();
        assert_eq!(actions, vec![RepairAction::DeletedCategory { category_id: c.clone(), reparented: vec![] }]);
        assert!(s.category(&c).is_none());
        assert!(s.revision() > r0);

        // fully valid store: no repairs, revision still moves
        let r1 = s.revision();
        assert!(s.commit_batch().is_empty());
        assert_eq!(s.revision(), r1 + 1);
    }

    #[test]
    fn commit_reparents_children_and_renames_on_clash() {
        let mut s = store();
        s.add_message(record("m1", "a", 1));
        s.add_message(record("m2", "a", 2));
        let top = s.create_category("top", None, Provenance::User, true, now()).unwrap();
        let mid = s.create_category("mid", Some(&top), Provenance::Auto, false, now()).unwrap();
        let leaf = s.create_category("same", Some(&mid), Provenance::Auto, false, now()).unwrap();
        let sibling = s.create_category("same", Some(&top), Provenance::Auto, false, now()).unwrap();
        s.assign("m1", &leaf, 1.0, Provenance::Auto).unwrap();
        s.assign("m2", &sibling, 1.0, Provenance::Auto).unwrap();
        let actions = s.commit_batch();
        assert!(s.category(&mid).is_none());
        assert_eq!(s.category(&leaf).unwrap().parent.as_deref(), Some(top.as_str()));
        assert_eq!(s.category(&leaf).unwrap().name, "same-2");
        assert!(actions.contains(&RepairAction::DeletedCategory { category_id: mid, reparented: vec![leaf] }));
        s.validate().unwrap();
    }

    #[test]
    fn persist_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let mut s = store();
        s.add_message(record("m1", "a", 1));
        let c = s.create_category("Work", None, Provenance::User, true, now()).unwrap();
        s.assign("m1", &c, 1.0, Provenance::User).unwrap();
        s.set_centroid(&c, [("grid".to_string(), 1.0)].into_iter().collect()).unwrap();
        s.commit_batch();
        s.persist(&path).unwrap();
        assert_eq!(GraphStore::load(&path).unwrap(), s);

        let mut doc: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        doc["x_custom"] = serde_json::json!({"keep": true});
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        let loaded = GraphStore::load(&path).unwrap();
        loaded.persist(&path).unwrap();
        let doc: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(doc["x_custom"], serde_json::json!({"keep": true}));
    }

    #[test]
    fn empty_store_document() {
        let s = store();
        let doc = s.to_json();
        assert_eq!(doc["version"], 1);
        assert_eq!(doc["messages"], serde_json::json!([]));
        assert_eq!(doc["edges"], serde_json::json!([]));
        assert_eq!(GraphStore::from_json(doc.to_string().as_bytes()).unwrap(), s);
    }

    #[test]
    fn interrupted_persist_keeps_old_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let old = store();
        old.persist(&path).unwrap();
        let before = std::fs::read(&path).unwrap();

        let mut new = old.clone();
        new.add_message(record("m1", "a", 1));
        new.commit_batch();
        let err = new
            .persist_with_hook(&path, |_| Err(io::Error::new(io::ErrorKind::Interrupted, "killed")))
            .unwrap_err();
        assert!(matches!(err, StoreError::Io(_)));
        assert_eq!(std::fs::read(&path).unwrap(), before);
        assert_eq!(GraphStore::load(&path).unwrap(), old);
        // no temp files left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn load_rejects_bad_documents() {
        let mut doc = store().to_json();
        doc["edges"] = serde_json::json!([{"message_id": "m1", "category_id": "nope", "score": 1.0, "provenance": "auto"}]);
        let err = GraphStore::from_json(doc.to_string().as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "corrupt store: dangling edge");

        let mut doc = store().to_json();
        doc["version"] = serde_json::json!(99);
        let err = GraphStore::from_json(doc.to_string().as_bytes()).unwrap_err();
        assert!(matches!(err, StoreError::UnsupportedVersion(99)));
        assert_eq!(err.to_string(), "unsupported version 99");

        let mut doc = store().to_json();
        doc["categories"].as_array_mut().unwrap().push(serde_json::json!({
            "category_id": "c9", "name": "loop", "provenance": "auto", "parent": "c9",
            "pinned": true, "centroid": {}, "created_at": "2024-05-01T12:00:00Z"
        }));
        let err = GraphStore::from_json(doc.to_string().as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "corrupt store: category cycle");

        assert!(matches!(GraphStore::from_json(b"{not json"), Err(StoreError::Corrupt(_))));
    }
}
