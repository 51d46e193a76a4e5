//! JSON-ready read views over a store snapshot.

use chrono::{DateTime, Utc};
use serde::Serialize;

use super::{Result, ServiceError};
use crate::mime::{Attachment, MessageLocation};
use crate::store::{Category, GraphStore, Neighbor, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryNode {
    pub category_id: String,
    pub name: String,
    pub parent: Option<String>,
    pub pinned: bool,
    pub provenance: Provenance,
    pub member_count: usize,
    pub children: Vec<CategoryNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageSummary {
    pub message_id: String,
    pub subject: String,
    pub from: String,
    pub date: Option<DateTime<Utc>>,
    pub score: f64,
    pub provenance: Provenance,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MembershipView {
    pub category_id: String,
    pub name: String,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageDetail {
    pub message_id: String,
    pub subject: String,
    pub from: String,
    pub to: Vec<String>,
    pub cc: Vec<String>,
    pub date: Option<DateTime<Utc>>,
    pub attachments: Vec<Attachment>,
    pub keywords: Vec<String>,
    pub summary: String,
    pub memberships: Vec<MembershipView>,
    pub spam_score: Option<f64>,
    pub location: MessageLocation,
}

fn node(store: &GraphStore, c: &Category) -> CategoryNode {
    CategoryNode {
        category_id: c.category_id.clone(),
        name: c.name.clone(),
        parent: c.parent.clone(),
        pinned: c.pinned,
        provenance: c.provenance,
        member_count: store.member_count(&c.category_id),
        children: store.children(&c.category_id).map(|child| node(store, child)).collect(),
    }
}

/// Root categories with their descendants, ordered by id.
pub fn category_tree(store: &GraphStore) -> Vec<CategoryNode> {
    store.categories().filter(|c| c.parent.is_none()).map(|c| node(store, c)).collect()
}

pub fn category_messages(store: &GraphStore, category_id: &str) -> Result<Vec<MessageSummary>> {
    let members = store
        .messages_of(category_id)
        .map_err(|_| ServiceError::NotFound(format!("unknown category: {category_id}")))?;
    Ok(members
        .into_iter()
        .filter_map(|Neighbor { id, score, provenance }| {
            let m = store.message(&id)?;
            Some(MessageSummary {
                subject: m.headers.subject.clone(),
                from: m.headers.from.clone(),
                date: m.headers.date,
                keywords: m.digest.keywords.clone(),
                message_id: id,
                score,
                provenance,
            })
        })
        .collect())
}

pub fn memberships(store: &GraphStore, neighbors: Vec<Neighbor>) -> Vec<MembershipView> {
    neighbors
        .into_iter()
        .map(|n| MembershipView {
            name: store.category(&n.id).map(|c| c.name.clone()).unwrap_or_default(),
            category_id: n.id,
            score: n.score,
            provenance: n.provenance,
        })
        .collect()
}

pub fn message_detail(store: &GraphStore, message_id: &str) -> Result<MessageDetail> {
    let m = store.message(message_id).ok_or_else(|| ServiceError::NotFound(format!("unknown message: {message_id}")))?;
    let neighbors = store.categories_of(message_id)?;
    Ok(MessageDetail {
        message_id: message_id.to_string(),
        subject: m.headers.subject.clone(),
        from: m.headers.from.clone(),
        to: m.headers.to.clone(),
        cc: m.headers.cc.clone(),
        date: m.headers.date,
        attachments: m.headers.attachments.clone(),
        keywords: m.digest.keywords.clone(),
        summary: m.digest.summary.clone(),
        memberships: memberships(store, neighbors),
        spam_score: m.spam_score,
        location: m.location.clone(),
    })
}
