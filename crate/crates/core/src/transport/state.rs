use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Per-mailbox sync cursor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailboxState {
    pub uidvalidity: u64,
    pub last_seen_uid: u64,
    /// POP3 only: every UIDL already delivered.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub seen_uidl: BTreeSet<String>,
    /// mbox only: number of leading messages already delivered.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub seen_ordinals: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

/// Serialized form of one cursor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncEntry {
    pub account_id: String,
    pub mailbox: String,
    #[serde(flatten)]
    pub state: MailboxState,
}

/// Sync cursors keyed by `(account_id, mailbox)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<SyncEntry>", into = "Vec<SyncEntry>")]
pub struct SyncState {
    mailboxes: BTreeMap<(String, String), MailboxState>,
}

impl SyncState {
    pub fn get(&self, account_id: &str, mailbox: &str) -> Option<&MailboxState> {
        self.mailboxes.get(&(account_id.to_string(), mailbox.to_string()))
    }

    pub fn mailbox(&self, account_id: &str, mailbox: &str) -> MailboxState {
        self.get(account_id, mailbox).cloned().unwrap_or_default()
    }

    pub fn set(&mut self, account_id: &str, mailbox: &str, state: MailboxState) {
        self.mailboxes.insert((account_id.to_string(), mailbox.to_string()), state);
    }

    /// Overlays every entry of `fragment` onto `self`.
    pub fn merge(&mut self, fragment: SyncState) {
        self.mailboxes.extend(fragment.mailboxes);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &MailboxState)> {
        self.mailboxes.iter().map(|((a, m), s)| (a.as_str(), m.as_str(), s))
    }

    pub fn is_empty(&self) -> bool {
        self.mailboxes.is_empty()
    }
}

impl From<Vec<SyncEntry>> for SyncState {
    fn from(entries: Vec<SyncEntry>) -> Self {
        SyncState {
            mailboxes: entries.into_iter().map(|e| ((e.account_id, e.mailbox), e.state)).collect(),
        }
    }
}

impl From<SyncState> for Vec<SyncEntry> {
    fn from(s: SyncState) -> Self {
        s.mailboxes
            .into_iter()
            .map(|((account_id, mailbox), state)| SyncEntry { account_id, mailbox, state })
            .collect()
    }
}
