//! Classic mbox import. Messages are separated by lines starting with
//! `From `; body lines escaped as `>From ` are restored.

use std::path::Path;

use super::{FetchResult, Result, SyncState, TransportError};
use crate::mime::{MessageLocation, RawMessage, SourceKind};

/// Mailbox name mbox cursors are stored under.
pub const MBOX_MAILBOX: &str = "mbox";

/// Splits mbox bytes into raw messages. LF and CRLF files both work.
pub fn split_mbox(data: &[u8]) -> Vec<Vec<u8>> {
    let mut messages: Vec<Vec<u8>> = Vec::new();
    let mut current: Option<Vec<u8>> = None;
    for line in data.split_inclusive(|&b| b == b'\n') {
        if line.starts_with(b"From ") {
            if let Some(m) = current.take() {
                messages.push(finish(m));
            }
            current = Some(Vec::new());
            continue;
        }
        let body = current.get_or_insert_with(Vec::new);
        body.extend_from_slice(unescape(line));
    }
    if let Some(m) = current {
        if !(messages.is_empty() && m.iter().all(u8::is_ascii_whitespace)) {
            messages.push(finish(m));
        }
    }
    messages
}

/// `>From ` loses one `>`; deeper quoting keeps the rest.
fn unescape(line: &[u8]) -> &[u8] {
    let quotes = line.iter().take_while(|&&b| b == b'>').count();
    if quotes > 0 && line[quotes..].starts_with(b"From ") {
        &line[1..]
    } else {
        line
    }
}

/// Drops the blank line that precedes the next separator.
fn finish(mut m: Vec<u8>) -> Vec<u8> {
    if m.ends_with(b"\r\n\r\n") {
        m.truncate(m.len() - 2);
    } else if m.ends_with(b"\n\n") {
        m.truncate(m.len() - 1);
    }
    m
}

/// Reads an mbox file, returning only messages past the stored ordinal
/// cursor. uids are 0-based positions in the file.
pub fn import_mbox(path: &Path, account_id: &str, state: &SyncState) -> Result<FetchResult> {
    let data = std::fs::read(path)
        .map_err(|source| TransportError::UnreadableFile { path: path.to_path_buf(), source })?;
    let mut cursor = state.mailbox(account_id, MBOX_MAILBOX);
    let mut result = FetchResult::default();
    let all = split_mbox(&data);
    let total = all.len() as u64;
    for (ordinal, bytes) in all.into_iter().enumerate().skip(cursor.seen_ordinals as usize) {
        result.messages.push(RawMessage {
            bytes,
            location: MessageLocation {
                account_id: account_id.to_string(),
                mailbox: MBOX_MAILBOX.to_string(),
                uid: ordinal as u64,
                uidvalidity: 0,
                source_kind: SourceKind::Mbox,
            },
        });
    }
    if total > cursor.seen_ordinals {
        cursor.seen_ordinals = total;
        result.new_state.set(account_id, MBOX_MAILBOX, cursor);
    }
    Ok(result)
}
