//! Read-only POP3 client. Messages are identified by UIDL and are never
//! deleted from the server.

use log::{debug, warn};
use sha2::{Digest, Sha256};

use super::{AccountConfig, Connection, FetchResult, Result, SyncState, TransportError};
use crate::mime::{MessageLocation, RawMessage, SourceKind};

/// Mailbox name POP3 cursors are stored under.
pub const POP3_MAILBOX: &str = "INBOX";

/// Stable numeric id for a UIDL string: the first 8 bytes of its SHA-256,
/// masked to 53 bits so it survives a round trip through JSON numbers.
pub fn uidl_hash(uidl: &str) -> u64 {
    let digest = Sha256::digest(uidl.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(bytes) & ((1u64 << 53) - 1)
}

pub(crate) struct Session {
    conn: Connection,
}

impl Session {
    pub(crate) fn new(mut conn: Connection) -> Result<Session> {
        let greeting = conn.read_line()?;
        if !greeting.starts_with(b"+OK") {
            return Err(TransportError::Protocol(format!(
                "unexpected greeting: {}",
                String::from_utf8_lossy(&greeting)
            )));
        }
        Ok(Session { conn })
    }

    /// Sends a command; returns whether the server answered `+OK`.
    fn command(&mut self, command: &str) -> Result<bool> {
        if command.starts_with("PASS ") {
            debug!("pop3 > PASS ***");
        } else {
            debug!("pop3 > {command}");
        }
        self.conn.send_line(command)?;
        let status = self.conn.read_line()?;
        if status.starts_with(b"+OK") {
            Ok(true)
        } else if status.starts_with(b"-ERR") {
            Ok(false)
        } else {
            Err(TransportError::Protocol(format!("bad status line: {}", String::from_utf8_lossy(&status))))
        }
    }

    /// Reads a dot-terminated multi-line body, undoing byte stuffing.
    fn multiline(&mut self) -> Result<Vec<Vec<u8>>> {
        let mut lines = Vec::new();
        loop {
            let line = self.conn.read_line()?;
            if line == b"." {
                return Ok(lines);
            }
            lines.push(match line.strip_prefix(b".") {
                Some(rest) => rest.to_vec(),
                None => line,
            });
        }
    }

    pub(crate) fn login(&mut self, user: &str, password: &str) -> Result<()> {
        if self.command(&format!("USER {user}"))? && self.command(&format!("PASS {password}"))? {
            Ok(())
        } else {
            Err(TransportError::AuthFailed)
        }
    }

    /// `(message number, uidl)` pairs in server order.
    pub(crate) fn uidl(&mut self) -> Result<Vec<(u64, String)>> {
        if !self.command("UIDL")? {
            return Err(TransportError::UidlUnsupported);
        }
        self.multiline()?
            .iter()
            .map(|line| {
                let text = String::from_utf8_lossy(line);
                let mut parts = text.split_whitespace();
                match (parts.next().and_then(|n| n.parse().ok()), parts.next()) {
                    (Some(n), Some(id)) => Ok((n, id.to_string())),
                    _ => Err(TransportError::Protocol(format!("bad UIDL line: {text}"))),
                }
            })
            .collect()
    }

    pub(crate) fn retr(&mut self, number: u64) -> Result<Vec<u8>> {
        if !self.command(&format!("RETR {number}"))? {
            return Err(TransportError::Protocol(format!("RETR {number} refused")));
        }
        let mut out = Vec::new();
        for line in self.multiline()? {
            out.extend_from_slice(&line);
            out.extend_from_slice(b"\r\n");
        }
        Ok(out)
    }

    pub(crate) fn quit(&mut self) {
        if let Err(e) = self.command("QUIT") {
            debug!("pop3 quit: {e}");
        }
    }
}

/// Retrieves every message whose UIDL has not been seen yet.
pub fn fetch_new(account: &AccountConfig, state: &SyncState) -> Result<FetchResult> {
    let password = account.credential()?;
    let conn = Connection::open(account)?;
    fetch_with(Session::new(conn)?, account, &password, state)
}

pub(crate) fn fetch_with(
    mut session: Session,
    account: &AccountConfig,
    password: &str,
    state: &SyncState,
) -> Result<FetchResult> {
    session.login(&account.username, password)?;
    let mut cursor = state.mailbox(&account.account_id, POP3_MAILBOX);
    let mut result = FetchResult::default();
    let listing = match session.uidl() {
        Ok(l) => l,
        Err(TransportError::ConnectionLost) => return Ok(result.lost()),
        Err(e) => return Err(e),
    };
    for (number, uidl) in listing {
        if cursor.seen_uidl.contains(&uidl) {
            continue;
        }
        let bytes = match session.retr(number) {
            Ok(b) => b,
            Err(TransportError::ConnectionLost) => {
                warn!("{}: connection lost during RETR {number}", account.account_id);
                return Ok(result.lost());
            }
            Err(e) => return Err(e),
        };
        result.messages.push(RawMessage {
            bytes,
            location: MessageLocation {
                account_id: account.account_id.clone(),
                mailbox: POP3_MAILBOX.to_string(),
                uid: uidl_hash(&uidl),
                uidvalidity: 0,
                source_kind: SourceKind::Pop3,
            },
        });
        cursor.seen_uidl.insert(uidl);
        result.new_state.set(&account.account_id, POP3_MAILBOX, cursor.clone());
    }
    session.quit();
    Ok(result)
}
