//! Minimal read-only IMAP4rev1 client: LOGIN, LIST, SELECT, UID SEARCH,
//! UID FETCH with BODY.PEEK and LOGOUT. Nothing that changes flags or
//! mailbox contents is ever sent.

use log::{debug, warn};

use super::{AccountConfig, Connection, FetchResult, MailboxState, Result, SyncState, TransportError};
use crate::mime::{MessageLocation, RawMessage, SourceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok,
    No,
    Bad,
}

/// An untagged response line with the literals embedded in it.
#[derive(Debug, Default)]
struct Untagged {
    text: String,
    literals: Vec<Vec<u8>>,
}

#[derive(Debug)]
struct Response {
    untagged: Vec<Untagged>,
    status: Status,
    text: String,
}

pub(crate) struct Session {
    conn: Connection,
    next_tag: u64,
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Byte count of a trailing `{N}` literal marker.
fn literal_len(line: &[u8]) -> Option<usize> {
    let line = std::str::from_utf8(line).ok()?;
    let open = line.strip_suffix('}')?.rfind('{')?;
    line[open + 1..line.len() - 1].trim_end_matches('+').parse().ok()
}

impl Session {
    pub(crate) fn new(mut conn: Connection) -> Result<Session> {
        let greeting = String::from_utf8_lossy(&conn.read_line()?).into_owned();
        if !greeting.starts_with("* OK") && !greeting.starts_with("* PREAUTH") {
            return Err(TransportError::Protocol(format!("unexpected greeting: {greeting}")));
        }
        Ok(Session { conn, next_tag: 1 })
    }

    fn command(&mut self, command: &str) -> Result<Response> {
        let tag = format!("a{}", self.next_tag);
        self.next_tag += 1;
        if command.starts_with("LOGIN ") {
            debug!("imap > {tag} LOGIN ***");
        } else {
            debug!("imap > {tag} {command}");
        }
        self.conn.send_line(&format!("{tag} {command}"))?;
        let mut untagged = Vec::new();
        loop {
            let line = self.read_response_line()?;
            if let Some(rest) = line.text.strip_prefix(&format!("{tag} ")) {
                let (word, text) = rest.split_once(' ').unwrap_or((rest, ""));
                let status = match word.to_ascii_uppercase().as_str() {
                    "OK" => Status::Ok,
                    "NO" => Status::No,
                    "BAD" => Status::Bad,
                    _ => return Err(TransportError::Protocol(format!("bad tagged response: {}", line.text))),
                };
                return Ok(Response { untagged, status, text: text.to_string() });
            }
            if line.text.starts_with("* BYE") && command != "LOGOUT" {
                return Err(TransportError::ConnectionLost);
            }
            untagged.push(line);
        }
    }

    /// Reads one logical response line, pulling in any literals it announces.
    fn read_response_line(&mut self) -> Result<Untagged> {
        let mut out = Untagged::default();
        loop {
            let line = self.conn.read_line()?;
            let literal = literal_len(&line);
            out.text.push_str(&String::from_utf8_lossy(&line));
            match literal {
                Some(n) => out.literals.push(self.conn.read_exact(n)?),
                None => return Ok(out),
            }
        }
    }

    fn expect_ok(&mut self, command: &str) -> Result<Response> {
        let resp = self.command(command)?;
        if resp.status != Status::Ok {
            return Err(TransportError::Protocol(format!("{} failed: {}", verb(command), resp.text)));
        }
        Ok(resp)
    }

    pub(crate) fn login(&mut self, user: &str, password: &str) -> Result<()> {
        let resp = self.command(&format!("LOGIN {} {}", quote(user), quote(password)))?;
        match resp.status {
            Status::Ok => Ok(()),
            _ => Err(TransportError::AuthFailed),
        }
    }

    pub(crate) fn list(&mut self) -> Result<Vec<String>> {
        let resp = self.expect_ok("LIST \"\" \"*\"")?;
        Ok(resp.untagged.iter().filter_map(|u| parse_list_name(&u.text)).collect())
    }

    /// Selects a mailbox and returns its UIDVALIDITY.
    pub(crate) fn select(&mut self, mailbox: &str) -> Result<u64> {
        let resp = self.expect_ok(&format!("SELECT {}", quote(mailbox)))?;
        resp.untagged
            .iter()
            .chain(std::iter::once(&Untagged { text: resp.text.clone(), literals: vec![] }))
            .find_map(|u| bracket_number(&u.text, "UIDVALIDITY"))
            .ok_or_else(|| TransportError::Protocol("SELECT response lacks UIDVALIDITY".into()))
    }

    /// UIDs strictly greater than `after`, ascending.
    pub(crate) fn uids_after(&mut self, after: u64) -> Result<Vec<u64>> {
        let resp = self.expect_ok(&format!("UID SEARCH UID {}:*", after + 1))?;
        let mut uids: Vec<u64> = resp
            .untagged
            .iter()
            .filter_map(|u| u.text.strip_prefix("* SEARCH"))
            .flat_map(|rest| rest.split_whitespace().filter_map(|n| n.parse().ok()))
            .filter(|&uid| uid > after)
            .collect();
        uids.sort_unstable();
        uids.dedup();
        Ok(uids)
    }

    /// Full raw message for `uid`, without setting `\Seen`.
    pub(crate) fn fetch(&mut self, uid: u64) -> Result<Option<Vec<u8>>> {
        let resp = self.expect_ok(&format!("UID FETCH {uid} (UID BODY.PEEK[])"))?;
        for item in resp.untagged {
            if !item.text.contains(" FETCH ") {
                continue;
            }
            if let Some(got) = fetch_uid(&item.text) {
                if got != uid {
                    continue;
                }
            }
            if let Some(body) = item.literals.into_iter().next() {
                return Ok(Some(body));
            }
        }
        Ok(None)
    }

    pub(crate) fn logout(&mut self) {
        if let Err(e) = self.command("LOGOUT") {
            debug!("imap logout: {e}");
        }
    }
}

fn verb(command: &str) -> &str {
    let mut words = command.split(' ');
    match words.next() {
        Some("UID") => command.splitn(3, ' ').take(2).last().unwrap_or("UID"),
        Some(w) => w,
        None => command,
    }
}

fn bracket_number(text: &str, key: &str) -> Option<u64> {
    let start = text.find(&format!("[{key} "))? + key.len() + 2;
    let end = text[start..].find(']')? + start;
    text[start..end].trim().parse().ok()
}

fn fetch_uid(text: &str) -> Option<u64> {
    let upper = text.to_ascii_uppercase();
    let pos = upper.find("UID ")? + 4;
    let digits: String = text[pos..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn parse_list_name(text: &str) -> Option<String> {
    let rest = text.strip_prefix("* LIST ")?;
    let rest = &rest[rest.find(')')? + 1..];
    let rest = rest.trim_start();
    // skip the hierarchy delimiter: quoted char or NIL
    let rest = if let Some(r) = rest.strip_prefix("NIL") {
        r
    } else {
        let r = rest.strip_prefix('"')?;
        let close = if r.starts_with('\\') { 2 } else { 1 };
        r.get(close + 1..)?
    };
    let name = rest.trim();
    match name.strip_prefix('"').and_then(|n| n.strip_suffix('"')) {
        Some(q) => Some(q.replace("\\\"", "\"").replace("\\\\", "\\")),
        None => Some(name.to_string()),
    }
}

/// Mailbox names the account can see.
pub fn list_mailboxes(account: &AccountConfig) -> Result<Vec<String>> {
    let password = account.credential()?;
    let mut session = Session::new(Connection::open(account)?)?;
    session.login(&account.username, &password)?;
    let names = session.list()?;
    session.logout();
    Ok(names)
}

/// Fetches new messages from every configured mailbox of an IMAP account.
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
    let mut result = FetchResult::default();
    for mailbox in &account.mailboxes {
        match fetch_mailbox(&mut session, account, mailbox, state, &mut result) {
            Ok(()) => {}
            Err(TransportError::ConnectionLost) => {
                warn!("{}: connection lost while fetching {mailbox}", account.account_id);
                return Ok(result.lost());
            }
            Err(e) => return Err(e),
        }
    }
    session.logout();
    Ok(result)
}

fn fetch_mailbox(
    session: &mut Session,
    account: &AccountConfig,
    mailbox: &str,
    state: &SyncState,
    result: &mut FetchResult,
) -> Result<()> {
    let stored = state.mailbox(&account.account_id, mailbox);
    let uidvalidity = session.select(mailbox)?;
    let mut cursor = if stored.uidvalidity == uidvalidity {
        stored
    } else {
        if stored.uidvalidity != 0 {
            warn!(
                "{}/{mailbox}: UIDVALIDITY changed {} -> {uidvalidity}, refetching",
                account.account_id, stored.uidvalidity
            );
        }
        MailboxState { uidvalidity, last_seen_uid: 0, ..Default::default() }
    };
    // Commit the (possibly reset) cursor even if nothing new arrives.
    result.new_state.set(&account.account_id, mailbox, cursor.clone());
    for uid in session.uids_after(cursor.last_seen_uid)? {
        match session.fetch(uid)? {
            Some(bytes) => result.messages.push(RawMessage {
                bytes,
                location: MessageLocation {
                    account_id: account.account_id.clone(),
                    mailbox: mailbox.to_string(),
                    uid,
                    uidvalidity,
                    source_kind: SourceKind::Imap,
                },
            }),
            None => warn!("{}/{mailbox}: UID {uid} vanished before fetch", account.account_id),
        }
        cursor.last_seen_uid = uid;
        result.new_state.set(&account.account_id, mailbox, cursor.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_markers() {
        assert_eq!(literal_len(b"* 1 FETCH (UID 2 BODY[] {42}"), Some(42));
        assert_eq!(literal_len(b"* 1 FETCH (UID 2 BODY[] {7+}"), Some(7));
        assert_eq!(literal_len(b"* OK done"), None);
        assert_eq!(literal_len(b"{x}"), None);
    }

    #[test]
    fn response_parsing() {
        assert_eq!(bracket_number("* OK [UIDVALIDITY 3857529045] UIDs valid", "UIDVALIDITY"), Some(3857529045));
        assert_eq!(bracket_number("* OK [UIDNEXT 4] next", "UIDVALIDITY"), None);
        assert_eq!(fetch_uid("* 12 FETCH (UID 99 BODY[] {3}"), Some(99));
        assert_eq!(fetch_uid("* 12 FETCH (BODY[] {3}"), None);
        assert_eq!(parse_list_name(r#"* LIST (\HasNoChildren) "/" "INBOX""#).as_deref(), Some("INBOX"));
        assert_eq!(parse_list_name(r#"* LIST () "." Archive"#).as_deref(), Some("Archive"));
        assert_eq!(parse_list_name(r#"* LIST (\Noselect) NIL "a \"b\"""#).as_deref(), Some("a \"b\""));
        assert_eq!(quote(r#"pa"ss\"#), r#""pa\"ss\\""#);
        assert_eq!(verb("UID FETCH 1 (UID BODY.PEEK[])"), "FETCH");
        assert_eq!(verb("SELECT \"INBOX\""), "SELECT");
    }
}
