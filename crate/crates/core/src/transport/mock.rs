//! Scripted mail server for tests.
//!
//! A script is a list of `S: <text>` lines the server sends and
//! `C: <pattern>` lines the client must send, played in order. In patterns
//! `<TAG>` matches any IMAP tag and `*` matches any single argument. A
//! server line starting with `<TAG>` is sent with the tag of the last
//! matched client line. When the script runs out the server closes its
//! side, so a script that stops mid-response simulates a dropped
//! connection. Every client line is recorded for auditing.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

const TAG: &str = "<TAG>";
const ACCEPT_TIMEOUT: Duration = Duration::from_secs(20);
const CLIENT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Send(String),
    Expect(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    steps: Vec<Step>,
}

impl Script {
    pub fn new() -> Script {
        Script::default()
    }

    pub fn send(mut self, text: impl Into<String>) -> Script {
        self.steps.push(Step::Send(text.into()));
        self
    }

    pub fn expect(mut self, pattern: impl Into<String>) -> Script {
        self.steps.push(Step::Expect(pattern.into()));
        self
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Text form; line `i + 1` of the output is step `i`.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for step in &self.steps {
            match step {
                Step::Send(t) => writeln!(f, "S: {t}")?,
                Step::Expect(p) => writeln!(f, "C: {p}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Script {
    type Err = String;

    /// Blank lines are not allowed; use `S:` or `S: ` for an empty server line.
    fn from_str(text: &str) -> Result<Script, String> {
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let body = |prefix: &str| line[prefix.len()..].strip_prefix(' ').unwrap_or(&line[prefix.len()..]).to_string();
            if line.starts_with("S:") {
                steps.push(Step::Send(body("S:")));
            } else if line.starts_with("C:") {
                steps.push(Step::Expect(body("C:")));
            } else {
                return Err(format!("line {}: expected `S:` or `C:`", i + 1));
            }
        }
        Ok(Script { steps })
    }
}

/// Splits on spaces, keeping double-quoted strings (with backslash
/// escapes) as single arguments.
fn arguments(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b' ' {
            i += 1;
            continue;
        }
        let start = i;
        let mut quoted = false;
        while i < bytes.len() && (quoted || bytes[i] != b' ') {
            match bytes[i] {
                b'\\' if quoted => i += 1,
                b'"' => quoted = !quoted,
                _ => {}
            }
            i += 1;
        }
        out.push(&line[start..i.min(line.len())]);
    }
    out
}

/// Whether a client line matches a `C:` pattern. Returns the captured tag.
/// A trailing `*` also covers an unquoted last argument containing spaces,
/// as POP3 allows for `PASS`.
pub fn match_line(pattern: &str, line: &str) -> Option<Option<String>> {
    let p = arguments(pattern);
    let mut l = arguments(line);
    if p.last() == Some(&"*") && l.len() > p.len() {
        l.truncate(p.len());
    }
    if p.len() != l.len() {
        return None;
    }
    let mut tag = None;
    for (pt, lt) in p.iter().zip(&l) {
        match *pt {
            TAG => tag = Some(lt.to_string()),
            "*" => {}
            _ if pt == lt => {}
            _ => return None,
        }
    }
    Some(tag)
}

/// Whether a client line could change server state or message flags.
pub fn is_mutating(line: &str) -> bool {
    let upper = line.to_ascii_uppercase();
    let tokens: Vec<&str> = upper.split_whitespace().collect();
    let credential_line = tokens.iter().take(2).any(|t| matches!(*t, "LOGIN" | "USER" | "PASS"));
    if credential_line {
        return false;
    }
    const COMMANDS: &[&str] =
        &["STORE", "EXPUNGE", "DELE", "DELETE", "COPY", "MOVE", "APPEND", "RENAME", "CREATE", "UNSUBSCRIBE"];
    tokens.iter().any(|t| {
        let t = t.trim_matches(|c| c == '(' || c == ')');
        COMMANDS.contains(&t) || t.ends_with("FLAGS") || t.starts_with("FLAGS") || t == "RFC822" || t == "RFC822.TEXT"
    }) || (upper.contains("BODY[") && !upper.contains("BODY.PEEK["))
}

/// What happened on one scripted connection.
#[derive(Debug, Clone, Default)]
pub struct SessionRecord {
    /// Every line the client sent, in order.
    pub client_lines: Vec<String>,
    /// First mismatch, naming the script line, if any.
    pub failure: Option<String>,
}

impl SessionRecord {
    pub fn mutating_commands(&self) -> Vec<&str> {
        self.client_lines.iter().map(String::as_str).filter(|l| is_mutating(l)).collect()
    }
}

/// Serves one script per accepted connection, in order, on 127.0.0.1.
pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Vec<SessionRecord>>>,
}

impl MockServer {
    pub fn start(scripts: Vec<Script>) -> io::Result<MockServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let mut records = Vec::new();
            for script in scripts {
                match accept(&listener, &flag) {
                    Some(stream) => records.push(play(stream, &script)),
                    None => break,
                }
            }
            records
        });
        Ok(MockServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Stops waiting for further connections and returns the records of
    /// the sessions that ran.
    pub fn finish(mut self) -> Vec<SessionRecord> {
        self.stop.store(true, Ordering::SeqCst);
        self.handle.take().expect("joined once").join().expect("mock server thread panicked")
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn accept(listener: &TcpListener, stop: &AtomicBool) -> Option<TcpStream> {
    let deadline = Instant::now() + ACCEPT_TIMEOUT;
    while !stop.load(Ordering::SeqCst) && Instant::now() < deadline {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false).ok()?;
                stream.set_read_timeout(Some(CLIENT_TIMEOUT)).ok()?;
                stream.set_nodelay(true).ok()?;
                return Some(stream);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
            Err(_) => return None,
        }
    }
    None
}

fn read_client_line(reader: &mut BufReader<TcpStream>) -> Option<String> {
    let mut buf = Vec::new();
    match reader.read_until(b'\n', &mut buf) {
        Ok(0) | Err(_) => None,
        Ok(_) => {
            while matches!(buf.last(), Some(b'\n' | b'\r')) {
                buf.pop();
            }
            Some(String::from_utf8_lossy(&buf).into_owned())
        }
    }
}

fn play(stream: TcpStream, script: &Script) -> SessionRecord {
    let mut record = SessionRecord::default();
    let Ok(mut writer) = stream.try_clone() else {
        record.failure = Some("cannot clone mock stream".into());
        return record;
    };
    let mut reader = BufReader::new(stream);
    let mut last_tag = String::new();
    for (i, step) in script.steps.iter().enumerate() {
        let lineno = i + 1;
        match step {
            Step::Send(text) => {
                let text = match text.strip_prefix(TAG) {
                    Some(rest) => format!("{last_tag}{rest}"),
                    None => text.clone(),
                };
                if writer.write_all(format!("{text}\r\n").as_bytes()).is_err() {
                    record.failure = Some(format!("line {lineno}: client went away before server line"));
                    return record;
                }
            }
            Step::Expect(pattern) => {
                let Some(line) = read_client_line(&mut reader) else {
                    record.failure = Some(format!("line {lineno}: expected `{pattern}`, client sent nothing"));
                    return record;
                };
                record.client_lines.push(line.clone());
                match match_line(pattern, &line) {
                    Some(tag) => {
                        if let Some(tag) = tag {
                            last_tag = tag;
                        }
                    }
                    None => {
                        record.failure = Some(format!("line {lineno}: expected `{pattern}`, got `{line}`"));
                        let _ = writer.shutdown(Shutdown::Both);
                        return record;
                    }
                }
            }
        }
    }
    let _ = writer.flush();
    let _ = writer.shutdown(Shutdown::Write);
    while let Some(line) = read_client_line(&mut reader) {
        if record.failure.is_none() {
            record.failure = Some(format!("line {}: unexpected client line `{line}` after end of script", script.steps.len() + 1));
        }
        record.client_lines.push(line);
    }
    record
}

/// Normalizes line endings to CRLF.
pub fn crlf(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes).replace("\r\n", "\n").replace('\n', "\r\n");
    text.into_bytes()
}

/// Server lines carrying `bytes` followed by `tail` on the last line.
fn body_lines(bytes: &[u8], tail: &str) -> Vec<String> {
    let mut text = String::from_utf8(crlf(bytes)).expect("crlf output is UTF-8");
    text.push_str(tail);
    text.split("\r\n").map(str::to_string).collect()
}

/// One mailbox on a scripted IMAP server.
#[derive(Debug, Clone)]
pub struct ImapMailbox {
    pub name: String,
    pub uidvalidity: u64,
    /// `(uid, raw message)` in ascending uid order.
    pub messages: Vec<(u64, Vec<u8>)>,
    /// The `last_seen_uid` the client is expected to search from.
    pub client_last_seen: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImapFault {
    #[default]
    None,
    RejectLogin,
    /// Close the connection halfway through the literal of this uid.
    DropDuringFetch(u64),
}

/// Script for one read-only IMAP sync session. Message bodies are sent with
/// CRLF line endings (see [`crlf`]).
pub fn imap_script(mailboxes: &[ImapMailbox], fault: ImapFault) -> Script {
    let mut s = Script::new().send("* OK [CAPABILITY IMAP4rev1] mock ready").expect("<TAG> LOGIN * *");
    if fault == ImapFault::RejectLogin {
        return s.send("<TAG> NO [AUTHENTICATIONFAILED] invalid credentials");
    }
    s = s.send("<TAG> OK LOGIN completed");
    for mb in mailboxes {
        let max_uid = mb.messages.iter().map(|(u, _)| *u).max().unwrap_or(0);
        s = s
            .expect(format!("<TAG> SELECT \"{}\"", mb.name))
            .send(format!("* {} EXISTS", mb.messages.len()))
            .send(format!("* OK [UIDVALIDITY {}] UIDs valid", mb.uidvalidity))
            .send(format!("* OK [UIDNEXT {}] predicted next UID", max_uid + 1))
            .send("<TAG> OK [READ-WRITE] SELECT completed")
            .expect(format!("<TAG> UID SEARCH UID {}:*", mb.client_last_seen + 1));
        let new: Vec<(usize, &(u64, Vec<u8>))> =
            mb.messages.iter().enumerate().filter(|(_, (u, _))| *u > mb.client_last_seen).collect();
        // n:* always matches the highest uid, even when n is larger
        let hits: Vec<String> = if new.is_empty() {
            mb.messages.last().map(|(u, _)| u.to_string()).into_iter().collect()
        } else {
            new.iter().map(|(_, (u, _))| u.to_string()).collect()
        };
        s = s.send(format!("* SEARCH {}", hits.join(" ")).trim_end().to_string()).send("<TAG> OK SEARCH completed");
        for (i, (uid, bytes)) in new {
            let body = crlf(bytes);
            s = s
                .expect(format!("<TAG> UID FETCH {uid} (UID BODY.PEEK[])"))
                .send(format!("* {} FETCH (UID {uid} BODY[] {{{}}}", i + 1, body.len()));
            if fault == ImapFault::DropDuringFetch(*uid) {
                let half = &body[..body.len() / 2];
                let partial = String::from_utf8_lossy(half);
                let first = partial.split("\r\n").next().unwrap_or("");
                return s.send(first.to_string());
            }
            for line in body_lines(&body, ")") {
                s = s.send(line);
            }
            s = s.send("<TAG> OK FETCH completed");
        }
    }
    s.expect("<TAG> LOGOUT").send("* BYE mock logging out").send("<TAG> OK LOGOUT completed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pop3Fault {
    #[default]
    None,
    RejectLogin,
    NoUidl,
    /// Close the connection while sending this 1-based message number.
    DropDuringRetr(usize),
}

/// Script for one POP3 session over `(uidl, raw message)` pairs, where the
/// client already holds the UIDLs in `seen`.
pub fn pop3_script(messages: &[(String, Vec<u8>)], seen: &BTreeSet<String>, fault: Pop3Fault) -> Script {
    let mut s = Script::new().send("+OK POP3 mock ready").expect("USER *").send("+OK").expect("PASS *");
    if fault == Pop3Fault::RejectLogin {
        return s.send("-ERR invalid credentials");
    }
    s = s.send("+OK logged in").expect("UIDL");
    if fault == Pop3Fault::NoUidl {
        return s.send("-ERR command not supported");
    }
    s = s.send("+OK unique-id listing follows");
    for (i, (uidl, _)) in messages.iter().enumerate() {
        s = s.send(format!("{} {uidl}", i + 1));
    }
    s = s.send(".");
    for (i, (uidl, bytes)) in messages.iter().enumerate() {
        if seen.contains(uidl) {
            continue;
        }
        let body = crlf(bytes);
        s = s.expect(format!("RETR {}", i + 1)).send(format!("+OK {} octets", body.len()));
        let mut lines = body_lines(&body, "");
        if lines.last().is_some_and(String::is_empty) {
            lines.pop();
        }
        if fault == Pop3Fault::DropDuringRetr(i + 1) {
            return s.send(lines.first().cloned().unwrap_or_default());
        }
        for line in lines {
            s = s.send(if line.starts_with('.') { format!(".{line}") } else { line });
        }
        s = s.send(".");
    }
    s.expect("QUIT").send("+OK bye")
}
