//! Read-only mail acquisition: IMAP, POP3 and local mbox files, plus a
//! scripted mock server for tests.

pub mod imap;
pub mod mbox;
pub mod mock;
pub mod pop3;
mod state;

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mime::{RawMessage, SourceKind};

pub use state::{MailboxState, SyncEntry, SyncState};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(15);
const READ_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("auth failed")]
    AuthFailed,
    #[error("connection lost")]
    ConnectionLost,
    #[error("UIDL unsupported")]
    UidlUnsupported,
    #[error("credentials unavailable: environment variable {0} is not set")]
    CredentialsUnavailable(String),
    #[error("invalid account config: {0}")]
    InvalidConfig(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("tls error: {0}")]
    Tls(String),
    #[error("cannot connect to {host}:{port}: {source}")]
    Connect { host: String, port: u16, source: io::Error },
    #[error("cannot read {path}: {source}")]
    UnreadableFile { path: PathBuf, source: io::Error },
}

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

fn default_true() -> bool {
    true
}

fn default_mailboxes() -> Vec<String> {
    vec!["INBOX".to_string()]
}

/// One mail source. Secrets never live here: `credential_env` names the
/// environment variable that holds the password.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountConfig {
    pub account_id: String,
    pub source_kind: SourceKind,
    #[serde(default)]
    pub host: String,
    #[serde(default)]
    pub port: u16,
    #[serde(default = "default_true")]
    pub use_tls: bool,
    /// Skip certificate and hostname verification.
    #[serde(default)]
    pub insecure: bool,
    #[serde(default)]
    pub username: String,
    #[serde(default)]
    pub credential_env: String,
    #[serde(default = "default_mailboxes")]
    pub mailboxes: Vec<String>,
    #[serde(default)]
    pub mbox_path: Option<PathBuf>,
}

impl AccountConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(TransportError::InvalidConfig(m));
        if self.account_id.is_empty() {
            return invalid("account_id is empty".into());
        }
        match self.source_kind {
            SourceKind::Imap | SourceKind::Pop3 => {
                if self.host.is_empty() || self.port == 0 || self.username.is_empty() {
                    return invalid(format!("{}: host, port and username are required", self.account_id));
                }
                if self.credential_env.is_empty() {
                    return invalid(format!("{}: credential_env is required", self.account_id));
                }
                if self.source_kind == SourceKind::Imap && self.mailboxes.is_empty() {
                    return invalid(format!("{}: no mailboxes", self.account_id));
                }
            }
            SourceKind::Mbox => {
                if self.mbox_path.is_none() {
                    return invalid(format!("{}: mbox_path is required", self.account_id));
                }
            }
        }
        Ok(())
    }

    pub fn credential(&self) -> Result<String> {
        std::env::var(&self.credential_env)
            .map_err(|_| TransportError::CredentialsUnavailable(self.credential_env.clone()))
    }
}

/// Messages retrieved in one session and the cursors that cover them.
///
/// `new_state` only advances past messages that were received completely,
/// so a `partial` result can be committed as is.
#[derive(Debug, Clone, Default)]
pub struct FetchResult {
    pub messages: Vec<RawMessage>,
    pub new_state: SyncState,
    pub partial: bool,
    pub error: Option<String>,
}

impl FetchResult {
    fn lost(mut self) -> Self {
        self.partial = true;
        self.error = Some(TransportError::ConnectionLost.to_string());
        self
    }
}

/// Fetches everything new for one account.
pub fn fetch_account(account: &AccountConfig, state: &SyncState) -> Result<FetchResult> {
    account.validate()?;
    match account.source_kind {
        SourceKind::Imap => imap::fetch_new(account, state),
        SourceKind::Pop3 => pop3::fetch_new(account, state),
        SourceKind::Mbox => {
            let path = account.mbox_path.as_ref().expect("validated");
            mbox::import_mbox(path, &account.account_id, state)
        }
    }
}

trait Duplex: Read + Write + Send {}
impl<T: Read + Write + Send> Duplex for T {}

/// Line-oriented client connection shared by the IMAP and POP3 clients.
pub(crate) struct Connection {
    inner: BufReader<Box<dyn Duplex>>,
}

impl Connection {
    pub(crate) fn open(account: &AccountConfig) -> Result<Connection> {
        let connect_err = |source| TransportError::Connect { host: account.host.clone(), port: account.port, source };
        let addr = (account.host.as_str(), account.port)
            .to_socket_addrs()
            .map_err(connect_err)?
            .next()
            .ok_or_else(|| connect_err(io::Error::new(io::ErrorKind::NotFound, "no address")))?;
        let tcp = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(connect_err)?;
        tcp.set_read_timeout(Some(READ_TIMEOUT)).map_err(connect_err)?;
        tcp.set_write_timeout(Some(READ_TIMEOUT)).map_err(connect_err)?;
        tcp.set_nodelay(true).map_err(connect_err)?;
        if !account.use_tls {
            return Ok(Connection::new(tcp));
        }
        let connector = native_tls::TlsConnector::builder()
            .danger_accept_invalid_certs(account.insecure)
            .danger_accept_invalid_hostnames(account.insecure)
            .build()
            .map_err(|e| TransportError::Tls(e.to_string()))?;
        let tls = connector.connect(&account.host, tcp).map_err(|e| TransportError::Tls(e.to_string()))?;
        Ok(Connection::new(tls))
    }

    pub(crate) fn new<S: Read + Write + Send + 'static>(stream: S) -> Connection {
        Connection { inner: BufReader::new(Box::new(stream)) }
    }

    /// Writes one line followed by CRLF.
    pub(crate) fn send_line(&mut self, line: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 2);
        buf.extend_from_slice(line.as_bytes());
        buf.extend_from_slice(b"\r\n");
        let w = self.inner.get_mut();
        w.write_all(&buf).and_then(|_| w.flush()).map_err(|_| TransportError::ConnectionLost)
    }

    /// Reads one line without its terminator. End of stream is a lost connection.
    pub(crate) fn read_line(&mut self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let n = self.inner.read_until(b'\n', &mut buf).map_err(|_| TransportError::ConnectionLost)?;
        if n == 0 || buf.last() != Some(&b'\n') {
            return Err(TransportError::ConnectionLost);
        }
        buf.pop();
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
        Ok(buf)
    }

    pub(crate) fn read_exact(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| TransportError::ConnectionLost)?;
        Ok(buf)
    }
}
