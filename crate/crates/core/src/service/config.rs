use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, ServiceError};
use crate::classifier::ClassifierConfig;
use crate::store::DEFAULT_MAX_DEPTH;
use crate::text::{Stopwords, DEFAULT_SUMMARY_SENTENCES};
use crate::transport::AccountConfig;

pub const CONFIG_ENV: &str = "MAILGRAPH_CONFIG";
pub const HOME_ENV: &str = "MAILGRAPH_HOME";
pub const DEFAULT_HTTP_PORT: u16 = 8025;
pub const CONFIG_FILE: &str = "config.json";
pub const STORE_FILE: &str = "store.json";

fn default_port() -> u16 {
    DEFAULT_HTTP_PORT
}

fn default_max_depth() -> usize {
    DEFAULT_MAX_DEPTH
}

fn default_bind() -> String {
    "127.0.0.1".to_string()
}

fn default_summary() -> usize {
    DEFAULT_SUMMARY_SENTENCES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub accounts: Vec<AccountConfig>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub stopword_paths: Vec<PathBuf>,
    #[serde(default = "default_port")]
    pub http_port: u16,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_bind")]
    pub bind_address: String,
    #[serde(default = "default_summary")]
    pub summary_sentences: usize,
    /// Directory served at `/` by the HTTP server.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

/// `$MAILGRAPH_HOME`, else `~/.mailgraph`.
pub fn default_data_dir() -> PathBuf {
    if let Some(home) = std::env::var_os(HOME_ENV) {
        return PathBuf::from(home);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".mailgraph")
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig::with_data_dir(default_data_dir())
    }
}

impl AppConfig {
    pub fn with_data_dir(data_dir: impl Into<PathBuf>) -> Self {
        AppConfig {
            data_dir: data_dir.into(),
            accounts: Vec::new(),
            classifier: ClassifierConfig::default(),
            stopword_paths: Vec::new(),
            http_port: DEFAULT_HTTP_PORT,
            max_depth: DEFAULT_MAX_DEPTH,
            bind_address: default_bind(),
            summary_sentences: DEFAULT_SUMMARY_SENTENCES,
            static_dir: None,
        }
    }

    /// Loads the config named by `explicit`, else by `$MAILGRAPH_CONFIG`,
    /// else `config.json` in the default data directory if present, else
    /// defaults. Relative paths inside a config file are resolved against
    /// the file's directory.
    pub fn load(explicit: Option<&Path>) -> Result<AppConfig> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let path = match explicit.map(Path::to_path_buf).or(from_env) {
            Some(p) => p,
            None => {
                let candidate = default_data_dir().join(CONFIG_FILE);
                if !candidate.exists() {
                    return Ok(AppConfig::default());
                }
                candidate
            }
        };
        AppConfig::from_file(&path)
    }

    pub fn from_file(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: AppConfig = serde_json::from_str(&text)
            .map_err(|e| ServiceError::Invalid(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.data_dir);
        config.stopword_paths.iter_mut().for_each(resolve);
        if let Some(dir) = config.static_dir.as_mut() {
            resolve(dir);
        }
        for account in &mut config.accounts {
            if let Some(p) = account.mbox_path.as_mut() {
                resolve(p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for account in &self.accounts {
            account.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
            if !ids.insert(account.account_id.as_str()) {
                return Err(ServiceError::Invalid(format!("duplicate account_id {}", account.account_id)));
            }
        }
        self.classifier.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        if self.max_depth == 0 {
            return Err(ServiceError::Invalid("max_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn store_path(&self) -> PathBuf {
        self.data_dir.join(STORE_FILE)
    }

    pub fn account(&self, account_id: &str) -> Option<&AccountConfig> {
        self.accounts.iter().find(|a| a.account_id == account_id)
    }

    pub fn stopwords(&self) -> Result<Stopwords> {
        let mut words = Stopwords::builtin();
        for path in &self.stopword_paths {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ServiceError::Invalid(format!("cannot read stopwords {}: {e}", path.display())))?;
            words.extend_from_str(&text);
        }
        Ok(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"data_dir": "data", "accounts": [{"account_id": "a", "source_kind": "mbox", "mbox_path": "in.mbox"}]}"#).unwrap();
        let c = AppConfig::from_file(&path).unwrap();
        assert_eq!(c.data_dir, dir.path().join("data"));
        assert_eq!(c.http_port, 8025);
        assert_eq!(c.max_depth, 3);
        assert_eq!(c.bind_address, "127.0.0.1");
        assert_eq!(c.accounts[0].mbox_path.as_deref(), Some(dir.path().join("in.mbox").as_path()));
        assert_eq!(c.accounts[0].mailboxes, vec!["INBOX"]);
        assert!(c.accounts[0].use_tls);
        assert_eq!(c.classifier, ClassifierConfig::default());
    }

    #[test]
    fn rejects_duplicates_and_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let acct = r#"{"account_id": "a", "source_kind": "mbox", "mbox_path": "x"}"#;
        std::fs::write(&path, format!(r#"{{"accounts": [{acct}, {acct}]}}"#)).unwrap();
        assert!(AppConfig::from_file(&path).unwrap_err().to_string().contains("duplicate"));
        std::fs::write(&path, "{").unwrap();
        assert!(matches!(AppConfig::from_file(&path), Err(ServiceError::Invalid(_))));
        assert!(AppConfig::from_file(&dir.path().join("missing.json")).is_err());
    }
}
