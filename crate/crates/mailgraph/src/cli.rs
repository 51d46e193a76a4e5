//! Command line front end.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mailgraph_core::service::views::{category_messages, category_tree, memberships, message_detail};
use mailgraph_core::service::{
    AppConfig, Engine, JobState, Service, ServiceError, SystemClock, CONFIG_ENV, CONFIG_FILE,
};

use crate::api;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mailgraph", version, about = "Multi-account email auto-classification")]
pub struct Cli {
    /// Config file (defaults to $MAILGRAPH_CONFIG, then <data dir>/config.json)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the data directory, an empty store and a starter config
    Init,
    /// Fetch new mail from the configured accounts and classify it
    Sync {
        /// Only sync this account (repeatable)
        #[arg(long = "account", value_name = "ID")]
        accounts: Vec<String>,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Show the category tree, or the messages of one category
    List { category_id: Option<String> },
    /// Show one message with its digest and memberships
    Show { message_id: String },
    /// Add a message to a category
    Assign { message_id: String, category_id: String },
    /// Move a message from one category to another
    Correct {
        message_id: String,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: String,
    },
    /// Split a category into sub-categories
    Subcluster { category_id: String },
    /// Import messages from a local mbox file
    ImportMbox {
        path: PathBuf,
        #[arg(long, value_name = "ID")]
        account: String,
    },
    /// Mark a message as spam, or with --not as legitimate
    Spam {
        message_id: String,
        #[arg(long)]
        not: bool,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &ServiceError) -> i32 {
    match e {
        ServiceError::NotFound(_) | ServiceError::Invalid(_) | ServiceError::Conflict(_) => EXIT_USER,
        ServiceError::Internal(_) => EXIT_INTERNAL,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), ServiceError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ServiceError::Internal(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn open(config: &AppConfig) -> Result<Engine, ServiceError> {
    Engine::open(config.clone(), Arc::new(SystemClock))
}

pub fn run(cli: Cli) -> Result<(), ServiceError> {
    let config = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Init => init(cli.config.as_deref(), &config),
        Command::Sync { accounts } => {
            let service = Service::new(open(&config)?);
            let selected = (!accounts.is_empty()).then_some(accounts.as_slice());
            let job = service.sync_blocking(selected)?;
            for e in &job.errors {
                eprintln!("warning: {e}");
            }
            print_json(&job)?;
            if job.state == JobState::Failed {
                return Err(ServiceError::Internal(format!("{} failed", job.job_id)));
            }
            Ok(())
        }
        Command::Serve { port } => serve(config, port),
        Command::List { category_id } => {
            let engine = open(&config)?;
            match category_id {
                None => print_json(&category_tree(engine.store())),
                Some(id) => print_json(&category_messages(engine.store(), &id)?),
            }
        }
        Command::Show { message_id } => print_json(&message_detail(open(&config)?.store(), &message_id)?),
        Command::Assign { message_id, category_id } => {
            let mut engine = open(&config)?;
            let neighbors = engine.assign(&message_id, &category_id)?;
            print_json(&memberships(engine.store(), neighbors))
        }
        Command::Correct { message_id, from, to } => {
            let mut engine = open(&config)?;
            let neighbors = engine.correct(&message_id, from.as_deref(), &to)?;
            print_json(&memberships(engine.store(), neighbors))
        }
        Command::Subcluster { category_id } => {
            let mut engine = open(&config)?;
            let children = engine.subcluster(&category_id)?;
            if children.is_empty() {
                eprintln!("members did not separate; no sub-categories created");
            }
            print_json(&children)
        }
        Command::ImportMbox { path, account } => {
            let mut engine = open(&config)?;
            let report = engine.import_mbox(&path, &account)?;
            for e in &report.errors {
                eprintln!("warning: {e}");
            }
            print_json(&report)
        }
        Command::Spam { message_id, not } => {
            let mut engine = open(&config)?;
            let neighbors = engine.mark_spam(&message_id, !not)?;
            print_json(&memberships(engine.store(), neighbors))
        }
    }
}

fn init(explicit: Option<&Path>, config: &AppConfig) -> Result<(), ServiceError> {
    let mut engine = open(config)?;
    let created_store = !engine.store_path().exists();
    if created_store {
        engine.persist()?;
    }
    println!("store: {}{}", engine.store_path().display(), if created_store { " (created)" } else { "" });
    let config_in_use = explicit.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if config_in_use.is_none() {
        let path = config.data_dir.join(CONFIG_FILE);
        if !path.exists() {
            let text = serde_json::to_string_pretty(config).map_err(|e| ServiceError::Internal(e.to_string()))?;
            std::fs::write(&path, text + "\n")
                .map_err(|e| ServiceError::Internal(format!("cannot write {}: {e}", path.display())))?;
            println!("config: {} (created)", path.display());
        } else {
            println!("config: {}", path.display());
        }
    }
    Ok(())
}

fn serve(config: AppConfig, port: Option<u16>) -> Result<(), ServiceError> {
    let port = port.unwrap_or(config.http_port);
    let addr: SocketAddr = format!("{}:{port}", config.bind_address)
        .parse()
        .map_err(|e| ServiceError::Invalid(format!("bad bind address {}: {e}", config.bind_address)))?;
    let static_dir = config.static_dir.clone();
    let service = Service::new(open(&config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ServiceError::Invalid(format!("cannot listen on {addr}: {e}")))?;
        eprintln!("listening on http://{}", listener.local_addr().unwrap_or(addr));
        axum::serve(listener, api::router(service, static_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))
    })
}
