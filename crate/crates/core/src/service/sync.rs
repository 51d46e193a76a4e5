use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use log::{info, warn};
use serde::Serialize;

use super::{Engine, Result, ServiceError};
use crate::store::GraphStore;
use crate::transport::{fetch_account, AccountConfig, FetchResult, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AccountProgress {
    pub fetched: usize,
    pub classified: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncJob {
    pub job_id: String,
    pub state: JobState,
    pub accounts: Vec<String>,
    pub progress: BTreeMap<String, AccountProgress>,
    pub fetched: usize,
    pub classified: usize,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub errors: Vec<String>,
}

#[derive(Default)]
struct Jobs {
    next_id: u64,
    jobs: BTreeMap<String, SyncJob>,
    busy: BTreeSet<String>,
}

/// Shared front of an [`Engine`]: one writer at a time, readers work on
/// the last committed snapshot, sync jobs run in the background.
pub struct Service {
    engine: Mutex<Engine>,
    snapshot: RwLock<Arc<GraphStore>>,
    jobs: Mutex<Jobs>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Service {
    pub fn new(engine: Engine) -> Arc<Service> {
        let snapshot = Arc::new(engine.store().clone());
        Arc::new(Service { engine: Mutex::new(engine), snapshot: RwLock::new(snapshot), jobs: Mutex::new(Jobs::default()) })
    }

    /// The store as of the last committed write.
    pub fn snapshot(&self) -> Arc<GraphStore> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Runs a mutation through the single writer and publishes the result.
    pub fn write<T>(&self, op: impl FnOnce(&mut Engine) -> Result<T>) -> Result<T> {
        let mut engine = lock(&self.engine);
        let revision = engine.store().revision();
        let out = op(&mut engine);
        if engine.store().revision() != revision {
            *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(engine.store().clone());
        }
        out
    }

    /// Reads from the engine itself rather than the snapshot.
    pub fn read<T>(&self, op: impl FnOnce(&Engine) -> T) -> T {
        op(&lock(&self.engine))
    }

    pub fn job(&self, job_id: &str) -> Option<SyncJob> {
        lock(&self.jobs).jobs.get(job_id).cloned()
    }

    /// Polls until the job leaves the queued/running states.
    pub fn wait_for_job(&self, job_id: &str, timeout: Duration) -> Option<SyncJob> {
        let deadline = Instant::now() + timeout;
        loop {
            let job = self.job(job_id)?;
            if matches!(job.state, JobState::Done | JobState::Failed) || Instant::now() >= deadline {
                return Some(job);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Registers a job for `accounts` (all configured accounts if `None`).
    fn enqueue(&self, accounts: Option<&[String]>) -> Result<(String, Vec<AccountConfig>)> {
        let configured = self.read(|e| e.config().accounts.clone());
        let mut selected: Vec<AccountConfig> = match accounts {
            None => configured,
            Some(ids) => {
                let mut out = Vec::new();
                for id in ids {
                    let acct = configured
                        .iter()
                        .find(|a| &a.account_id == id)
                        .ok_or_else(|| ServiceError::NotFound(format!("unknown account: {id}")))?;
                    if !out.iter().any(|a: &AccountConfig| &a.account_id == id) {
                        out.push(acct.clone());
                    }
                }
                out
            }
        };
        selected.sort_by(|a, b| a.account_id.cmp(&b.account_id));
        let mut jobs = lock(&self.jobs);
        if selected.iter().any(|a| jobs.busy.contains(&a.account_id)) {
            return Err(ServiceError::Conflict("job overlap".into()));
        }
        jobs.next_id += 1;
        let job_id = format!("job-{}", jobs.next_id);
        let ids: Vec<String> = selected.iter().map(|a| a.account_id.clone()).collect();
        jobs.busy.extend(ids.iter().cloned());
        jobs.jobs.insert(
            job_id.clone(),
            SyncJob {
                job_id: job_id.clone(),
                state: JobState::Queued,
                progress: ids.iter().map(|id| (id.clone(), AccountProgress::default())).collect(),
                accounts: ids,
                fetched: 0,
                classified: 0,
                started_at: None,
                finished_at: None,
                errors: Vec::new(),
            },
        );
        Ok((job_id, selected))
    }

    fn update(&self, job_id: &str, f: impl FnOnce(&mut SyncJob)) {
        if let Some(job) = lock(&self.jobs).jobs.get_mut(job_id) {
            f(job);
        }
    }

    /// Starts a background sync and returns the queued job.
    pub fn start_sync(self: &Arc<Self>, accounts: Option<&[String]>) -> Result<SyncJob> {
        let (job_id, selected) = self.enqueue(accounts)?;
        let job = self.job(&job_id).expect("just queued");
        let service = Arc::clone(self);
        std::thread::spawn(move || service.execute(&job_id, selected));
        Ok(job)
    }

    /// Runs a sync on the calling thread and returns the finished job.
    pub fn sync_blocking(&self, accounts: Option<&[String]>) -> Result<SyncJob> {
        let (job_id, selected) = self.enqueue(accounts)?;
        self.execute(&job_id, selected);
        Ok(self.job(&job_id).expect("job exists"))
    }

    /// Fetches all accounts concurrently, then feeds the results to the
    /// pipeline one account at a time in account order.
    fn execute(&self, job_id: &str, accounts: Vec<AccountConfig>) {
        let now = || self.read(|e| e.now());
        let started = now();
        self.update(job_id, |j| {
            j.state = JobState::Running;
            j.started_at = Some(started);
        });
        let state = self.read(|e| e.store().sync_state.clone());
        let results: Vec<std::result::Result<FetchResult, TransportError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = accounts.iter().map(|a| scope.spawn(|| fetch_account(a, &state))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(TransportError::Protocol("fetch worker panicked".into()))))
                .collect()
        });

        let mut failed = false;
        for (account, result) in accounts.iter().zip(results) {
            let id = &account.account_id;
            let fetched = match result {
                Ok(f) => f,
                Err(e) => {
                    warn!("sync {id}: {e}");
                    self.update(job_id, |j| j.errors.push(format!("{id}: {e}")));
                    continue;
                }
            };
            let count = fetched.messages.len();
            self.update(job_id, |j| {
                j.progress.entry(id.clone()).or_default().fetched = count;
                j.fetched += count;
                if let Some(err) = &fetched.error {
                    j.errors.push(format!("{id}: {err}"));
                }
            });
            match self.write(|e| e.run_pipeline(fetched.messages, fetched.new_state)) {
                Ok(report) => self.update(job_id, |j| {
                    j.progress.entry(id.clone()).or_default().classified = report.ingested;
                    j.classified += report.ingested;
                    j.errors.extend(report.errors.iter().map(|e| format!("{id}: {e}")));
                }),
                Err(e) => {
                    failed = true;
                    self.update(job_id, |j| j.errors.push(format!("{id}: {e}")));
                }
            }
        }

        let finished = now();
        let mut jobs = lock(&self.jobs);
        for a in &accounts {
            jobs.busy.remove(&a.account_id);
        }
        if let Some(job) = jobs.jobs.get_mut(job_id) {
            job.state = if failed { JobState::Failed } else { JobState::Done };
            job.finished_at = Some(finished);
            info!("{job_id}: {:?}, fetched {}, classified {}", job.state, job.fetched, job.classified);
        }
    }
}
