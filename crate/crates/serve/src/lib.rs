//! Suggestion service over an immutable [`ModelSnapshot`].
//!
//! Requests pin the current snapshot for their whole lifetime, so a swap
//! never produces a response computed from two different models. Feedback is
//! appended to a JSONL log through one serialized writer and replayed into
//! the per-user history on startup.

mod error;
mod http;
mod log;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, PoisonError, RwLock};

use onesug_core::config::RunConfig;
use onesug_core::corpus::{FeedbackLevel, HistoryIndex, InteractionRecord};
use onesug_core::feedback::{export_feedback_dataset, FeedbackEvent};
use onesug_core::pipeline::{Corpus, ModelSnapshot};
use onesug_core::sugmodel::UserContext;
use serde::{Deserialize, Serialize};

pub use error::ServeError;
pub use http::{router, serve_on, serve_until};
pub use log::FeedbackLog;

pub type Result<T, E = ServeError> = std::result::Result<T, E>;

/// Version of the JSON response layout.
pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub query: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub schema: u32,
    pub suggestions: Vec<Suggestion>,
}

/// Body of `POST /feedback`. The level stays a string until validated so an
/// unknown name gets a helpful rejection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub user: String,
    pub prefix: String,
    pub query: String,
    pub level: String,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub ok: bool,
    pub snapshot_hash: String,
}

/// Positive history and profile strings by user.
#[derive(Debug, Clone, Default)]
pub struct UserStore {
    history: HistoryIndex,
    profiles: HashMap<String, String>,
}

impl UserStore {
    pub fn new(records: &[InteractionRecord], profiles: HashMap<String, String>) -> Self {
        Self {
            history: HistoryIndex::new(records),
            profiles,
        }
    }

    /// Corpus logs and profiles of a run, plus the positive events of its
    /// feedback log.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let corpus = Corpus::load(cfg)?;
        let mut records = corpus.records.clone();
        let fb = export_feedback_dataset(&cfg.feedback_log())?;
        if fb.corrupt > 0 {
            tracing::warn!(corrupt = fb.corrupt, "skipped corrupt feedback lines");
        }
        records.extend(fb.records);
        Ok(Self::new(&records, corpus.profiles()))
    }

    /// Unknown users get an empty history and profile.
    pub fn context(&self, user: &str, prefix: &str, max_history: usize) -> UserContext {
        UserContext {
            prefix: prefix.to_string(),
            related: Vec::new(),
            history: self.history.latest(user, max_history),
            profile: self.profiles.get(user).cloned().unwrap_or_default(),
        }
    }

    pub fn observe(&mut self, record: &InteractionRecord) {
        if record.level.is_positive() {
            self.history.push(&record.user_id, record.ts, &record.query);
        }
    }
}

pub struct Service {
    snapshot: RwLock<Arc<ModelSnapshot>>,
    users: RwLock<UserStore>,
    log: Mutex<FeedbackLog>,
}

impl Service {
    /// Fails when the snapshot does not verify against its configuration.
    pub fn new(snapshot: ModelSnapshot, users: UserStore, log: FeedbackLog) -> Result<Self> {
        snapshot.verify()?;
        Ok(Self {
            snapshot: RwLock::new(Arc::new(snapshot)),
            users: RwLock::new(users),
            log: Mutex::new(log),
        })
    }

    /// Snapshot, user store and feedback log of a finished run.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let snapshot = ModelSnapshot::load(cfg)?;
        let users = UserStore::load(cfg)?;
        let log = FeedbackLog::open(&cfg.feedback_log())?;
        Self::new(snapshot, users, log)
    }

    /// The snapshot new requests will be served from.
    pub fn snapshot(&self) -> Arc<ModelSnapshot> {
        self.snapshot.read().unwrap_or_else(PoisonError::into_inner).clone()
    }

    /// Verifies `next` and makes it current. A refused swap leaves the
    /// current snapshot in place.
    pub fn swap(&self, next: ModelSnapshot) -> Result<()> {
        next.verify().map_err(ServeError::SwapRefused)?;
        *self.snapshot.write().unwrap_or_else(PoisonError::into_inner) = Arc::new(next);
        Ok(())
    }

    pub fn health(&self) -> Health {
        Health {
            ok: true,
            snapshot_hash: self.snapshot().config_hash.clone(),
        }
    }

    /// `k` defaults to the snapshot's `serve.k` and may not exceed its beam.
    pub fn suggest(&self, user: &str, prefix: &str, k: Option<usize>) -> Result<SuggestResponse> {
        self.suggest_on(&self.snapshot(), user, prefix, k)
    }

    /// Serves one request from an already pinned snapshot.
    pub fn suggest_on(&self, snapshot: &ModelSnapshot, user: &str, prefix: &str, k: Option<usize>) -> Result<SuggestResponse> {
        if prefix.is_empty() {
            return Err(ServeError::EmptyPrefix);
        }
        let max = snapshot.config.eval.beam.beam_size;
        let k = k.unwrap_or(snapshot.config.serve.k);
        if k == 0 || k > max {
            return Err(ServeError::BadK { k, max });
        }
        let ctx = self.context(user, prefix, snapshot.config.sft.limits.max_history);
        let suggestions = snapshot
            .suggest(&ctx, k)?
            .into_iter()
            .map(|(query, score)| Suggestion { query, score })
            .collect();
        Ok(SuggestResponse {
            schema: SCHEMA,
            suggestions,
        })
    }

    /// The stored-state part of a request: history and profile of `user`.
    pub fn context(&self, user: &str, prefix: &str, max_history: usize) -> UserContext {
        self.users
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .context(user, prefix, max_history)
    }

    /// Validates, logs and applies one feedback event. Returns the event as
    /// written, with its server timestamp.
    pub fn record_feedback(&self, req: FeedbackRequest) -> Result<FeedbackEvent> {
        let level: FeedbackLevel = req.level.parse()?;
        for (name, v) in [("user", &req.user), ("prefix", &req.prefix), ("query", &req.query)] {
            if v.is_empty() {
                return Err(ServeError::EmptyField(name));
            }
        }
        let mut log = self.log.lock().unwrap_or_else(PoisonError::into_inner);
        let event = log.append(FeedbackEvent {
            user: req.user,
            prefix: req.prefix,
            query: req.query,
            level,
            ts: req.ts,
            server_ts: 0,
        })?;
        // Still under the log lock, so history follows log order.
        self.users
            .write()
            .unwrap_or_else(PoisonError::into_inner)
            .observe(&event.to_record());
        Ok(event)
    }

    pub fn feedback_log_path(&self) -> std::path::PathBuf {
        self.log.lock().unwrap_or_else(PoisonError::into_inner).path().to_path_buf()
    }
}

