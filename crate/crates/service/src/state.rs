//! Shared service state: models, live sessions and the event log.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};
use topicswitch_core::model::checkpoint::blob_path;
use topicswitch_core::runtime::{ChatModels, RuntimeError};

use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::session::Session;
use crate::store::{CloseReason, Event, EventLog, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Models(#[from] RuntimeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A checkpoint as loaded at startup, with digests of its two files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckpointInfo {
    pub role: &'static str,
    pub path: PathBuf,
    pub sha256: String,
    pub blob_sha256: String,
}

impl CheckpointInfo {
    pub fn compute(role: &'static str, path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            role,
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
            blob_sha256: sha256_file(&blob_path(path))?,
        })
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub type SessionSlot = Arc<AsyncMutex<Session>>;

pub struct AppState {
    pub config: ServiceConfig,
    models: Option<Arc<ChatModels>>,
    checkpoints: Vec<CheckpointInfo>,
    default_k: usize,
    log: EventLog,
    sessions: Mutex<HashMap<String, SessionSlot>>,
}

impl AppState {
    /// Loads and hashes the configured checkpoints, then replays the log.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        let models = ChatModels::load(&config.generator, &config.selector, &config.discriminator)?;
        let checkpoints = vec![
            CheckpointInfo::compute("generator", &config.generator)?,
            CheckpointInfo::compute("selector", &config.selector)?,
            CheckpointInfo::compute("discriminator", &config.discriminator)?,
        ];
        Self::new(config, Some(models), checkpoints)
    }

    /// State around already loaded models. Without models the service
    /// answers health checks but refuses new sessions and turns.
    pub fn new(
        config: ServiceConfig,
        models: Option<ChatModels>,
        checkpoints: Vec<CheckpointInfo>,
    ) -> Result<Self, ServiceError> {
        if !(0.0..=1.0).contains(&config.epsilon) {
            return Err(ServiceError::Config(format!(
                "epsilon {} outside [0, 1]",
                config.epsilon
            )));
        }
        let latents = models.as_ref().map(ChatModels::latent_count);
        let default_k = match (config.k, latents) {
            (Some(k), Some(n)) if k == 0 || k > n => {
                return Err(ServiceError::Config(format!("k {k} outside 1..={n}")));
            }
            (Some(k), _) => k,
            (None, n) => n.unwrap_or(0),
        };
        let log = EventLog::open(&config.log_dir)?;
        let now = now_ms();
        let ttl = config.session_ttl.as_millis() as u64;
        let mut sessions = HashMap::new();
        for s in log.replay()? {
            if s.idle_ms(now) > ttl {
                continue;
            }
            sessions.insert(s.id.clone(), Arc::new(AsyncMutex::new(s)));
        }
        Ok(Self {
            config,
            models: models.map(Arc::new),
            checkpoints,
            default_k,
            log,
            sessions: Mutex::new(sessions),
        })
    }

    pub fn models(&self) -> Result<Arc<ChatModels>, ApiError> {
        self.models.clone().ok_or_else(|| {
            ApiError::new(
                axum::http::StatusCode::SERVICE_UNAVAILABLE,
                "not_ready",
                "models are not loaded",
            )
        })
    }

    pub fn is_ready(&self) -> bool {
        self.models.is_some()
    }

    pub fn checkpoints(&self) -> &[CheckpointInfo] {
        &self.checkpoints
    }

    pub fn default_k(&self) -> usize {
        self.default_k
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Validates the overrides, logs the creation and registers the session.
    pub async fn create_session(&self, epsilon: Option<f64>, k: Option<usize>) -> Result<Session, ApiError> {
        let models = self.models()?;
        let epsilon = epsilon.unwrap_or(self.config.epsilon);
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(ApiError::unprocessable(
                "invalid_epsilon",
                format!("epsilon {epsilon} outside [0, 1]"),
            ));
        }
        let k = k.unwrap_or(self.default_k);
        let latents = models.latent_count();
        if k == 0 || k > latents {
            return Err(ApiError::unprocessable(
                "invalid_k",
                format!("k {k} outside 1..={latents}"),
            ));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let at_ms = now_ms();
        self.log
            .append(&id, &Event::Created { at_ms, epsilon, k })
            .await
            .map_err(ApiError::internal)?;
        let session = Session::new(id.clone(), at_ms, epsilon, k);
        self.sessions
            .lock()
            .unwrap()
            .insert(id, Arc::new(AsyncMutex::new(session.clone())));
        Ok(session)
    }

    fn slot(&self, id: &str) -> Result<SessionSlot, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Waits for the session and returns it locked.
    pub async fn lock(&self, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
        let guard = self.slot(id)?.lock_owned().await;
        self.check_live(guard).await
    }

    /// Locks the session or fails with 409 if another turn holds it.
    pub async fn try_lock(&self, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
        let guard = self.slot(id)?.try_lock_owned().map_err(|_| {
            ApiError::conflict("turn_in_progress", format!("session {id} is already processing a turn"))
        })?;
        self.check_live(guard).await
    }

    async fn check_live(&self, mut guard: OwnedMutexGuard<Session>) -> Result<OwnedMutexGuard<Session>, ApiError> {
        if guard.closed {
            return Err(ApiError::not_found(&guard.id));
        }
        if self.is_expired(&guard) {
            self.close(&mut guard, CloseReason::Expired).await?;
            return Err(ApiError::not_found(&guard.id));
        }
        Ok(guard)
    }

    fn is_expired(&self, s: &Session) -> bool {
        s.idle_ms(now_ms()) > self.config.session_ttl.as_millis() as u64
    }

    /// Marks the session closed, forgets it and logs why.
    pub async fn close(&self, s: &mut Session, reason: CloseReason) -> Result<(), ApiError> {
        s.closed = true;
        self.sessions.lock().unwrap().remove(&s.id);
        self.log
            .append(
                &s.id,
                &Event::Closed {
                    at_ms: now_ms(),
                    reason,
                },
            )
            .await
            .map_err(ApiError::internal)
    }

    /// Closes idle sessions. Sessions busy with a turn are skipped.
    pub async fn sweep_expired(&self) -> usize {
        let slots: Vec<SessionSlot> = self.sessions.lock().unwrap().values().cloned().collect();
        let mut closed = 0;
        for slot in slots {
            let Ok(mut s) = slot.try_lock_owned() else {
                continue;
            };
            if !s.closed && self.is_expired(&s) && self.close(&mut s, CloseReason::Expired).await.is_ok() {
                closed += 1;
            }
        }
        closed
    }
}
