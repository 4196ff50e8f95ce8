//! Append-only JSONL event log, one file per session.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use topicswitch_core::eval::RatingRecord;
use topicswitch_core::runtime::ChatContext;

use crate::session::{Session, TurnRecord};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{file}:{line}: {source}")]
    Corrupt {
        file: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{file}: {reason}")]
    Inconsistent { file: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    Deleted,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        at_ms: u64,
        epsilon: f64,
        k: usize,
    },
    /// A completed turn and the context it left behind.
    Turn {
        record: TurnRecord,
        context: ChatContext,
    },
    Rated {
        at_ms: u64,
        rating: RatingRecord,
    },
    Closed {
        at_ms: u64,
        reason: CloseReason,
    },
}

#[derive(Debug, Clone)]
pub struct EventLog {
    dir: PathBuf,
}

impl EventLog {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub async fn append(&self, id: &str, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut f = tokio::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(id))
            .await?;
        f.write_all(&line).await?;
        f.flush().await
    }

    /// Every session log in the directory, ordered by id.
    pub fn read_all(&self) -> Result<Vec<(String, Vec<Event>)>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            out.push((id.to_string(), read_events(&path)?));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Sessions still open after replaying their logs.
    pub fn replay(&self) -> Result<Vec<Session>, StoreError> {
        let mut sessions = Vec::new();
        for (id, events) in self.read_all()? {
            if let Some(s) = replay_session(&id, &events).map_err(|reason| StoreError::Inconsistent {
                file: self.path(&id),
                reason,
            })? {
                sessions.push(s);
            }
        }
        Ok(sessions)
    }

    /// Every rating ever stored, closed sessions included, ordered by session id.
    pub fn ratings(&self) -> Result<Vec<RatingRecord>, StoreError> {
        Ok(self
            .read_all()?
            .into_iter()
            .flat_map(|(_, events)| events)
            .filter_map(|e| match e {
                Event::Rated { rating, .. } => Some(rating),
                _ => None,
            })
            .collect())
    }
}

/// Parses one log. A final line torn by a crash mid-write is dropped.
pub fn read_events(path: &Path) -> Result<Vec<Event>, StoreError> {
    let text = fs::read_to_string(path)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(_) if i + 1 == lines.len() && !complete => {
                tracing::warn!("{}: dropping torn final line", path.display());
            }
            Err(source) => {
                return Err(StoreError::Corrupt {
                    file: path.to_path_buf(),
                    line: i + 1,
                    source,
                })
            }
        }
    }
    Ok(events)
}

/// Rebuilds a session from its events; `None` if it was closed.
pub fn replay_session(id: &str, events: &[Event]) -> Result<Option<Session>, String> {
    let Some((Event::Created { at_ms, epsilon, k }, rest)) = events.split_first() else {
        return Err("log does not start with a created event".into());
    };
    let mut s = Session::new(id.to_string(), *at_ms, *epsilon, *k);
    for e in rest {
        match e {
            Event::Created { .. } => return Err("second created event".into()),
            Event::Turn { record, context } => {
                if record.index != s.turns.len() {
                    return Err(format!("turn {} out of order", record.index));
                }
                s.last_active_ms = record.at_ms;
                s.ctx = context.clone();
                s.turns.push(record.clone());
            }
            Event::Rated { at_ms, rating } => {
                if s.rating.is_some() {
                    return Err("second rating".into());
                }
                s.last_active_ms = *at_ms;
                s.rating = Some(rating.clone());
            }
            Event::Closed { .. } => return Ok(None),
        }
    }
    Ok(Some(s))
}
