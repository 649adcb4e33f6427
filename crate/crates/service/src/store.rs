//! File-backed session persistence.
//!
//! One `<session_id>.json` per session. Writes go to a temporary file in
//! the same directory and are renamed over the old file, so a crash leaves
//! either the previous or the new revision on disk.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use allocrisk::sequential::{SequentialSession, SessionSnapshot};
use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub revision: u64,
    pub state: SessionSnapshot,
}

impl SessionRecord {
    pub fn session(&self) -> Result<SequentialSession, ApiError> {
        SequentialSession::from_snapshot(&self.state).map_err(|e| {
            ApiError::internal(format!("stored session {} is corrupt: {e}", self.session_id))
        })
    }
}

/// Random 128-bit token, hex encoded.
pub fn new_session_id() -> String {
    format!("{:032x}", rand::rng().random::<u128>())
}

fn valid_id(id: &str) -> bool {
    id.len() == 32 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

#[derive(Debug)]
pub struct SessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Lock serializing writers of one session.
    pub fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }

    pub fn load(&self, id: &str) -> Result<SessionRecord, ApiError> {
        if !valid_id(id) {
            return Err(ApiError::not_found(id));
        }
        let bytes = match fs::read(self.path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ApiError::not_found(id)),
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        serde_json::from_slice(&bytes)
            .map_err(|e| ApiError::internal(format!("stored session {id} is unreadable: {e}")))
    }

    pub fn save(&self, record: &SessionRecord) -> Result<(), ApiError> {
        let io = |e: std::io::Error| ApiError::internal(e.to_string());
        let json = serde_json::to_vec_pretty(record).map_err(|e| ApiError::internal(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        tmp.write_all(&json).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(self.path(&record.session_id))
            .map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Stores a new session at revision 0.
    pub fn create(&self, session: &SequentialSession) -> Result<SessionRecord, ApiError> {
        let record = SessionRecord {
            session_id: new_session_id(),
            created_at: Utc::now(),
            revision: 0,
            state: session.snapshot(),
        };
        self.save(&record)?;
        Ok(record)
    }

    /// Applies `change` if the stored revision equals `expected`, bumping
    /// the revision by one.
    pub fn update<T>(
        &self,
        id: &str,
        expected: u64,
        change: impl FnOnce(&SequentialSession) -> Result<(SequentialSession, T), ApiError>,
    ) -> Result<(SessionRecord, T), ApiError> {
        let lock = self.lock(id);
        let _guard = lock.lock().expect("session lock poisoned");
        let mut record = self.load(id)?;
        if record.revision != expected {
            return Err(ApiError::conflict(expected, record.revision));
        }
        let (next, out) = change(&record.session()?)?;
        record.revision += 1;
        record.state = next.snapshot();
        self.save(&record)?;
        Ok((record, out))
    }
}
