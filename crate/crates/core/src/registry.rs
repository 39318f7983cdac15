//! Key to webhook store, persisted as an append-only JSON-lines journal.
//!
//! Each line is one record:
//! `{"op":"register","key":"w","webhook":"http://...","owner":"alice","ts":"..."}` or
//! `{"op":"unregister","key":"w","owner":"alice","ts":"..."}`.
//! Opening a journal replays it and rewrites it as a compact snapshot.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::domain::{normalize_key, validate_webhook, DomainError, Handle, Key, ServiceRegistration};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    RejectedKey(DomainError),
    #[error("key {0:?} is already registered")]
    KeyTaken(String),
    #[error(transparent)]
    InvalidWebhook(DomainError),
    #[error(transparent)]
    InvalidOwner(DomainError),
    #[error("key {0:?} is not registered")]
    NotFound(String),
    #[error("{requester} does not own key {key:?}")]
    NotOwner { key: String, requester: String },
    #[error("corrupt journal at line {line}: {reason}")]
    CorruptJournal { line: usize, reason: String },
    #[error("journal i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JournalOp {
    Register,
    Unregister,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JournalRecord {
    pub op: JournalOp,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub webhook: Option<String>,
    pub owner: String,
    pub ts: DateTime<Utc>,
}

impl JournalRecord {
    fn registered(reg: &ServiceRegistration) -> Self {
        JournalRecord {
            op: JournalOp::Register,
            key: reg.key.to_string(),
            webhook: Some(reg.webhook.clone()),
            owner: reg.owner.to_string(),
            ts: reg.registered_at,
        }
    }

    fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("journal records always serialize");
        line.push('\n');
        line
    }
}

#[derive(Debug, Default)]
pub struct RegistryStore {
    entries: BTreeMap<Key, ServiceRegistration>,
    journal_path: Option<PathBuf>,
}

pub type SharedRegistry = Arc<RwLock<RegistryStore>>;

impl RegistryStore {
    /// A store with no backing file.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays the journal at `path` (missing file means empty).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let path = path.as_ref();
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut store = Self::replay(&bytes)?;
        store.journal_path = Some(path.to_path_buf());
        Ok(store)
    }

    /// Loads and compacts the journal, then appends future mutations to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let store = Self::load(path.as_ref())?;
        let tmp = path.as_ref().with_extension("compact");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&store.snapshot())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path.as_ref())?;
        info!(path = %path.as_ref().display(), entries = store.len(), "registry opened");
        Ok(store)
    }

    /// Rebuilds a store from journal bytes.
    pub fn replay(bytes: &[u8]) -> Result<Self, RegistryError> {
        let text = std::str::from_utf8(bytes).map_err(|e| RegistryError::CorruptJournal {
            line: 1 + bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count(),
            reason: "invalid UTF-8".into(),
        })?;
        let mut store = Self::in_memory();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| RegistryError::CorruptJournal { line, reason };
            let rec: JournalRecord =
                serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
            store.apply(&rec).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(store)
    }

    fn apply(&mut self, rec: &JournalRecord) -> Result<(), RegistryError> {
        let key = normalize_key(&rec.key).map_err(RegistryError::RejectedKey)?;
        if key.as_str() != rec.key {
            return Err(RegistryError::RejectedKey(DomainError::RejectedKey(rec.key.clone())));
        }
        let owner = Handle::new(&rec.owner).map_err(RegistryError::InvalidOwner)?;
        match rec.op {
            JournalOp::Register => {
                let webhook = rec.webhook.clone().ok_or_else(|| {
                    RegistryError::InvalidWebhook(DomainError::InvalidWebhook {
                        url: String::new(),
                        reason: "register record without webhook".into(),
                    })
                })?;
                validate_webhook(&webhook).map_err(RegistryError::InvalidWebhook)?;
                if self.entries.contains_key(&key) {
                    return Err(RegistryError::KeyTaken(key.to_string()));
                }
                let reg = ServiceRegistration {
                    key: key.clone(),
                    webhook,
                    owner,
                    registered_at: rec.ts,
                };
                self.entries.insert(key, reg);
            }
            JournalOp::Unregister => {
                self.remove_checked(&key, &owner)?;
            }
        }
        Ok(())
    }

    fn remove_checked(&mut self, key: &Key, requester: &Handle) -> Result<(), RegistryError> {
        match self.entries.get(key) {
            None => Err(RegistryError::NotFound(key.to_string())),
            Some(reg) if &reg.owner != requester => Err(RegistryError::NotOwner {
                key: key.to_string(),
                requester: requester.to_string(),
            }),
            Some(_) => {
                self.entries.remove(key);
                Ok(())
            }
        }
    }

    fn append(&self, rec: &JournalRecord) -> Result<(), RegistryError> {
        if let Some(path) = &self.journal_path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(rec.to_line().as_bytes())?;
            f.sync_data()?;
        }
        Ok(())
    }

    /// Reserves `key` for `owner`, first come first served.
    pub fn register(
        &mut self,
        key: &str,
        webhook: &str,
        owner: &str,
    ) -> Result<ServiceRegistration, RegistryError> {
        self.register_at(key, webhook, owner, Utc::now())
    }

    pub fn register_at(
        &mut self,
        key: &str,
        webhook: &str,
        owner: &str,
        now: DateTime<Utc>,
    ) -> Result<ServiceRegistration, RegistryError> {
        let key = normalize_key(key).map_err(RegistryError::RejectedKey)?;
        validate_webhook(webhook).map_err(RegistryError::InvalidWebhook)?;
        let owner = Handle::new(owner).map_err(RegistryError::InvalidOwner)?;
        if self.entries.contains_key(&key) {
            return Err(RegistryError::KeyTaken(key.to_string()));
        }
        let reg = ServiceRegistration {
            key: key.clone(),
            webhook: webhook.to_string(),
            owner,
            registered_at: now.with_timezone(&Utc),
        };
        self.append(&JournalRecord::registered(&reg))?;
        self.entries.insert(key, reg.clone());
        Ok(reg)
    }

    /// Removes `key` if `requester` owns it.
    pub fn unregister(&mut self, key: &str, requester: &str) -> Result<(), RegistryError> {
        self.unregister_at(key, requester, Utc::now())
    }

    pub fn unregister_at(
        &mut self,
        key: &str,
        requester: &str,
        now: DateTime<Utc>,
    ) -> Result<(), RegistryError> {
        let key = normalize_key(key).map_err(|_| RegistryError::NotFound(key.to_string()))?;
        let requester = Handle::new(requester).map_err(RegistryError::InvalidOwner)?;
        let rec = JournalRecord {
            op: JournalOp::Unregister,
            key: key.to_string(),
            webhook: None,
            owner: requester.to_string(),
            ts: now,
        };
        // Validate before journaling so a rejected request leaves no record.
        match self.entries.get(&key) {
            None => return Err(RegistryError::NotFound(key.to_string())),
            Some(reg) if reg.owner != requester => {
                return Err(RegistryError::NotOwner {
                    key: key.to_string(),
                    requester: requester.to_string(),
                })
            }
            Some(_) => {}
        }
        self.append(&rec)?;
        self.entries.remove(&key);
        Ok(())
    }

    /// `key` must already be normalized.
    pub fn lookup(&self, key: &str) -> Option<&ServiceRegistration> {
        debug_assert!(Key::is_normalized(key), "lookup key {key:?} is not normalized");
        self.entries.get(key)
    }

    pub fn get(&self, key: &Key) -> Option<&ServiceRegistration> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ServiceRegistration> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal_path.as_deref()
    }

    /// Journal bytes holding one register record per live entry.
    pub fn snapshot(&self) -> Vec<u8> {
        self.entries
            .values()
            .map(|reg| JournalRecord::registered(reg).to_line())
            .collect::<String>()
            .into_bytes()
    }

    pub fn into_shared(self) -> SharedRegistry {
        Arc::new(RwLock::new(self))
    }
}
