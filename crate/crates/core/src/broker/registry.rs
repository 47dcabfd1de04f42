use std::collections::{HashMap, HashSet};

use chrono::{DateTime, SecondsFormat, Utc};
use parking_lot::RwLock;
use rusqlite::{params, Connection, ErrorCode as SqlCode, OptionalExtension};

use super::pool::{DbError, DbPool};
use crate::model::{DeviceUuid, Pid};

/// The only identity data the broker persists.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistryRecord {
    pub pid: Pid,
    pub nickname: String,
    pub email: String,
    pub uuid: DeviceUuid,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("email already registered")]
    Duplicate,
    #[error(transparent)]
    Db(#[from] DbError),
}

pub(crate) const SCHEMA: &str = "CREATE TABLE IF NOT EXISTS peers (
    pid        TEXT PRIMARY KEY,
    nickname   TEXT NOT NULL,
    email      TEXT NOT NULL UNIQUE,
    uuid       TEXT NOT NULL,
    created_at TEXT NOT NULL
)";

#[derive(Default)]
struct Cache {
    nicknames: HashMap<Pid, String>,
    /// Minted or persisted PIDs; reserved before insert so concurrent
    /// registrations never mint the same id.
    pids: HashSet<String>,
}

pub struct Registry {
    pool: DbPool,
    cache: RwLock<Cache>,
}

pub fn normalize_email(email: &str) -> String {
    email.trim().to_ascii_lowercase()
}

impl Registry {
    pub fn open(pool: DbPool) -> Result<Self, DbError> {
        let rows = pool.with_conn(|c| {
            c.execute_batch(SCHEMA)?;
            let mut stmt = c.prepare("SELECT pid, nickname FROM peers")?;
            let rows = stmt
                .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            Ok(rows)
        })?;
        let mut cache = Cache::default();
        for (pid, nick) in rows {
            if let Ok(p) = pid.parse::<Pid>() {
                cache.pids.insert(pid);
                cache.nicknames.insert(p, nick);
            }
        }
        Ok(Registry {
            pool,
            cache: RwLock::new(cache),
        })
    }

    pub fn pool(&self) -> &DbPool {
        &self.pool
    }

    /// Reserve a fresh PID via `mint`, which sees the taken set.
    pub fn reserve_pid<E>(&self, mint: impl FnOnce(&HashSet<String>) -> Result<Pid, E>) -> Result<Pid, E> {
        let mut cache = self.cache.write();
        let pid = mint(&cache.pids)?;
        cache.pids.insert(pid.to_string());
        Ok(pid)
    }

    fn release_pid(&self, pid: &Pid) {
        self.cache.write().pids.remove(pid.as_str());
    }

    /// One logical query.
    pub async fn insert(&self, record: RegistryRecord) -> Result<(), RegistryError> {
        let r = record.clone();
        let res = self
            .pool
            .query(move |c| {
                c.execute(
                    "INSERT INTO peers (pid, nickname, email, uuid, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
                    params![
                        r.pid.as_str(),
                        r.nickname,
                        normalize_email(&r.email),
                        r.uuid.to_string(),
                        r.created_at.to_rfc3339_opts(SecondsFormat::AutoSi, true)
                    ],
                )
            })
            .await;
        match res {
            Ok(_) => {
                self.cache.write().nicknames.insert(record.pid, record.nickname);
                Ok(())
            }
            Err(e) => {
                self.release_pid(&record.pid);
                match e {
                    DbError::Sqlite(rusqlite::Error::SqliteFailure(f, _)) if f.code == SqlCode::ConstraintViolation => {
                        Err(RegistryError::Duplicate)
                    }
                    other => Err(other.into()),
                }
            }
        }
    }

    /// Resolve an email or PID to a registered PID. One logical query.
    pub async fn resolve_credential(&self, credential: &str) -> Result<Option<Pid>, DbError> {
        let email = normalize_email(credential);
        let raw = credential.trim().to_owned();
        let pid: Option<String> = self
            .pool
            .query(move |c| {
                c.query_row("SELECT pid FROM peers WHERE email = ?1 OR pid = ?2", params![email, raw], |r| r.get(0))
                    .optional()
            })
            .await?;
        Ok(pid.and_then(|p| p.parse().ok()))
    }

    /// Stored device token for a PID. One logical query.
    pub async fn device_of(&self, pid: &Pid) -> Result<Option<DeviceUuid>, DbError> {
        let key = pid.to_string();
        let uuid: Option<String> = self
            .pool
            .query(move |c| c.query_row("SELECT uuid FROM peers WHERE pid = ?1", [key], |r| r.get(0)).optional())
            .await?;
        Ok(uuid.and_then(|u| u.parse().ok()))
    }

    pub fn nickname(&self, pid: &Pid) -> Option<String> {
        self.cache.read().nicknames.get(pid).cloned()
    }

    pub fn is_registered(&self, pid: &Pid) -> bool {
        self.cache.read().nicknames.contains_key(pid)
    }

    pub fn len(&self) -> usize {
        self.cache.read().nicknames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All (pid, nickname) pairs from the in-memory cache.
    pub fn directory(&self) -> Vec<(Pid, String)> {
        self.cache.read().nicknames.iter().map(|(p, n)| (p.clone(), n.clone())).collect()
    }

    /// Table and column names of the persisted schema.
    pub fn schema(&self) -> Result<Vec<(String, Vec<String>)>, DbError> {
        self.pool.with_conn(inspect_schema)
    }
}

pub(crate) fn inspect_schema(c: &Connection) -> rusqlite::Result<Vec<(String, Vec<String>)>> {
    let mut stmt = c.prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")?;
    let tables = stmt.query_map([], |r| r.get::<_, String>(0))?.collect::<rusqlite::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for t in tables {
        let mut cols = c.prepare(&format!("PRAGMA table_info({t})"))?;
        let names = cols.query_map([], |r| r.get::<_, String>(1))?.collect::<rusqlite::Result<Vec<_>>>()?;
        out.push((t, names));
    }
    Ok(out)
}
