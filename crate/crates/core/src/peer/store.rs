use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use rusqlite::{params, Connection, ErrorCode as SqlCode, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

use super::records::{format_ts, parse_ts, Money, PeerRecord, Quote, Rating, RecordError, Wanted, WantedStatus};
use crate::model::{DeviceUuid, GeoPoint, MsgId, Pid};
use crate::p2p::{ChatHistory, ChatMessage};

const DB_FILE: &str = "peer.db";
const IDENTITY_FILE: &str = "identity.json";

/// Reference columns such as `ratee` and `requester` hold PIDs but are not
/// foreign keys: records about peers we never met are legal.
const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS peers (
    peer_id   TEXT PRIMARY KEY,
    nickname  TEXT NOT NULL,
    last_seen TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS wanted (
    wanted_id      TEXT PRIMARY KEY,
    requester      TEXT NOT NULL,
    category       TEXT NOT NULL,
    description    TEXT NOT NULL,
    lat            REAL NOT NULL,
    lon            REAL NOT NULL,
    remote_capable INTEGER NOT NULL,
    budget_cents   INTEGER NOT NULL,
    currency       TEXT NOT NULL,
    status         TEXT NOT NULL,
    created_at     TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS quotes (
    quote_id    TEXT PRIMARY KEY,
    wanted_id   TEXT NOT NULL,
    provider    TEXT NOT NULL,
    price_cents INTEGER NOT NULL CHECK (price_cents >= 0),
    currency    TEXT NOT NULL,
    note        TEXT NOT NULL,
    received_at TEXT NOT NULL,
    UNIQUE (wanted_id, provider)
);
CREATE TABLE IF NOT EXISTS ratings (
    rating_id  TEXT PRIMARY KEY,
    ratee      TEXT NOT NULL,
    score      INTEGER NOT NULL CHECK (score BETWEEN 1 AND 5),
    comment    TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS chat_messages (
    msg_id    TEXT PRIMARY KEY,
    peer_id   TEXT NOT NULL,
    author    TEXT NOT NULL,
    body      TEXT NOT NULL,
    lamport   INTEGER NOT NULL,
    wall_time TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS quotes_by_wanted ON quotes (wanted_id);
CREATE INDEX IF NOT EXISTS ratings_by_ratee ON ratings (ratee);
CREATE INDEX IF NOT EXISTS chat_by_peer ON chat_messages (peer_id);
";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store at {0} is locked by another process")]
    Locked(PathBuf),
    #[error("storage error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("storage i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Invalid(#[from] RecordError),
    #[error("corrupt row: {0}")]
    Corrupt(String),
    #[error("no identity in this store; register first")]
    NoIdentity,
    #[error("identity file: {0}")]
    Identity(String),
}

/// Secrets and settings kept next to the database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredIdentity {
    pub uuid: DeviceUuid,
    pub pid: Pid,
    pub nickname: String,
    pub email: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
}

/// The peer's local database. One process holds it at a time.
pub struct Store {
    dir: PathBuf,
    conn: Mutex<Connection>,
}

fn corrupt(e: impl std::fmt::Display) -> rusqlite::Error {
    rusqlite::Error::ToSqlConversionFailure(e.to_string().into())
}

fn parse_col<T: std::str::FromStr>(row: &Row, idx: usize) -> rusqlite::Result<T>
where
    T::Err: std::fmt::Display,
{
    row.get::<_, String>(idx)?.parse::<T>().map_err(corrupt)
}

fn ts_col(row: &Row, idx: usize) -> rusqlite::Result<chrono::DateTime<chrono::Utc>> {
    parse_ts(&row.get::<_, String>(idx)?).map_err(corrupt)
}

fn wanted_row(row: &Row) -> rusqlite::Result<Wanted> {
    Ok(Wanted {
        wanted_id: parse_col(row, 0)?,
        requester: parse_col(row, 1)?,
        category: row.get(2)?,
        description: row.get(3)?,
        location: GeoPoint::new(row.get(4)?, row.get(5)?).map_err(corrupt)?,
        remote_capable: row.get(6)?,
        budget: Money {
            cents: row.get(7)?,
            currency: row.get(8)?,
        },
        status: parse_col(row, 9)?,
        created_at: ts_col(row, 10)?,
    })
}

fn quote_row(row: &Row) -> rusqlite::Result<Quote> {
    Ok(Quote {
        quote_id: parse_col(row, 0)?,
        wanted_id: parse_col(row, 1)?,
        provider: parse_col(row, 2)?,
        price: Money {
            cents: row.get(3)?,
            currency: row.get(4)?,
        },
        note: row.get(5)?,
        received_at: ts_col(row, 6)?,
    })
}

fn rating_row(row: &Row) -> rusqlite::Result<Rating> {
    Ok(Rating {
        rating_id: parse_col(row, 0)?,
        ratee: parse_col(row, 1)?,
        score: row.get(2)?,
        comment: row.get(3)?,
        created_at: ts_col(row, 4)?,
    })
}

fn chat_row(row: &Row) -> rusqlite::Result<ChatMessage> {
    Ok(ChatMessage {
        msg_id: parse_col(row, 0)?,
        author: parse_col(row, 1)?,
        body: row.get(2)?,
        lamport: row.get::<_, i64>(3)? as u64,
        wall_time: ts_col(row, 4)?,
    })
}

const WANTED_COLS: &str =
    "wanted_id, requester, category, description, lat, lon, remote_capable, budget_cents, currency, status, created_at";
const QUOTE_COLS: &str = "quote_id, wanted_id, provider, price_cents, currency, note, received_at";

impl Store {
    /// Open or create the store in `dir`. Idempotent.
    pub fn open(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let conn = Connection::open(dir.join(DB_FILE))?;
        let locked = |e: &rusqlite::Error| {
            matches!(e, rusqlite::Error::SqliteFailure(f, _)
                if f.code == SqlCode::DatabaseBusy || f.code == SqlCode::DatabaseLocked)
        };
        let init = conn
            .execute_batch("PRAGMA locking_mode = EXCLUSIVE; PRAGMA busy_timeout = 0;")
            // Any write takes and keeps the exclusive lock.
            .and_then(|_| conn.execute_batch(&format!("BEGIN IMMEDIATE; {SCHEMA} COMMIT;")));
        match init {
            Ok(()) => Ok(Store {
                dir,
                conn: Mutex::new(conn),
            }),
            Err(e) if locked(&e) => Err(StoreError::Locked(dir)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn table_names(&self) -> Result<Vec<String>, StoreError> {
        Ok(crate::broker::inspect_schema(&self.conn.lock())?.into_iter().map(|(t, _)| t).collect())
    }

    pub fn load_identity(&self) -> Result<StoredIdentity, StoreError> {
        let path = self.dir.join(IDENTITY_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NoIdentity),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Identity(e.to_string()))
    }

    pub fn save_identity(&self, id: &StoredIdentity) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(id).map_err(|e| StoreError::Identity(e.to_string()))?;
        let tmp = self.dir.join(format!("{IDENTITY_FILE}.tmp"));
        std::fs::write(&tmp, text)?;
        std::fs::rename(tmp, self.dir.join(IDENTITY_FILE))?;
        Ok(())
    }

    pub fn put_peer(&self, p: &PeerRecord) -> Result<(), StoreError> {
        self.conn.lock().execute(
            "INSERT INTO peers (peer_id, nickname, last_seen) VALUES (?1, ?2, ?3)
             ON CONFLICT (peer_id) DO UPDATE SET nickname = excluded.nickname, last_seen = excluded.last_seen",
            params![p.peer_id.as_str(), p.nickname, format_ts(&p.last_seen)],
        )?;
        Ok(())
    }

    pub fn get_peer(&self, pid: &Pid) -> Result<Option<PeerRecord>, StoreError> {
        Ok(self
            .conn
            .lock()
            .query_row(
                "SELECT peer_id, nickname, last_seen FROM peers WHERE peer_id = ?1",
                [pid.as_str()],
                |r| {
                    Ok(PeerRecord {
                        peer_id: parse_col(r, 0)?,
                        nickname: r.get(1)?,
                        last_seen: ts_col(r, 2)?,
                    })
                },
            )
            .optional()?)
    }

    /// Insert or replace a Wanted record.
    pub fn put_wanted(&self, w: &Wanted) -> Result<MsgId, StoreError> {
        w.validate()?;
        self.conn.lock().execute(
            &format!("INSERT OR REPLACE INTO wanted ({WANTED_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)"),
            params![
                w.wanted_id.to_string(),
                w.requester.as_str(),
                w.category,
                w.description,
                w.location.lat(),
                w.location.lon(),
                w.remote_capable,
                w.budget.cents,
                w.budget.currency,
                w.status.as_str(),
                format_ts(&w.created_at)
            ],
        )?;
        Ok(w.wanted_id)
    }

    pub fn get_wanted(&self, id: &MsgId) -> Result<Option<Wanted>, StoreError> {
        Ok(self
            .conn
            .lock()
            .query_row(
                &format!("SELECT {WANTED_COLS} FROM wanted WHERE wanted_id = ?1"),
                [id.to_string()],
                wanted_row,
            )
            .optional()?)
    }

    pub fn wanted_by(&self, requester: &Pid) -> Result<Vec<Wanted>, StoreError> {
        let c = self.conn.lock();
        let mut stmt = c.prepare(&format!(
            "SELECT {WANTED_COLS} FROM wanted WHERE requester = ?1 ORDER BY created_at, wanted_id"
        ))?;
        let rows = stmt.query_map([requester.as_str()], wanted_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    pub fn all_wanted(&self) -> Result<Vec<Wanted>, StoreError> {
        let c = self.conn.lock();
        let mut stmt = c.prepare(&format!("SELECT {WANTED_COLS} FROM wanted ORDER BY created_at, wanted_id"))?;
        let rows = stmt.query_map([], wanted_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    /// Apply a status change if the transition is legal.
    pub fn set_wanted_status(&self, id: &MsgId, next: WantedStatus) -> Result<Wanted, StoreError> {
        let mut w = self
            .get_wanted(id)?
            .ok_or_else(|| StoreError::Corrupt(format!("unknown wanted {id}")))?;
        if !w.status.can_move_to(next) {
            return Err(RecordError::Status { from: w.status, to: next }.into());
        }
        self.conn.lock().execute(
            "UPDATE wanted SET status = ?2 WHERE wanted_id = ?1",
            params![id.to_string(), next.as_str()],
        )?;
        w.status = next;
        Ok(w)
    }

    /// One quote per (wanted, provider): a newer quote replaces the older.
    pub fn put_quote(&self, q: &Quote) -> Result<MsgId, StoreError> {
        q.validate()?;
        self.conn.lock().execute(
            &format!(
                "INSERT INTO quotes ({QUOTE_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)
                 ON CONFLICT (wanted_id, provider) DO UPDATE SET
                   quote_id = excluded.quote_id, price_cents = excluded.price_cents,
                   currency = excluded.currency, note = excluded.note, received_at = excluded.received_at"
            ),
            params![
                q.quote_id.to_string(),
                q.wanted_id.to_string(),
                q.provider.as_str(),
                q.price.cents,
                q.price.currency,
                q.note,
                format_ts(&q.received_at)
            ],
        )?;
        Ok(q.quote_id)
    }

    pub fn quotes_for(&self, wanted: &MsgId) -> Result<Vec<Quote>, StoreError> {
        let c = self.conn.lock();
        let mut stmt = c.prepare(&format!("SELECT {QUOTE_COLS} FROM quotes WHERE wanted_id = ?1"))?;
        let rows = stmt.query_map([wanted.to_string()], quote_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    pub fn get_quote(&self, id: &MsgId) -> Result<Option<Quote>, StoreError> {
        Ok(self
            .conn
            .lock()
            .query_row(
                &format!("SELECT {QUOTE_COLS} FROM quotes WHERE quote_id = ?1"),
                [id.to_string()],
                quote_row,
            )
            .optional()?)
    }

    /// Returns false if a rating with this id was already cached.
    pub fn put_rating(&self, r: &Rating) -> Result<bool, StoreError> {
        r.validate()?;
        let n = self.conn.lock().execute(
            "INSERT OR IGNORE INTO ratings (rating_id, ratee, score, comment, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                r.rating_id.to_string(),
                r.ratee.as_str(),
                r.score,
                r.comment,
                format_ts(&r.created_at)
            ],
        )?;
        Ok(n == 1)
    }

    pub fn ratings_for(&self, ratee: &Pid) -> Result<Vec<Rating>, StoreError> {
        let c = self.conn.lock();
        let mut stmt = c.prepare(
            "SELECT rating_id, ratee, score, comment, created_at FROM ratings WHERE ratee = ?1 ORDER BY created_at, rating_id",
        )?;
        let rows = stmt.query_map([ratee.as_str()], rating_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    pub fn mean_rating(&self, ratee: &Pid) -> Result<Option<f64>, StoreError> {
        let scores: Vec<i64> = self.ratings_for(ratee)?.iter().map(|r| r.score).collect();
        Ok(super::market::mean(&scores))
    }

    /// Store chat lines exchanged with `peer`. Existing ids are kept.
    pub fn put_chat(&self, peer: &Pid, msgs: &[ChatMessage]) -> Result<usize, StoreError> {
        let mut c = self.conn.lock();
        let tx = c.transaction()?;
        let mut n = 0;
        {
            let mut stmt = tx.prepare(
                "INSERT OR IGNORE INTO chat_messages (msg_id, peer_id, author, body, lamport, wall_time)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for m in msgs {
                n += stmt.execute(params![
                    m.msg_id.to_string(),
                    peer.as_str(),
                    m.author.as_str(),
                    m.body,
                    m.lamport as i64,
                    format_ts(&m.wall_time)
                ])?;
            }
        }
        tx.commit()?;
        Ok(n)
    }

    pub fn chat_with(&self, peer: &Pid) -> Result<ChatHistory, StoreError> {
        let c = self.conn.lock();
        let mut stmt =
            c.prepare("SELECT msg_id, author, body, lamport, wall_time FROM chat_messages WHERE peer_id = ?1")?;
        let rows: Vec<ChatMessage> = stmt.query_map([peer.as_str()], chat_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(ChatHistory::from_messages(rows))
    }
}

impl From<StoreError> for crate::protocol::ErrorCode {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Invalid(RecordError::Status { .. }) => crate::protocol::ErrorCode::State,
            StoreError::Invalid(_) => crate::protocol::ErrorCode::Validation,
            _ => crate::protocol::ErrorCode::Internal,
        }
    }
}
