use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rusqlite::Connection;
use tokio::sync::Semaphore;

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("database pool closed")]
    Closed,
    #[error("database worker failed: {0}")]
    Worker(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStats {
    pub capacity: usize,
    pub in_use: usize,
    /// Highest `in_use` ever observed.
    pub high_water: usize,
    /// Total number of slot acquisitions (one per logical query).
    pub acquisitions: u64,
}

struct Gauges {
    in_use: AtomicUsize,
    high_water: AtomicUsize,
    acquisitions: AtomicU64,
}

/// Bounded pool of database slots.
///
/// Each logical query holds one slot for its whole execution (plus the
/// configured artificial delay). Acquisitions beyond capacity wait in FIFO
/// order on the semaphore instead of failing.
#[derive(Clone)]
pub struct DbPool {
    slots: Arc<Semaphore>,
    capacity: usize,
    delay: Duration,
    gauges: Arc<Gauges>,
    conn: Arc<Mutex<Connection>>,
}

struct SlotGuard<'a>(&'a Gauges);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        self.0.in_use.fetch_sub(1, Ordering::SeqCst);
    }
}

impl DbPool {
    pub fn new(conn: Connection, capacity: usize, delay: Duration) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        DbPool {
            slots: Arc::new(Semaphore::new(capacity)),
            capacity,
            delay,
            gauges: Arc::new(Gauges {
                in_use: AtomicUsize::new(0),
                high_water: AtomicUsize::new(0),
                acquisitions: AtomicU64::new(0),
            }),
            conn: Arc::new(Mutex::new(conn)),
        }
    }

    /// Run one logical query while holding a slot.
    pub async fn query<T, F>(&self, f: F) -> Result<T, DbError>
    where
        F: FnOnce(&Connection) -> rusqlite::Result<T> + Send + 'static,
        T: Send + 'static,
    {
        let _permit = self.slots.acquire().await.map_err(|_| DbError::Closed)?;
        let now = self.gauges.in_use.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = SlotGuard(&self.gauges);
        debug_assert!(now <= self.capacity);
        self.gauges.high_water.fetch_max(now, Ordering::SeqCst);
        self.gauges.acquisitions.fetch_add(1, Ordering::SeqCst);

        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        let conn = self.conn.clone();
        tokio::task::spawn_blocking(move || f(&conn.lock()))
            .await
            .map_err(|e| DbError::Worker(e.to_string()))?
            .map_err(DbError::from)
    }

    /// Direct access for startup work (schema, cache warm-up). Does not
    /// count as a query.
    pub fn with_conn<T>(&self, f: impl FnOnce(&Connection) -> rusqlite::Result<T>) -> Result<T, DbError> {
        Ok(f(&self.conn.lock())?)
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            capacity: self.capacity,
            in_use: self.gauges.in_use.load(Ordering::SeqCst),
            high_water: self.gauges.high_water.load(Ordering::SeqCst),
            acquisitions: self.gauges.acquisitions.load(Ordering::SeqCst),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn in_use_never_exceeds_capacity() {
        let pool = DbPool::new(Connection::open_in_memory().unwrap(), 3, Duration::from_millis(5));
        let mut tasks = Vec::new();
        for _ in 0..40 {
            let p = pool.clone();
            tasks.push(tokio::spawn(async move {
                p.query(|c| c.query_row("SELECT 1", [], |r| r.get::<_, i64>(0))).await.unwrap();
                assert!(p.stats().in_use <= 3);
            }));
        }
        for t in tasks {
            t.await.unwrap();
        }
        let s = pool.stats();
        assert_eq!(s.acquisitions, 40);
        assert_eq!(s.in_use, 0);
        assert_eq!(s.high_water, 3);
    }

    #[tokio::test]
    async fn excess_acquisitions_queue() {
        // One slot, 20 ms per query: 5 queries take ~100 ms and all succeed.
        let pool = DbPool::new(Connection::open_in_memory().unwrap(), 1, Duration::from_millis(20));
        let start = std::time::Instant::now();
        let futs: Vec<_> = (0..5).map(|_| pool.query(|_| Ok(()))).collect();
        for r in futures_util::future::join_all(futs).await {
            r.unwrap();
        }
        assert!(start.elapsed() >= Duration::from_millis(95));
        assert_eq!(pool.stats().high_water, 1);
    }

    #[tokio::test]
    async fn sql_errors_release_the_slot() {
        let pool = DbPool::new(Connection::open_in_memory().unwrap(), 1, Duration::ZERO);
        assert!(pool.query(|c| c.execute("NOT SQL", [])).await.is_err());
        assert_eq!(pool.stats().in_use, 0);
        pool.query(|_| Ok(())).await.unwrap();
    }
}
