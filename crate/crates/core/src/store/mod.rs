//! Namespaced key/value persistence with expiry and an atomic
//! consume-once primitive.
//!
//! [`MemoryStore`] serves tests and development; [`FileStore`] keeps an
//! append-only JSON-lines log per namespace and compacts it into a snapshot.

mod file;
mod memory;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::NumericDate;

pub use file::FileStore;
pub use memory::MemoryStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Clients,
    Keys,
    Measurements,
    Nonces,
    Revocations,
}

impl Namespace {
    pub const ALL: [Namespace; 5] = [
        Namespace::Clients,
        Namespace::Keys,
        Namespace::Measurements,
        Namespace::Nonces,
        Namespace::Revocations,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Namespace::Clients => "clients",
            Namespace::Keys => "keys",
            Namespace::Measurements => "measurements",
            Namespace::Nonces => "nonces",
            Namespace::Revocations => "revocations",
        }
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("storage is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub namespace: Namespace,
    pub key: String,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires_at: Option<NumericDate>,
}

/// Records whose `expires_at` is at or before the read time behave as absent.
pub trait Store: Send + Sync {
    fn put(
        &self,
        namespace: Namespace,
        key: &str,
        value: Value,
        expires_at: Option<NumericDate>,
    ) -> Result<(), StoreError>;

    fn get(&self, namespace: Namespace, key: &str, now: NumericDate) -> Result<Option<Value>, StoreError>;

    fn delete(&self, namespace: Namespace, key: &str) -> Result<(), StoreError>;

    /// Removes a live record and returns `true`; every later or concurrent
    /// call for the same key returns `false`.
    fn consume_once(&self, namespace: Namespace, key: &str, now: NumericDate) -> Result<bool, StoreError>;

    /// Every live record in `namespace`, sorted by key.
    fn scan(&self, namespace: Namespace, now: NumericDate) -> Result<Vec<StoreRecord>, StoreError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expires_at: Option<NumericDate>,
}

impl Entry {
    fn live_at(&self, now: NumericDate) -> bool {
        self.expires_at.is_none_or(|e| now < e)
    }
}

#[cfg(test)]
pub(crate) mod contract {
    //! Behaviour every backend must share.

    use super::*;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    pub fn put_get_delete(store: &dyn Store) {
        store.put(Namespace::Clients, "c1", json!({"a": 1}), None).unwrap();
        assert_eq!(store.get(Namespace::Clients, "c1", 0).unwrap(), Some(json!({"a": 1})));
        assert_eq!(store.get(Namespace::Keys, "c1", 0).unwrap(), None);
        store.put(Namespace::Clients, "c1", json!({"a": 2}), None).unwrap();
        assert_eq!(store.get(Namespace::Clients, "c1", 0).unwrap(), Some(json!({"a": 2})));
        store.delete(Namespace::Clients, "c1").unwrap();
        assert_eq!(store.get(Namespace::Clients, "c1", 0).unwrap(), None);
    }

    pub fn expiry(store: &dyn Store) {
        store.put(Namespace::Nonces, "n", json!(1), Some(100)).unwrap();
        assert!(store.get(Namespace::Nonces, "n", 99).unwrap().is_some());
        assert!(store.get(Namespace::Nonces, "n", 100).unwrap().is_none());
        assert!(store.scan(Namespace::Nonces, 100).unwrap().is_empty());
        assert!(!store.consume_once(Namespace::Nonces, "n", 100).unwrap());
    }

    pub fn consume_once(store: &dyn Store) {
        store.put(Namespace::Nonces, "fresh", json!(1), Some(1_000)).unwrap();
        assert!(store.consume_once(Namespace::Nonces, "fresh", 10).unwrap());
        assert!(!store.consume_once(Namespace::Nonces, "fresh", 10).unwrap());
        assert!(!store.consume_once(Namespace::Nonces, "unknown", 10).unwrap());
    }

    pub fn concurrent_puts(store: Arc<dyn Store>) {
        std::thread::scope(|s| {
            for t in 0..8 {
                let store = store.clone();
                s.spawn(move || {
                    for i in 0..125 {
                        store
                            .put(Namespace::Clients, &format!("k-{t}-{i}"), json!(i), None)
                            .unwrap();
                    }
                });
            }
        });
        assert_eq!(store.scan(Namespace::Clients, 0).unwrap().len(), 1000);
    }

    pub fn single_winner(store: Arc<dyn Store>) {
        store.put(Namespace::Nonces, "contended", json!(1), None).unwrap();
        let wins = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..64 {
                s.spawn(|| {
                    if store.consume_once(Namespace::Nonces, "contended", 0).unwrap() {
                        wins.fetch_add(1, Ordering::SeqCst);
                    }
                });
            }
        });
        assert_eq!(wins.load(Ordering::SeqCst), 1);
    }
}
