use std::collections::HashMap;
use std::sync::RwLock;

use serde_json::Value;

use super::{Entry, Namespace, Store, StoreError, StoreRecord};
use crate::NumericDate;

#[derive(Debug, Default)]
pub struct MemoryStore {
    shards: [RwLock<HashMap<String, Entry>>; 5],
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Store for MemoryStore {
    fn put(
        &self,
        namespace: Namespace,
        key: &str,
        value: Value,
        expires_at: Option<NumericDate>,
    ) -> Result<(), StoreError> {
        self.shards[namespace.index()]
            .write()
            .unwrap()
            .insert(key.to_owned(), Entry { value, expires_at });
        Ok(())
    }

    fn get(&self, namespace: Namespace, key: &str, now: NumericDate) -> Result<Option<Value>, StoreError> {
        Ok(self.shards[namespace.index()]
            .read()
            .unwrap()
            .get(key)
            .filter(|e| e.live_at(now))
            .map(|e| e.value.clone()))
    }

    fn delete(&self, namespace: Namespace, key: &str) -> Result<(), StoreError> {
        self.shards[namespace.index()].write().unwrap().remove(key);
        Ok(())
    }

    fn consume_once(&self, namespace: Namespace, key: &str, now: NumericDate) -> Result<bool, StoreError> {
        let mut shard = self.shards[namespace.index()].write().unwrap();
        match shard.remove(key) {
            Some(entry) => Ok(entry.live_at(now)),
            None => Ok(false),
        }
    }

    fn scan(&self, namespace: Namespace, now: NumericDate) -> Result<Vec<StoreRecord>, StoreError> {
        let shard = self.shards[namespace.index()].read().unwrap();
        let mut records: Vec<StoreRecord> = shard
            .iter()
            .filter(|(_, e)| e.live_at(now))
            .map(|(key, e)| StoreRecord {
                namespace,
                key: key.clone(),
                value: e.value.clone(),
                expires_at: e.expires_at,
            })
            .collect();
        records.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(records)
    }
}
