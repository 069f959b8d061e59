use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Entry, Namespace, Store, StoreError, StoreRecord};
use crate::NumericDate;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum LogLine {
    Put {
        key: String,
        value: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expires_at: Option<NumericDate>,
    },
    Del {
        key: String,
    },
}

struct Log {
    file: File,
    lines: usize,
}

struct Shard {
    namespace: Namespace,
    log_path: PathBuf,
    snapshot_path: PathBuf,
    map: RwLock<HashMap<String, Entry>>,
    // Held by every writer, always before `map`.
    log: Mutex<Log>,
}

/// Durable store: `<dir>/<namespace>.log` holds JSON-lines operations and
/// `<dir>/<namespace>.snapshot.json` the compacted state.
pub struct FileStore {
    dir: PathBuf,
    shards: Vec<Shard>,
    compact_after: usize,
}

impl FileStore {
    pub const DEFAULT_COMPACT_AFTER: usize = 1024;

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with_compaction(dir, Self::DEFAULT_COMPACT_AFTER)
    }

    /// Compacts a namespace once its log exceeds `compact_after` lines.
    pub fn open_with_compaction(dir: impl AsRef<Path>, compact_after: usize) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let shards = Namespace::ALL
            .iter()
            .map(|&ns| Shard::open(&dir, ns))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FileStore {
            dir,
            shards,
            compact_after: compact_after.max(1),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn shard(&self, namespace: Namespace) -> &Shard {
        &self.shards[namespace.index()]
    }

    /// Writes a snapshot of every namespace and truncates the logs.
    pub fn compact(&self) -> Result<(), StoreError> {
        for shard in &self.shards {
            let mut log = shard.log.lock().unwrap();
            shard.compact(&mut log)?;
        }
        Ok(())
    }
}

impl Shard {
    fn open(dir: &Path, namespace: Namespace) -> Result<Self, StoreError> {
        let log_path = dir.join(format!("{namespace}.log"));
        let snapshot_path = dir.join(format!("{namespace}.snapshot.json"));

        let mut map: HashMap<String, Entry> = match fs::read(&snapshot_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", snapshot_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => HashMap::new(),
            Err(e) => return Err(e.into()),
        };

        let mut lines = 0;
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path)?);
            let all: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
            let last = all.len().saturating_sub(1);
            for (n, line) in all.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LogLine>(line) {
                    Ok(LogLine::Put { key, value, expires_at }) => {
                        map.insert(key, Entry { value, expires_at });
                    }
                    Ok(LogLine::Del { key }) => {
                        map.remove(&key);
                    }
                    // A torn final line from an interrupted write is dropped.
                    Err(_) if n == last => {}
                    Err(e) => {
                        return Err(StoreError::Corrupt(format!(
                            "{} line {}: {e}",
                            log_path.display(),
                            n + 1
                        )))
                    }
                }
                lines += 1;
            }
        }

        let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Shard {
            namespace,
            log_path,
            snapshot_path,
            map: RwLock::new(map),
            log: Mutex::new(Log { file, lines }),
        })
    }

    fn append(&self, log: &mut Log, line: &LogLine) -> Result<(), StoreError> {
        let mut bytes = serde_json::to_vec(line).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        bytes.push(b'\n');
        log.file.write_all(&bytes)?;
        log.file.flush()?;
        log.lines += 1;
        Ok(())
    }

    fn compact(&self, log: &mut Log) -> Result<(), StoreError> {
        let map = self.map.read().unwrap();
        let bytes = serde_json::to_vec(&*map).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        drop(map);
        let tmp = self.snapshot_path.with_extension("json.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.snapshot_path)?;
        // Replaying the old log over the new snapshot is harmless, so a crash
        // between the rename and the truncate loses nothing.
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&self.log_path)?;
        drop(file);
        log.file = OpenOptions::new().append(true).open(&self.log_path)?;
        log.lines = 0;
        Ok(())
    }

    fn maybe_compact(&self, log: &mut Log, threshold: usize) -> Result<(), StoreError> {
        if log.lines >= threshold {
            self.compact(log)?;
        }
        Ok(())
    }
}

impl Store for FileStore {
    fn put(
        &self,
        namespace: Namespace,
        key: &str,
        value: Value,
        expires_at: Option<NumericDate>,
    ) -> Result<(), StoreError> {
        let shard = self.shard(namespace);
        let mut log = shard.log.lock().unwrap();
        shard.append(
            &mut log,
            &LogLine::Put {
                key: key.to_owned(),
                value: value.clone(),
                expires_at,
            },
        )?;
        shard
            .map
            .write()
            .unwrap()
            .insert(key.to_owned(), Entry { value, expires_at });
        shard.maybe_compact(&mut log, self.compact_after)
    }

    fn get(&self, namespace: Namespace, key: &str, now: NumericDate) -> Result<Option<Value>, StoreError> {
        Ok(self
            .shard(namespace)
            .map
            .read()
            .unwrap()
            .get(key)
            .filter(|e| e.live_at(now))
            .map(|e| e.value.clone()))
    }

    fn delete(&self, namespace: Namespace, key: &str) -> Result<(), StoreError> {
        let shard = self.shard(namespace);
        let mut log = shard.log.lock().unwrap();
        if !shard.map.read().unwrap().contains_key(key) {
            return Ok(());
        }
        shard.append(&mut log, &LogLine::Del { key: key.to_owned() })?;
        shard.map.write().unwrap().remove(key);
        shard.maybe_compact(&mut log, self.compact_after)
    }

    fn consume_once(&self, namespace: Namespace, key: &str, now: NumericDate) -> Result<bool, StoreError> {
        let shard = self.shard(namespace);
        let mut log = shard.log.lock().unwrap();
        let live = match shard.map.read().unwrap().get(key) {
            None => return Ok(false),
            Some(entry) => entry.live_at(now),
        };
        shard.append(&mut log, &LogLine::Del { key: key.to_owned() })?;
        shard.map.write().unwrap().remove(key);
        shard.maybe_compact(&mut log, self.compact_after)?;
        Ok(live)
    }

    fn scan(&self, namespace: Namespace, now: NumericDate) -> Result<Vec<StoreRecord>, StoreError> {
        let shard = self.shard(namespace);
        let map = shard.map.read().unwrap();
        let mut records: Vec<StoreRecord> = map
            .iter()
            .filter(|(_, e)| e.live_at(now))
            .map(|(key, e)| StoreRecord {
                namespace: shard.namespace,
                key: key.clone(),
                value: e.value.clone(),
                expires_at: e.expires_at,
            })
            .collect();
        records.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::contract;
    use serde_json::json;
    use std::sync::Arc;

    #[test]
    fn contract() {
        let dir = tempfile::tempdir().unwrap();
        contract::put_get_delete(&FileStore::open(dir.path().join("a")).unwrap());
        contract::expiry(&FileStore::open(dir.path().join("b")).unwrap());
        contract::consume_once(&FileStore::open(dir.path().join("c")).unwrap());
        contract::concurrent_puts(Arc::new(FileStore::open(dir.path().join("d")).unwrap()));
        contract::single_winner(Arc::new(FileStore::open(dir.path().join("e")).unwrap()));
    }

    #[test]
    fn records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FileStore::open(dir.path()).unwrap();
            store.put(Namespace::Revocations, "step-abc", json!({"revoked_at": 1}), None).unwrap();
            store.put(Namespace::Nonces, "n1", json!(1), Some(50)).unwrap();
            store.put(Namespace::Nonces, "n2", json!(2), Some(500)).unwrap();
            assert!(store.consume_once(Namespace::Nonces, "n2", 10).unwrap());
        }
        let store = FileStore::open(dir.path()).unwrap();
        assert!(store.get(Namespace::Revocations, "step-abc", 100).unwrap().is_some());
        assert!(store.get(Namespace::Nonces, "n1", 10).unwrap().is_some());
        assert!(store.get(Namespace::Nonces, "n1", 60).unwrap().is_none());
        assert!(!store.consume_once(Namespace::Nonces, "n2", 10).unwrap());
    }

    #[test]
    fn compaction_preserves_state() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FileStore::open_with_compaction(dir.path(), 10).unwrap();
            for i in 0..25 {
                store.put(Namespace::Clients, &format!("c{i}"), json!(i), None).unwrap();
            }
            store.delete(Namespace::Clients, "c3").unwrap();
            let log = fs::read_to_string(dir.path().join("clients.log")).unwrap();
            assert!(log.lines().count() < 10);
            assert!(dir.path().join("clients.snapshot.json").exists());
        }
        let store = FileStore::open(dir.path()).unwrap();
        let records = store.scan(Namespace::Clients, 0).unwrap();
        assert_eq!(records.len(), 24);
        assert!(store.get(Namespace::Clients, "c3", 0).unwrap().is_none());
    }

    #[test]
    fn torn_tail_is_ignored_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FileStore::open(dir.path()).unwrap();
            store.put(Namespace::Keys, "k", json!(1), None).unwrap();
        }
        let log_path = dir.path().join("keys.log");
        let mut f = OpenOptions::new().append(true).open(&log_path).unwrap();
        f.write_all(br#"{"op":"put","key":"half"#).unwrap();
        drop(f);
        let store = FileStore::open(dir.path()).unwrap();
        assert_eq!(store.get(Namespace::Keys, "k", 0).unwrap(), Some(json!(1)));
        drop(store);

        fs::write(&log_path, "garbage\n{\"op\":\"del\",\"key\":\"k\"}\n").unwrap();
        assert!(matches!(FileStore::open(dir.path()), Err(StoreError::Corrupt(_))));
    }
}
