//! Accountability log of delegation and revocation events.
//!
//! Events are appended as JSON lines when a path is configured. The log is
//! replayed on startup to rebuild the index the revocation endpoint uses to
//! decide who may revoke a step.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use oidca_core::NumericDate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum AuditEvent {
    Delegation {
        jti: String,
        delegator: String,
        delegatee: String,
        delegatee_client_id: String,
        scope: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        purpose: Option<String>,
        timestamp: NumericDate,
    },
    Revocation {
        jti: String,
        revoked_by: String,
        timestamp: NumericDate,
    },
}

#[derive(Debug, Default)]
struct Index {
    /// step jti -> delegator subject
    delegators: HashMap<String, String>,
    /// agent instance id -> client it was issued under
    instances: HashMap<String, String>,
}

impl Index {
    fn apply(&mut self, event: &AuditEvent) {
        if let AuditEvent::Delegation {
            jti,
            delegator,
            delegatee,
            delegatee_client_id,
            ..
        } = event
        {
            self.delegators.insert(jti.clone(), delegator.clone());
            self.instances.insert(delegatee.clone(), delegatee_client_id.clone());
        }
    }
}

#[derive(Debug)]
pub struct AuditLog {
    path: Option<PathBuf>,
    inner: Mutex<(Option<File>, Index)>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        AuditLog {
            path: None,
            inner: Mutex::new((None, Index::default())),
        }
    }

    /// Opens (creating if needed) and replays the log at `path`. A torn final
    /// line from an interrupted write is skipped.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut index = Index::default();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
            let last = lines.len().saturating_sub(1);
            for (n, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<AuditEvent>(line) {
                    Ok(event) => index.apply(&event),
                    Err(_) if n == last => tracing::warn!(path = %path.display(), "ignoring torn audit record"),
                    Err(e) => {
                        return Err(std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("{}:{}: {e}", path.display(), n + 1),
                        ))
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            path: Some(path.to_owned()),
            inner: Mutex::new((Some(file), index)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record(&self, event: AuditEvent) -> std::io::Result<()> {
        let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let (file, index) = &mut *guard;
        if let Some(file) = file {
            let mut line = serde_json::to_vec(&event)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
        }
        index.apply(&event);
        tracing::info!(target: "audit", event = %serde_json::to_string(&event).unwrap_or_default());
        Ok(())
    }

    pub fn delegator_of(&self, jti: &str) -> Option<String> {
        let guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        guard.1.delegators.get(jti).cloned()
    }

    pub fn client_of_instance(&self, instance_id: &str) -> Option<String> {
        let guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        guard.1.instances.get(instance_id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delegation(jti: &str) -> AuditEvent {
        AuditEvent::Delegation {
            jti: jti.into(),
            delegator: "user_456".into(),
            delegatee: "agent_instance_789".into(),
            delegatee_client_id: "client_123".into(),
            scope: "email".into(),
            purpose: None,
            timestamp: 1,
        }
    }

    #[test]
    fn replay_rebuilds_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let log = AuditLog::open(&path).unwrap();
            log.record(delegation("s1")).unwrap();
            log.record(AuditEvent::Revocation {
                jti: "s1".into(),
                revoked_by: "user_456".into(),
                timestamp: 2,
            })
            .unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"event\":\"deleg")
            .unwrap();
        let log = AuditLog::open(&path).unwrap();
        assert_eq!(log.delegator_of("s1").as_deref(), Some("user_456"));
        assert_eq!(log.client_of_instance("agent_instance_789").as_deref(), Some("client_123"));

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"event\":\"delegation\""));
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        std::fs::write(&path, "garbage\n{\"event\":\"revocation\",\"jti\":\"a\",\"revoked_by\":\"b\",\"timestamp\":1}\n").unwrap();
        assert!(AuditLog::open(&path).is_err());
    }
}
