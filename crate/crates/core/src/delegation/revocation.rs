use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use serde_json::json;

use crate::store::{Namespace, Store, StoreError};
use crate::NumericDate;

/// Read access to the set of revoked delegation step ids.
pub trait RevocationView {
    fn is_revoked(&self, jti: &str) -> bool;
}

/// Nothing is revoked.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoRevocations;

impl RevocationView for NoRevocations {
    fn is_revoked(&self, _jti: &str) -> bool {
        false
    }
}

impl RevocationView for HashSet<String> {
    fn is_revoked(&self, jti: &str) -> bool {
        self.contains(jti)
    }
}

impl RevocationView for BTreeSet<String> {
    fn is_revoked(&self, jti: &str) -> bool {
        self.contains(jti)
    }
}

/// Revocations persisted in the `revocations` namespace. Entries never expire.
#[derive(Clone)]
pub struct RevocationList {
    store: Arc<dyn Store>,
}

impl RevocationList {
    pub fn new(store: Arc<dyn Store>) -> Self {
        Self { store }
    }

    /// Idempotent.
    pub fn revoke_step(&self, jti: &str, now: NumericDate) -> Result<(), StoreError> {
        if self.store.get(Namespace::Revocations, jti, now)?.is_some() {
            return Ok(());
        }
        self.store
            .put(Namespace::Revocations, jti, json!({ "revoked_at": now }), None)
    }
}

impl RevocationView for RevocationList {
    /// Storage failures count as revoked.
    fn is_revoked(&self, jti: &str) -> bool {
        // Revocation records carry no expiry, so the read time is irrelevant.
        self.store
            .get(Namespace::Revocations, jti, NumericDate::MIN)
            .map(|v| v.is_some())
            .unwrap_or(true)
    }
}
