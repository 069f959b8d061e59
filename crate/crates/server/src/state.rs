use std::sync::{Arc, RwLock};

use oidca_core::attestation::{AttestationPolicy, AttestationVerifier};
use oidca_core::clock::Clock;
use oidca_core::delegation::{RevocationList, TrustPolicy};
use oidca_core::discovery::{build_discovery_document, DiscoveryConfig, DiscoveryDocument};
use oidca_core::jose::{Algorithm, Jwks, KeySet, SigningKey};
use oidca_core::registration::ClientRegistry;
use oidca_core::store::{FileStore, MemoryStore, Namespace, Store};
use oidca_core::token::KeyRing;
use serde_json::json;
use thiserror::Error;

use crate::audit::AuditLog;
use crate::config::ServerConfig;
use crate::ratelimit::RateLimiter;

const SIGNING_KEY_RECORD: &str = "server_signing_key";

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("store: {0}")]
    Store(#[from] oidca_core::store::StoreError),
    #[error("signing key {path}: {reason}")]
    SigningKey { path: String, reason: String },
    #[error("attestation keys {path}: {reason}")]
    AttestationKeys { path: String, reason: String },
    #[error("audit log: {0}")]
    Audit(std::io::Error),
    #[error("discovery: {0}")]
    Discovery(#[from] oidca_core::discovery::DiscoveryError),
    #[error("reference measurement: {0}")]
    Measurement(#[from] oidca_core::attestation::AttestationError),
}

/// Points in request handling reported to a [`TraceHook`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RateLimit,
    Auth,
    /// Signature verification of request artifacts or chain validation.
    Work,
}

pub type TraceHook = Arc<dyn Fn(&'static str, Stage) + Send + Sync>;

pub struct AppState {
    pub config: ServerConfig,
    pub clock: Arc<dyn Clock>,
    pub store: Arc<dyn Store>,
    pub verifier: AttestationVerifier,
    pub clients: ClientRegistry,
    pub revocations: RevocationList,
    pub audit: AuditLog,
    pub policy: TrustPolicy,
    pub discovery: DiscoveryDocument,
    pub(crate) limiter: RateLimiter,
    keys: RwLock<KeyRing>,
    trace: Option<TraceHook>,
}

impl AppState {
    pub fn build(config: ServerConfig, clock: Arc<dyn Clock>) -> Result<Self, StartupError> {
        let store: Arc<dyn Store> = match &config.data_dir {
            Some(dir) => Arc::new(FileStore::open(dir)?),
            None => Arc::new(MemoryStore::new()),
        };
        let signing_key = load_signing_key(&config, store.as_ref(), clock.now())?;

        let trusted_attestation_keys = match &config.attestation.trusted_keys {
            None => KeySet::new(),
            Some(path) => {
                let fail = |reason: String| StartupError::AttestationKeys {
                    path: path.display().to_string(),
                    reason,
                };
                let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
                let jwks: Jwks = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
                KeySet::from_jwks(&jwks).map_err(|e| fail(e.to_string()))?
            }
        };
        let mut attestation_policy = AttestationPolicy::new(trusted_attestation_keys);
        attestation_policy.freshness_window_seconds = config.attestation.freshness_window_seconds;
        attestation_policy.nonce_ttl_seconds = config.attestation.nonce_ttl_seconds;
        let verifier = AttestationVerifier::new(attestation_policy, store.clone());
        for m in &config.attestation.reference_measurements {
            verifier.register_reference_measurement(&m.provider, &m.model, &m.version, &m.digest)?;
        }

        let audit = match &config.audit_log {
            Some(path) => AuditLog::open(path).map_err(StartupError::Audit)?,
            None => AuditLog::in_memory(),
        };

        let mut policy = TrustPolicy::trusting(
            config
                .policy
                .trusted_issuers
                .iter()
                .cloned()
                .chain([config.issuer.clone()]),
        )
        .with_max_chain_length(config.policy.max_chain_length);
        policy.clock_skew_seconds = config.policy.clock_skew_seconds;
        policy.unknown_constraint_mode = config.policy.unknown_constraint_mode;

        let mut discovery = DiscoveryConfig::new(config.issuer.clone());
        discovery.attestation_enabled = config.attestation.enabled;
        discovery.capabilities_enabled = config.capabilities_enabled;
        discovery.registration_enabled = config.registration_enabled();
        discovery.delegation_enabled = true;
        discovery.revocation_enabled = true;
        let discovery = build_discovery_document(&discovery)?;

        Ok(AppState {
            limiter: RateLimiter::new(config.rate_limit.capacity, config.rate_limit.refill_window_seconds),
            clients: ClientRegistry::new(store.clone()),
            revocations: RevocationList::new(store.clone()),
            keys: RwLock::new(KeyRing::new(signing_key)),
            verifier,
            audit,
            policy,
            discovery,
            store,
            clock,
            config,
            trace: None,
        })
    }

    /// Installs a callback observing the order in which handlers reach
    /// rate limiting, authentication and cryptographic work.
    pub fn with_trace_hook(mut self, hook: TraceHook) -> Self {
        self.trace = Some(hook);
        self
    }

    pub(crate) fn trace(&self, endpoint: &'static str, stage: Stage) {
        if let Some(hook) = &self.trace {
            hook(endpoint, stage);
        }
    }

    pub fn active_key(&self) -> SigningKey {
        self.keys
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .active()
            .cloned()
            .expect("key ring always has an active key")
    }

    pub fn verification_keys(&self) -> KeySet {
        self.keys.read().unwrap_or_else(|e| e.into_inner()).verification_keys()
    }

    /// Makes `key` the signing key. Tokens signed by the previous key keep
    /// validating.
    pub fn rotate_key(&self, key: SigningKey) {
        self.keys.write().unwrap_or_else(|e| e.into_inner()).rotate(key);
    }
}

impl ServerConfig {
    pub fn registration_enabled(&self) -> bool {
        self.registration_token.is_some() || self.dev_mode
    }
}

fn load_signing_key(config: &ServerConfig, store: &dyn Store, now: i64) -> Result<SigningKey, StartupError> {
    if let Some(path) = &config.signing_key {
        let fail = |reason: String| StartupError::SigningKey {
            path: path.display().to_string(),
            reason,
        };
        let pem = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        return SigningKey::from_pem(&pem).map_err(|e| fail(e.to_string()));
    }
    let fail = |reason: String| StartupError::SigningKey {
        path: format!("store:{}/{SIGNING_KEY_RECORD}", Namespace::Keys),
        reason,
    };
    if let Some(record) = store.get(Namespace::Keys, SIGNING_KEY_RECORD, now)? {
        let pem = record["pem"].as_str().ok_or_else(|| fail("record has no pem".into()))?;
        return SigningKey::from_pem(pem).map_err(|e| fail(e.to_string()));
    }
    let key = SigningKey::generate(Algorithm::ES256).map_err(|e| fail(e.to_string()))?;
    let pem = key.to_pem().map_err(|e| fail(e.to_string()))?;
    store.put(Namespace::Keys, SIGNING_KEY_RECORD, json!({ "pem": pem }), None)?;
    tracing::info!(kid = key.kid(), "generated signing key");
    Ok(key)
}
