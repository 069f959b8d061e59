//! Server configuration: one TOML file, with `OIDCA_*` environment variables
//! taking precedence over it.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use oidca_core::delegation::UnknownConstraintMode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("environment variable {name}: {reason}")]
    Env { name: &'static str, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateLimitConfig {
    pub capacity: u32,
    /// Seconds to refill an empty bucket completely.
    pub refill_window_seconds: u32,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        RateLimitConfig {
            capacity: 10,
            refill_window_seconds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Issuers trusted in delegation chains besides this server.
    pub trusted_issuers: Vec<String>,
    pub max_chain_length: usize,
    pub clock_skew_seconds: u64,
    pub unknown_constraint_mode: UnknownConstraintMode,
    pub token_lifetime_seconds: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            trusted_issuers: Vec::new(),
            max_chain_length: 5,
            clock_skew_seconds: 0,
            unknown_constraint_mode: UnknownConstraintMode::Reject,
            token_lifetime_seconds: oidca_core::token::DEFAULT_TOKEN_LIFETIME_SECONDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttestationConfig {
    pub enabled: bool,
    /// JWKS file with the public keys attestation evidence must be signed by.
    pub trusted_keys: Option<PathBuf>,
    pub freshness_window_seconds: u64,
    pub nonce_ttl_seconds: u64,
    /// Known-good digests loaded into the store at startup.
    pub reference_measurements: Vec<ReferenceMeasurement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceMeasurement {
    pub provider: String,
    pub model: String,
    pub version: String,
    pub digest: String,
}

impl Default for AttestationConfig {
    fn default() -> Self {
        AttestationConfig {
            enabled: true,
            trusted_keys: None,
            freshness_window_seconds: oidca_core::attestation::DEFAULT_FRESHNESS_WINDOW_SECONDS,
            nonce_ttl_seconds: oidca_core::attestation::DEFAULT_NONCE_TTL_SECONDS,
            reference_measurements: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub issuer: String,
    pub listen: SocketAddr,
    /// Directory for the file-backed store. In-memory when absent.
    pub data_dir: Option<PathBuf>,
    /// PKCS#8 PEM private key used to sign tokens. Generated at startup
    /// (and kept in the store) when absent.
    pub signing_key: Option<PathBuf>,
    /// JSON-lines audit log of delegations and revocations.
    pub audit_log: Option<PathBuf>,
    /// Bearer token that may revoke any step.
    pub admin_token: Option<String>,
    /// Initial access token required by `/register`. Registration is open
    /// only when this is absent and `dev_mode` is set.
    pub registration_token: Option<String>,
    pub dev_mode: bool,
    pub capabilities_enabled: bool,
    pub rate_limit: RateLimitConfig,
    pub policy: PolicyConfig,
    pub attestation: AttestationConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            issuer: "http://127.0.0.1:8080".into(),
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: None,
            signing_key: None,
            audit_log: None,
            admin_token: None,
            registration_token: None,
            dev_mode: false,
            capabilities_enabled: true,
            rate_limit: RateLimitConfig::default(),
            policy: PolicyConfig::default(),
            attestation: AttestationConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_owned(),
            source,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    /// Loads `path` if given, then applies environment overrides and checks
    /// the result.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => ServerConfig::default(),
        };
        config.apply_env(|name| std::env::var(name).ok())?;
        config.check()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &'static str, value: String) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::Env {
                name,
                reason: e.to_string(),
            })
        }
        if let Some(v) = var("OIDCA_ISSUER") {
            self.issuer = v;
        }
        if let Some(v) = var("OIDCA_LISTEN") {
            self.listen = parse("OIDCA_LISTEN", v)?;
        }
        if let Some(v) = var("OIDCA_DATA_DIR") {
            self.data_dir = Some(v.into());
        }
        if let Some(v) = var("OIDCA_SIGNING_KEY") {
            self.signing_key = Some(v.into());
        }
        if let Some(v) = var("OIDCA_AUDIT_LOG") {
            self.audit_log = Some(v.into());
        }
        if let Some(v) = var("OIDCA_ADMIN_TOKEN") {
            self.admin_token = Some(v);
        }
        if let Some(v) = var("OIDCA_REGISTRATION_TOKEN") {
            self.registration_token = Some(v);
        }
        if let Some(v) = var("OIDCA_DEV_MODE") {
            self.dev_mode = parse("OIDCA_DEV_MODE", v)?;
        }
        if let Some(v) = var("OIDCA_RATE_LIMIT_CAPACITY") {
            self.rate_limit.capacity = parse("OIDCA_RATE_LIMIT_CAPACITY", v)?;
        }
        if let Some(v) = var("OIDCA_RATE_LIMIT_WINDOW") {
            self.rate_limit.refill_window_seconds = parse("OIDCA_RATE_LIMIT_WINDOW", v)?;
        }
        if let Some(v) = var("OIDCA_MAX_CHAIN_LENGTH") {
            self.policy.max_chain_length = parse("OIDCA_MAX_CHAIN_LENGTH", v)?;
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.rate_limit.capacity == 0 || self.rate_limit.refill_window_seconds == 0 {
            return Err(ConfigError::Invalid("rate_limit values must be positive".into()));
        }
        if self.policy.max_chain_length == 0 {
            return Err(ConfigError::Invalid("policy.max_chain_length must be at least 1".into()));
        }
        if self.policy.token_lifetime_seconds == 0 {
            return Err(ConfigError::Invalid("policy.token_lifetime_seconds must be positive".into()));
        }
        if self.attestation.freshness_window_seconds == 0 || self.attestation.nonce_ttl_seconds == 0 {
            return Err(ConfigError::Invalid("attestation windows must be positive".into()));
        }
        Ok(())
    }
}
