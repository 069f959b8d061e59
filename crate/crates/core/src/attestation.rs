//! Verification of EAT-format attestation evidence.
//!
//! Evidence is a compact JWS whose payload carries
//! `{iss, iat, nonce, agent_provider, agent_model, agent_version, measurement}`.
//! A verdict combines four independent checks: the signature against trusted
//! attestation keys, a server-issued single-use nonce, freshness of `iat`,
//! and the measurement digest against a registered reference value.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::claims::AttestationEvidence;
use crate::jose::{self, JoseError, KeySet, SigningKey};
use crate::store::{Namespace, Store, StoreError};
use crate::NumericDate;

pub const EAT_FORMAT: &str = "urn:ietf:params:oauth:token-type:eat";
pub const EAT_TYP: &str = "eat+jwt";
pub const DEFAULT_FRESHNESS_WINDOW_SECONDS: u64 = 300;
pub const DEFAULT_NONCE_TTL_SECONDS: u64 = 300;

#[derive(Debug, Error)]
pub enum AttestationError {
    #[error("malformed evidence: {0}")]
    MalformedEvidence(String),
    #[error("invalid digest: expected 64 lowercase hex characters")]
    InvalidDigest,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("signing failed: {0}")]
    Signing(#[from] JoseError),
    #[error("storage: {0}")]
    Store(#[from] StoreError),
}

impl AttestationError {
    pub fn code(&self) -> &'static str {
        match self {
            AttestationError::MalformedEvidence(_) => "malformed_evidence",
            AttestationError::InvalidDigest => "invalid_digest",
            AttestationError::InvalidRequest(_) => "invalid_request",
            AttestationError::Signing(_) => "signing_failure",
            AttestationError::Store(_) => "storage_io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationPolicy {
    pub trusted_attestation_keys: KeySet,
    pub freshness_window_seconds: u64,
    pub nonce_ttl_seconds: u64,
}

impl AttestationPolicy {
    pub fn new(trusted_attestation_keys: KeySet) -> Self {
        AttestationPolicy {
            trusted_attestation_keys,
            freshness_window_seconds: DEFAULT_FRESHNESS_WINDOW_SECONDS,
            nonce_ttl_seconds: DEFAULT_NONCE_TTL_SECONDS,
        }
    }
}

/// A server-minted challenge. Single use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nonce {
    pub value: String,
    pub issued_at: NumericDate,
    pub audience: String,
    pub expires_at: NumericDate,
    pub consumed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttestationStatus {
    Verified,
    Failed,
    UnsupportedFormat,
}

impl AttestationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttestationStatus::Verified => "verified",
            AttestationStatus::Failed => "failed",
            AttestationStatus::UnsupportedFormat => "unsupported_format",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    fn pass() -> Self {
        CheckResult {
            passed: true,
            detail: None,
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        CheckResult {
            passed: false,
            detail: Some(detail.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationChecks {
    pub signature: CheckResult,
    pub nonce: CheckResult,
    pub freshness: CheckResult,
    pub measurement: CheckResult,
}

impl AttestationChecks {
    pub fn all_passed(&self) -> bool {
        self.signature.passed && self.nonce.passed && self.freshness.passed && self.measurement.passed
    }

    /// Names of the checks that failed, in evaluation order.
    pub fn failed(&self) -> Vec<&'static str> {
        [
            ("signature", &self.signature),
            ("nonce", &self.nonce),
            ("freshness", &self.freshness),
            ("measurement", &self.measurement),
        ]
        .into_iter()
        .filter(|(_, c)| !c.passed)
        .map(|(name, _)| name)
        .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentBinding {
    pub provider: Option<String>,
    pub model: Option<String>,
    pub version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationResult {
    pub status: AttestationStatus,
    pub checks: AttestationChecks,
    pub agent_binding: AgentBinding,
    pub verified_at: NumericDate,
}

/// Payload of an EAT evidence token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EatClaims {
    pub iss: String,
    pub iat: NumericDate,
    pub nonce: String,
    pub agent_provider: String,
    pub agent_model: String,
    pub agent_version: String,
    pub measurement: String,
}

impl EatClaims {
    pub fn sign(&self, key: &SigningKey) -> Result<String, JoseError> {
        let payload = serde_json::to_value(self).expect("EAT claims always serialize");
        jose::sign_compact(&payload, key, Some(EAT_TYP))
    }

    /// Wraps a signed token as an `agent_attestation` evidence object.
    pub fn into_evidence(self, key: &SigningKey) -> Result<AttestationEvidence, JoseError> {
        Ok(AttestationEvidence {
            format: EAT_FORMAT.to_owned(),
            token: Some(self.sign(key)?),
            timestamp: Some(self.iat),
            extra: Default::default(),
        })
    }
}

/// Lowercase hex SHA-256 of `artifact`.
pub fn measurement_digest(artifact: &[u8]) -> String {
    hex::encode(Sha256::digest(artifact))
}

pub fn is_valid_digest(digest: &str) -> bool {
    digest.len() == 64 && digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn measurement_key(provider: &str, model: &str, version: &str) -> String {
    serde_json::to_string(&[provider, model, version]).expect("strings always serialize")
}

/// Nonce issuance, reference measurements and evidence verification over a
/// shared [`Store`].
#[derive(Clone)]
pub struct AttestationVerifier {
    policy: AttestationPolicy,
    store: Arc<dyn Store>,
}

impl AttestationVerifier {
    pub fn new(policy: AttestationPolicy, store: Arc<dyn Store>) -> Self {
        AttestationVerifier { policy, store }
    }

    pub fn policy(&self) -> &AttestationPolicy {
        &self.policy
    }

    pub fn issue_nonce(&self, agent_id: &str, now: NumericDate) -> Result<Nonce, AttestationError> {
        self.register_nonce(&crate::random_id(), agent_id, now)
    }

    /// Records a challenge minted elsewhere as outstanding for `agent_id`,
    /// e.g. when checking a fixture offline. It is consumed like any other.
    pub fn register_nonce(&self, value: &str, agent_id: &str, now: NumericDate) -> Result<Nonce, AttestationError> {
        if agent_id.is_empty() {
            return Err(AttestationError::InvalidRequest("agent_id must not be empty".into()));
        }
        if value.is_empty() {
            return Err(AttestationError::InvalidRequest("nonce must not be empty".into()));
        }
        let nonce = Nonce {
            value: value.to_owned(),
            issued_at: now,
            audience: agent_id.to_owned(),
            expires_at: now.saturating_add(self.policy.nonce_ttl_seconds as i64),
            consumed: false,
        };
        self.store.put(
            Namespace::Nonces,
            &nonce.value,
            json!({ "audience": nonce.audience, "issued_at": now }),
            Some(nonce.expires_at),
        )?;
        Ok(nonce)
    }

    /// The nonce if it is still outstanding at `now`.
    pub fn lookup_nonce(&self, value: &str, now: NumericDate) -> Result<Option<Nonce>, AttestationError> {
        let Some(record) = self.store.get(Namespace::Nonces, value, now)? else {
            return Ok(None);
        };
        let issued_at = record["issued_at"].as_i64().unwrap_or_default();
        Ok(Some(Nonce {
            value: value.to_owned(),
            issued_at,
            audience: record["audience"].as_str().unwrap_or_default().to_owned(),
            expires_at: issued_at.saturating_add(self.policy.nonce_ttl_seconds as i64),
            consumed: false,
        }))
    }

    /// Re-registration overwrites the previous digest.
    pub fn register_reference_measurement(
        &self,
        provider: &str,
        model: &str,
        version: &str,
        digest: &str,
    ) -> Result<(), AttestationError> {
        if !is_valid_digest(digest) {
            return Err(AttestationError::InvalidDigest);
        }
        self.store.put(
            Namespace::Measurements,
            &measurement_key(provider, model, version),
            json!({ "provider": provider, "model": model, "version": version, "digest": digest }),
            None,
        )?;
        Ok(())
    }

    pub fn reference_measurement(
        &self,
        provider: &str,
        model: &str,
        version: &str,
    ) -> Result<Option<String>, AttestationError> {
        let record = self.store.get(
            Namespace::Measurements,
            &measurement_key(provider, model, version),
            NumericDate::MIN,
        )?;
        Ok(record.and_then(|r| r["digest"].as_str().map(str::to_owned)))
    }

    /// Verifies `evidence` presented by `agent_id` against `expected_nonce`.
    ///
    /// `expected_nonce` is consumed on every call, whatever the outcome, so
    /// a harvested nonce cannot be used to probe the verifier. All four
    /// checks are always evaluated so a failed result names every problem;
    /// only a passing signature makes the other three meaningful.
    pub fn verify_attestation_evidence(
        &self,
        evidence: &AttestationEvidence,
        agent_id: &str,
        expected_nonce: &str,
        now: NumericDate,
    ) -> Result<AttestationResult, AttestationError> {
        let bound_to = self.store.get(Namespace::Nonces, expected_nonce, now)?;
        let fresh_nonce = self.store.consume_once(Namespace::Nonces, expected_nonce, now)?;

        if evidence.format != EAT_FORMAT {
            let skipped = || CheckResult::fail(format!("format `{}` is not supported", evidence.format));
            return Ok(AttestationResult {
                status: AttestationStatus::UnsupportedFormat,
                checks: AttestationChecks {
                    signature: skipped(),
                    nonce: skipped(),
                    freshness: skipped(),
                    measurement: skipped(),
                },
                agent_binding: AgentBinding::default(),
                verified_at: now,
            });
        }

        let token = evidence
            .token
            .as_deref()
            .ok_or_else(|| AttestationError::MalformedEvidence("EAT evidence carries no token".into()))?;
        let (_, payload) =
            jose::decode_unverified(token).map_err(|e| AttestationError::MalformedEvidence(e.to_string()))?;

        let signature = match jose::verify_compact(token, &self.policy.trusted_attestation_keys) {
            Ok(_) => CheckResult::pass(),
            Err(e) => CheckResult::fail(e.to_string()),
        };

        let text = |name: &str| payload.get(name).and_then(Value::as_str).map(str::to_owned);
        let binding = AgentBinding {
            provider: text("agent_provider"),
            model: text("agent_model"),
            version: text("agent_version"),
        };

        let nonce = match (text("nonce"), bound_to) {
            (Some(n), _) if n != expected_nonce => CheckResult::fail("evidence nonce does not match the challenge"),
            (None, _) => CheckResult::fail("evidence carries no nonce"),
            (Some(_), None) => CheckResult::fail("nonce unknown, expired or already used"),
            (Some(_), Some(record)) if record["audience"].as_str() != Some(agent_id) => {
                CheckResult::fail("nonce was issued to a different agent")
            }
            (Some(_), Some(_)) if !fresh_nonce => CheckResult::fail("nonce already used"),
            (Some(_), Some(_)) => CheckResult::pass(),
        };

        let window = self.policy.freshness_window_seconds as i64;
        let freshness = match payload.get("iat").and_then(Value::as_i64) {
            None => CheckResult::fail("evidence carries no iat"),
            Some(iat) if now.abs_diff(iat) > window as u64 => {
                CheckResult::fail(format!("iat {iat} is outside the {window} s window around {now}"))
            }
            Some(_) => CheckResult::pass(),
        };

        let measurement = match (&binding, text("measurement")) {
            (_, None) => CheckResult::fail("evidence carries no measurement"),
            (
                AgentBinding {
                    provider: Some(p),
                    model: Some(m),
                    version: Some(v),
                },
                Some(digest),
            ) => match self.reference_measurement(p, m, v)? {
                None => CheckResult::fail(format!("no reference measurement for ({p}, {m}, {v})")),
                Some(expected) if expected == digest.to_ascii_lowercase() => CheckResult::pass(),
                Some(_) => CheckResult::fail("measurement differs from the reference value"),
            },
            _ => CheckResult::fail("evidence does not identify provider, model and version"),
        };

        let checks = AttestationChecks {
            signature,
            nonce,
            freshness,
            measurement,
        };
        Ok(AttestationResult {
            status: if checks.all_passed() {
                AttestationStatus::Verified
            } else {
                AttestationStatus::Failed
            },
            checks,
            agent_binding: binding,
            verified_at: now,
        })
    }
}

/// Signs a verification result for `agent_id`.
pub fn build_attestation_response(
    issuer: &str,
    agent_id: &str,
    result: &AttestationResult,
    key: &SigningKey,
) -> Result<String, AttestationError> {
    let payload = json!({
        "iss": issuer,
        "iat": result.verified_at,
        "agent_id": agent_id,
        "status": result.status.as_str(),
        "provider": result.agent_binding.provider,
        "model": result.agent_binding.model,
        "version": result.agent_binding.version,
        "verified_at": result.verified_at,
        "checks": result.checks,
    });
    Ok(jose::sign_compact(&payload, key, Some("attestation-result+jwt"))?)
}
