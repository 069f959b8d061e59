//! Agent claim vocabulary carried inside ID Tokens.
//!
//! [`parse_agent_claims`] extracts and validates the agent claims from a JWT
//! claims object; [`AgentClaims::to_json`] is its inverse. Standard OIDC
//! claims in the same object are left alone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::delegation::DelegationChain;
use crate::NumericDate;

pub const STANDARD_AGENT_TYPES: [&str; 6] = [
    "assistant",
    "retrieval",
    "coding",
    "domain_specific",
    "autonomous",
    "supervised",
];

/// Claims that must all be present for a claim set to describe an agent.
pub const REQUIRED_AGENT_CLAIMS: [&str; 4] = [
    "agent_type",
    "agent_model",
    "agent_provider",
    "agent_instance_id",
];

/// Every agent claim name this crate reads and writes.
pub const AGENT_CLAIM_NAMES: [&str; 13] = [
    "agent_type",
    "agent_model",
    "agent_version",
    "agent_provider",
    "agent_instance_id",
    "delegator_sub",
    "delegation_chain",
    "delegation_purpose",
    "delegation_constraints",
    "agent_capabilities",
    "agent_trust_level",
    "agent_attestation",
    "agent_context_id",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentTypeRejection {
    NotStandard,
    MalformedNamespace,
}

impl fmt::Display for AgentTypeRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentTypeRejection::NotStandard => f.write_str("not a standard agent type"),
            AgentTypeRejection::MalformedNamespace => {
                f.write_str("namespaced types must look like `vendor:type`")
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClaimsError {
    #[error("claim `{claim}` is malformed: {reason}")]
    MalformedClaim { claim: String, reason: String },
    #[error("invalid agent_type `{value}`: {reason}")]
    InvalidAgentType {
        value: String,
        reason: AgentTypeRejection,
    },
    #[error("invalid capability identifier `{0}`")]
    InvalidCapability(String),
    #[error("missing required agent claims: {}", .0.join(", "))]
    MissingRequiredClaim(Vec<&'static str>),
    #[error("delegator_sub `{delegator_sub}` does not match final delegation step subject `{chain_sub}`")]
    InconsistentDelegator {
        delegator_sub: String,
        chain_sub: String,
    },
}

impl ClaimsError {
    fn malformed(claim: &str, reason: impl Into<String>) -> Self {
        ClaimsError::MalformedClaim {
            claim: claim.to_owned(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ClaimsError::MalformedClaim { .. } => "malformed_claim",
            ClaimsError::InvalidAgentType { .. } => "invalid_agent_type",
            ClaimsError::InvalidCapability(_) => "invalid_capability",
            ClaimsError::MissingRequiredClaim(_) => "missing_required_claim",
            ClaimsError::InconsistentDelegator { .. } => "inconsistent_delegator",
        }
    }
}

fn is_segment(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'_' | b'.' | b'-'))
}

pub fn validate_agent_type(value: &str) -> Result<(), ClaimsError> {
    let reject = |reason| {
        Err(ClaimsError::InvalidAgentType {
            value: value.to_owned(),
            reason,
        })
    };
    match value.split_once(':') {
        None if STANDARD_AGENT_TYPES.contains(&value) => Ok(()),
        None => reject(AgentTypeRejection::NotStandard),
        Some((vendor, kind)) if is_segment(vendor) && is_segment(kind) => Ok(()),
        Some(_) => reject(AgentTypeRejection::MalformedNamespace),
    }
}

pub fn validate_capability_identifier(cap: &str) -> Result<(), ClaimsError> {
    if cap.split(':').all(is_segment) {
        Ok(())
    } else {
        Err(ClaimsError::InvalidCapability(cap.to_owned()))
    }
}

/// A validated `agent_type` value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AgentType(String);

impl AgentType {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for AgentType {
    type Err = ClaimsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        validate_agent_type(s)?;
        Ok(AgentType(s.to_owned()))
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A validated capability identifier such as `email:read`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Capability(String);

impl Capability {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Capability {
    type Err = ClaimsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        validate_capability_identifier(s)?;
        Ok(Capability(s.to_owned()))
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Constraints a delegator places on the delegatee.
///
/// Three keys are understood; anything else lands in `other` verbatim so that
/// enforcement can fail closed on it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_duration_seconds: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_resources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_delegation_depth: Option<u64>,
    #[serde(flatten)]
    pub other: BTreeMap<String, Value>,
}

impl ConstraintSet {
    pub const RECOGNIZED_KEYS: [&'static str; 3] =
        ["max_duration_seconds", "allowed_resources", "max_delegation_depth"];

    pub fn from_json(value: &Value) -> Result<Self, String> {
        if !value.is_object() {
            return Err("expected a JSON object".into());
        }
        serde_json::from_value(value.clone()).map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("constraint sets always serialize")
    }

    pub fn is_empty(&self) -> bool {
        self.max_duration_seconds.is_none()
            && self.allowed_resources.is_none()
            && self.max_delegation_depth.is_none()
            && self.other.is_empty()
    }
}

/// Evidence object from the `agent_attestation` claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttestationEvidence {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<NumericDate>,
    /// Format-specific members, kept as received.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl AttestationEvidence {
    pub fn from_json(value: &Value) -> Result<Self, String> {
        if !value.is_object() {
            return Err("expected a JSON object".into());
        }
        let evidence: AttestationEvidence =
            serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
        if evidence.format.is_empty() {
            return Err("`format` must not be empty".into());
        }
        if evidence.token.as_deref() == Some("") {
            return Err("`token` must not be empty".into());
        }
        Ok(evidence)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentClaims {
    pub agent_type: AgentType,
    pub agent_model: String,
    pub agent_version: Option<String>,
    pub agent_provider: String,
    pub agent_instance_id: String,
    pub delegator_sub: Option<String>,
    pub delegation_chain: Option<DelegationChain>,
    pub delegation_purpose: Option<String>,
    pub delegation_constraints: Option<ConstraintSet>,
    pub agent_capabilities: Option<Vec<Capability>>,
    pub agent_trust_level: Option<String>,
    pub agent_attestation: Option<AttestationEvidence>,
    pub agent_context_id: Option<String>,
    /// Unrecognized `agent_*` / `delegation_*` claims, preserved unvalidated.
    pub extensions: BTreeMap<String, Value>,
}

impl AgentClaims {
    /// Claim set with only the required members.
    pub fn new(
        agent_type: AgentType,
        agent_model: impl Into<String>,
        agent_provider: impl Into<String>,
        agent_instance_id: impl Into<String>,
    ) -> Self {
        AgentClaims {
            agent_type,
            agent_model: agent_model.into(),
            agent_version: None,
            agent_provider: agent_provider.into(),
            agent_instance_id: agent_instance_id.into(),
            delegator_sub: None,
            delegation_chain: None,
            delegation_purpose: None,
            delegation_constraints: None,
            agent_capabilities: None,
            agent_trust_level: None,
            agent_attestation: None,
            agent_context_id: None,
            extensions: BTreeMap::new(),
        }
    }

    /// Emits every present claim under its registered name.
    pub fn to_json(&self) -> Map<String, Value> {
        let mut out = Map::new();
        let mut put = |name: &str, value: Value| {
            out.insert(name.to_owned(), value);
        };
        put("agent_type", Value::String(self.agent_type.to_string()));
        put("agent_model", Value::String(self.agent_model.clone()));
        put("agent_provider", Value::String(self.agent_provider.clone()));
        put("agent_instance_id", Value::String(self.agent_instance_id.clone()));
        let strings = [
            ("agent_version", &self.agent_version),
            ("delegator_sub", &self.delegator_sub),
            ("delegation_purpose", &self.delegation_purpose),
            ("agent_trust_level", &self.agent_trust_level),
            ("agent_context_id", &self.agent_context_id),
        ];
        for (name, value) in strings {
            if let Some(v) = value {
                put(name, Value::String(v.clone()));
            }
        }
        if let Some(chain) = &self.delegation_chain {
            put("delegation_chain", chain.to_json());
        }
        if let Some(constraints) = &self.delegation_constraints {
            put("delegation_constraints", constraints.to_json());
        }
        if let Some(caps) = &self.agent_capabilities {
            put(
                "agent_capabilities",
                Value::Array(caps.iter().map(|c| Value::String(c.to_string())).collect()),
            );
        }
        if let Some(evidence) = &self.agent_attestation {
            put(
                "agent_attestation",
                serde_json::to_value(evidence).expect("evidence always serializes"),
            );
        }
        for (name, value) in &self.extensions {
            put(name, value.clone());
        }
        out
    }
}

fn optional_string(doc: &Map<String, Value>, name: &str) -> Result<Option<String>, ClaimsError> {
    match doc.get(name) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ClaimsError::malformed(name, "expected a string")),
    }
}

fn required_string(doc: &Map<String, Value>, name: &'static str) -> Result<String, ClaimsError> {
    match optional_string(doc, name)? {
        Some(s) if !s.is_empty() => Ok(s),
        Some(_) => Err(ClaimsError::malformed(name, "must not be empty")),
        None => Err(ClaimsError::MissingRequiredClaim(vec![name])),
    }
}

fn is_extension_claim(name: &str) -> bool {
    (name.starts_with("agent_") || name.starts_with("delegation_") || name.starts_with("delegator_"))
        && !AGENT_CLAIM_NAMES.contains(&name)
}

/// Extracts the agent claims from a JWT claims object.
///
/// Returns `Ok(None)` when none of the required agent claims are present,
/// meaning the token is not about an agent at all.
pub fn parse_agent_claims(doc: &Map<String, Value>) -> Result<Option<AgentClaims>, ClaimsError> {
    let missing: Vec<&'static str> = REQUIRED_AGENT_CLAIMS
        .into_iter()
        .filter(|name| !doc.contains_key(*name))
        .collect();
    if missing.len() == REQUIRED_AGENT_CLAIMS.len() {
        return Ok(None);
    }
    if !missing.is_empty() {
        return Err(ClaimsError::MissingRequiredClaim(missing));
    }

    let agent_type: AgentType = required_string(doc, "agent_type")?.parse()?;
    let mut claims = AgentClaims::new(
        agent_type,
        required_string(doc, "agent_model")?,
        required_string(doc, "agent_provider")?,
        required_string(doc, "agent_instance_id")?,
    );
    claims.agent_version = optional_string(doc, "agent_version")?;
    claims.delegator_sub = optional_string(doc, "delegator_sub")?;
    claims.delegation_purpose = optional_string(doc, "delegation_purpose")?;
    claims.agent_trust_level = optional_string(doc, "agent_trust_level")?;
    claims.agent_context_id = optional_string(doc, "agent_context_id")?;

    if let Some(value) = doc.get("delegation_chain") {
        let chain = DelegationChain::from_json(value)
            .map_err(|e| ClaimsError::malformed("delegation_chain", e.to_string()))?;
        claims.delegation_chain = Some(chain);
    }
    if let Some(value) = doc.get("delegation_constraints") {
        let constraints = ConstraintSet::from_json(value)
            .map_err(|e| ClaimsError::malformed("delegation_constraints", e))?;
        claims.delegation_constraints = Some(constraints);
    }
    if let Some(value) = doc.get("agent_capabilities") {
        let Value::Array(items) = value else {
            return Err(ClaimsError::malformed("agent_capabilities", "expected an array"));
        };
        let caps = items
            .iter()
            .map(|item| match item {
                Value::String(s) => s.parse::<Capability>(),
                _ => Err(ClaimsError::malformed(
                    "agent_capabilities",
                    "capabilities must be strings",
                )),
            })
            .collect::<Result<Vec<_>, _>>()?;
        claims.agent_capabilities = Some(caps);
    }
    if let Some(value) = doc.get("agent_attestation") {
        let evidence = AttestationEvidence::from_json(value)
            .map_err(|e| ClaimsError::malformed("agent_attestation", e))?;
        claims.agent_attestation = Some(evidence);
    }
    for (name, value) in doc {
        if is_extension_claim(name) {
            claims.extensions.insert(name.clone(), value.clone());
        }
    }

    if let (Some(delegator), Some(last)) = (
        &claims.delegator_sub,
        claims.delegation_chain.as_ref().and_then(|c| c.steps().last()),
    ) {
        if *delegator != last.sub {
            return Err(ClaimsError::InconsistentDelegator {
                delegator_sub: delegator.clone(),
                chain_sub: last.sub.clone(),
            });
        }
    }
    Ok(Some(claims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn assistant_token() -> Map<String, Value> {
        let doc = json!({
            "iss": "https://auth.example.com",
            "sub": "agent_instance_789",
            "aud": "client_123",
            "exp": 1714435200,
            "iat": 1714348800,
            "auth_time": 1714348800,
            "nonce": "n-0S6_WzA2Mj",
            "agent_type": "assistant",
            "agent_model": "gpt-4",
            "agent_version": "2025-03",
            "agent_provider": "openai.com",
            "agent_instance_id": "agent_instance_789",
            "delegator_sub": "user_456",
            "delegation_purpose": "Email management assistant",
            "agent_capabilities": ["email:read", "email:draft", "calendar:view"],
            "agent_trust_level": "verified",
            "agent_context_id": "conversation_123",
            "agent_attestation": {
                "format": "urn:ietf:params:oauth:token-type:eat",
                "token": "eyJhbGciOiJSUzI1NiIsInR5cCI6IkpXVCJ9...",
                "timestamp": 1714348800
            },
            "delegation_chain": [{
                "iss": "https://auth.example.com",
                "sub": "user_456",
                "aud": "agent_instance_789",
                "delegated_at": 1714348700,
                "scope": "email profile calendar"
            }]
        });
        doc.as_object().unwrap().clone()
    }

    #[test]
    fn parses_the_full_example_token() {
        let doc = assistant_token();
        let claims = parse_agent_claims(&doc).unwrap().unwrap();
        assert_eq!(claims.agent_type.as_str(), "assistant");
        assert_eq!(claims.agent_model, "gpt-4");
        assert_eq!(claims.agent_provider, "openai.com");
        assert_eq!(claims.delegator_sub.as_deref(), Some("user_456"));
        assert_eq!(claims.agent_capabilities.as_ref().unwrap().len(), 3);
        assert_eq!(claims.delegation_chain.as_ref().unwrap().len(), 1);

        let agent_subset: Map<String, Value> = doc
            .into_iter()
            .filter(|(k, _)| AGENT_CLAIM_NAMES.contains(&k.as_str()))
            .collect();
        assert_eq!(claims.to_json(), agent_subset);
    }

    #[test]
    fn no_agent_claims_is_not_an_error() {
        assert_eq!(parse_agent_claims(&Map::new()), Ok(None));
        let user_token = json!({"sub": "user_456", "scope": "email"});
        assert_eq!(parse_agent_claims(user_token.as_object().unwrap()), Ok(None));
    }

    #[test]
    fn partial_required_claims() {
        let doc = json!({"agent_type": "assistant"});
        assert_eq!(
            parse_agent_claims(doc.as_object().unwrap()),
            Err(ClaimsError::MissingRequiredClaim(vec![
                "agent_model",
                "agent_provider",
                "agent_instance_id"
            ]))
        );
    }

    #[test]
    fn minimal_claims_serialize_to_four_keys() {
        let claims = AgentClaims::new("coding".parse().unwrap(), "m", "p.example", "i-1");
        let json = claims.to_json();
        assert_eq!(json.len(), 4);
        let back = parse_agent_claims(&json).unwrap().unwrap();
        assert_eq!(back, claims);
    }

    #[test]
    fn wrong_json_types_are_malformed() {
        let mut doc = assistant_token();
        doc.insert("agent_version".into(), json!(3));
        assert!(matches!(
            parse_agent_claims(&doc),
            Err(ClaimsError::MalformedClaim { claim, .. }) if claim == "agent_version"
        ));

        let mut doc = assistant_token();
        doc.insert("agent_capabilities".into(), json!("email:read"));
        assert_eq!(parse_agent_claims(&doc).unwrap_err().code(), "malformed_claim");

        let mut doc = assistant_token();
        doc.insert("delegation_constraints".into(), json!({"max_duration_seconds": -5}));
        assert_eq!(parse_agent_claims(&doc).unwrap_err().code(), "malformed_claim");

        let mut doc = assistant_token();
        doc.insert("agent_attestation".into(), json!({"token": "a.b.c"}));
        assert_eq!(parse_agent_claims(&doc).unwrap_err().code(), "malformed_claim");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut doc = assistant_token();
        doc.insert("agent_type".into(), json!("Financial Advisor"));
        assert_eq!(parse_agent_claims(&doc).unwrap_err().code(), "invalid_agent_type");

        let mut doc = assistant_token();
        doc.insert("agent_capabilities".into(), json!(["email: read"]));
        assert_eq!(
            parse_agent_claims(&doc),
            Err(ClaimsError::InvalidCapability("email: read".into()))
        );
    }

    #[test]
    fn delegator_must_match_final_step() {
        let mut doc = assistant_token();
        doc.insert("delegator_sub".into(), json!("user_999"));
        assert_eq!(parse_agent_claims(&doc).unwrap_err().code(), "inconsistent_delegator");
    }

    #[test]
    fn unknown_agent_claims_are_preserved() {
        let mut doc = assistant_token();
        doc.insert("agent_runtime".into(), json!({"gpu": true}));
        doc.insert("email_verified".into(), json!(true));
        let claims = parse_agent_claims(&doc).unwrap().unwrap();
        assert_eq!(claims.extensions.len(), 1);
        assert_eq!(claims.to_json()["agent_runtime"], json!({"gpu": true}));
        assert!(!claims.to_json().contains_key("email_verified"));
    }

    #[test]
    fn agent_type_examples() {
        assert!(validate_agent_type("assistant").is_ok());
        assert!(validate_agent_type("acme:financial_advisor").is_ok());
        assert_eq!(
            validate_agent_type("Financial Advisor"),
            Err(ClaimsError::InvalidAgentType {
                value: "Financial Advisor".into(),
                reason: AgentTypeRejection::NotStandard
            })
        );
        for bad in ["acme:", ":x", "a:b:c", "Acme:x", "a :b"] {
            assert!(
                matches!(
                    validate_agent_type(bad),
                    Err(ClaimsError::InvalidAgentType { reason: AgentTypeRejection::MalformedNamespace, .. })
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn capability_examples() {
        assert!(validate_capability_identifier("email:read").is_ok());
        assert!(validate_capability_identifier("calendar:view").is_ok());
        assert!(validate_capability_identifier("email").is_ok());
        for bad in ["email: read", "Email:read", "email::read", "", ":read", "email:"] {
            assert!(validate_capability_identifier(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn constraint_set_keeps_unknown_keys() {
        let value = json!({"max_duration_seconds": 60, "geo_fence": "eu"});
        let set = ConstraintSet::from_json(&value).unwrap();
        assert_eq!(set.max_duration_seconds, Some(60));
        assert_eq!(set.other.get("geo_fence"), Some(&json!("eu")));
        assert_eq!(set.to_json(), value);
    }
}
