//! Signed agent ID Tokens: minting, validation and delegated issuance.
//!
//! Token validation and chain validation are separate calls.
//! [`validate_agent_id_token`] checks the signature, issuer, audience,
//! lifetime and agent claim syntax; [`validate_token_delegation`] then checks
//! the embedded chain under whatever [`TrustPolicy`] the relying party uses.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::claims::{parse_agent_claims, AgentClaims, ClaimsError, ConstraintSet};
use crate::delegation::{
    append_delegation_step, validate_delegation_chain, ChainValidationReport, DelegationChain, DelegationError,
    DelegationStep, RevocationView, Rule, TrustPolicy, UnknownConstraintMode, Violation,
};
use crate::jose::{self, JoseError, KeySet, SigningKey, VerifyingKey};
use crate::scope::{check_scope_reduction, parse_scope};
use crate::NumericDate;

pub const DEFAULT_TOKEN_LIFETIME_SECONDS: u64 = 3600;
pub const DEFAULT_LEEWAY_SECONDS: u64 = 60;
pub const ID_TOKEN_TYP: &str = "JWT";

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("signature verification failed: {0}")]
    BadSignature(JoseError),
    #[error("token expired at {exp} (now {now})")]
    Expired { exp: NumericDate, now: NumericDate },
    #[error("token issued at {iat} is not yet valid (now {now})")]
    NotYetValid { iat: NumericDate, now: NumericDate },
    #[error("audience {found:?} does not include `{expected}`")]
    WrongAudience { expected: String, found: Vec<String> },
    #[error("issuer `{found}` is not `{expected}`")]
    WrongIssuer { expected: String, found: String },
    #[error("invalid claims: {0}")]
    InvalidClaims(String),
    #[error(transparent)]
    Claims(#[from] ClaimsError),
    #[error("signing failed: {0}")]
    Signing(JoseError),
    #[error("requested scope exceeds the delegator's: {}", .0.join(" "))]
    ScopeEscalation(Vec<String>),
    #[error(transparent)]
    Delegation(DelegationError),
    #[error("constraint conflict: {0}")]
    ConstraintConflict(String),
    #[error("resulting delegation chain would not validate: {}", describe(.0))]
    ChainRejected(Box<ChainValidationReport>),
}

fn describe(report: &ChainValidationReport) -> String {
    report
        .violations
        .iter()
        .map(|v| format!("{}: {}", v.rule, v.detail))
        .collect::<Vec<_>>()
        .join("; ")
}

impl TokenError {
    pub fn code(&self) -> &'static str {
        match self {
            TokenError::Malformed(_) => "malformed_token",
            TokenError::BadSignature(_) => "bad_signature",
            TokenError::Expired { .. } => "expired",
            TokenError::NotYetValid { .. } => "not_yet_valid",
            TokenError::WrongAudience { .. } => "wrong_audience",
            TokenError::WrongIssuer { .. } => "wrong_issuer",
            TokenError::InvalidClaims(_) => "invalid_claims",
            TokenError::Claims(e) => e.code(),
            TokenError::Signing(_) => "signing_failure",
            TokenError::ScopeEscalation(_) => "scope_escalation",
            TokenError::Delegation(_) => "invalid_delegation",
            TokenError::ConstraintConflict(_) => "constraint_conflict",
            TokenError::ChainRejected(_) => "invalid_delegation",
        }
    }
}

impl From<DelegationError> for TokenError {
    fn from(e: DelegationError) -> Self {
        match e {
            DelegationError::ScopeEscalation(tokens) => TokenError::ScopeEscalation(tokens),
            other => TokenError::Delegation(other),
        }
    }
}

/// `aud` as either a single string or an array of strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Audience {
    One(String),
    Many(Vec<String>),
}

impl Audience {
    pub fn contains(&self, aud: &str) -> bool {
        match self {
            Audience::One(a) => a == aud,
            Audience::Many(all) => all.iter().any(|a| a == aud),
        }
    }

    pub fn to_vec(&self) -> Vec<String> {
        match self {
            Audience::One(a) => vec![a.clone()],
            Audience::Many(all) => all.clone(),
        }
    }
}

impl From<&str> for Audience {
    fn from(aud: &str) -> Self {
        Audience::One(aud.to_owned())
    }
}

impl From<String> for Audience {
    fn from(aud: String) -> Self {
        Audience::One(aud)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardClaims {
    pub iss: String,
    pub sub: String,
    pub aud: Audience,
    pub exp: NumericDate,
    pub iat: NumericDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_time: Option<NumericDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonce: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jti: Option<String>,
}

impl StandardClaims {
    pub fn check(&self) -> Result<(), TokenError> {
        for (name, value) in [("iss", &self.iss), ("sub", &self.sub)] {
            if value.is_empty() {
                return Err(TokenError::InvalidClaims(format!("`{name}` must not be empty")));
            }
        }
        if self.aud.to_vec().iter().all(String::is_empty) {
            return Err(TokenError::InvalidClaims("`aud` must not be empty".into()));
        }
        if self.exp <= self.iat {
            return Err(TokenError::InvalidClaims(format!(
                "exp {} must be after iat {}",
                self.exp, self.iat
            )));
        }
        if let Some(scope) = &self.scope {
            parse_scope(scope).map_err(|e| TokenError::InvalidClaims(format!("scope: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("standard claims always serialize") {
            Value::Object(map) => map,
            _ => unreachable!(),
        }
    }

    pub fn from_json(doc: &Map<String, Value>) -> Result<Self, TokenError> {
        let known = ["iss", "sub", "aud", "exp", "iat", "auth_time", "nonce", "scope", "jti"];
        let subset: Map<String, Value> = doc
            .iter()
            .filter(|(k, _)| known.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        serde_json::from_value(Value::Object(subset)).map_err(|e| TokenError::Malformed(e.to_string()))
    }
}

/// A signing key plus whether it is the one new tokens are signed with.
#[derive(Debug, Clone)]
pub struct SigningKeyRecord {
    pub key: SigningKey,
    pub active: bool,
}

/// Server signing keys. Exactly one is active once any key is present;
/// retired keys keep verifying tokens they signed.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    records: Vec<SigningKeyRecord>,
}

impl KeyRing {
    pub fn new(active: SigningKey) -> Self {
        KeyRing {
            records: vec![SigningKeyRecord {
                key: active,
                active: true,
            }],
        }
    }

    /// Makes `key` the active key and retires the previous one.
    pub fn rotate(&mut self, key: SigningKey) {
        for record in &mut self.records {
            record.active = false;
        }
        self.records.retain(|r| r.key.kid() != key.kid());
        self.records.push(SigningKeyRecord { key, active: true });
    }

    /// Adds a key that verifies but does not sign.
    pub fn add_retired(&mut self, key: SigningKey) {
        if self.records.iter().all(|r| r.key.kid() != key.kid()) {
            self.records.push(SigningKeyRecord { key, active: false });
        }
    }

    pub fn active(&self) -> Option<&SigningKey> {
        self.records.iter().find(|r| r.active).map(|r| &r.key)
    }

    pub fn records(&self) -> &[SigningKeyRecord] {
        &self.records
    }

    pub fn verification_keys(&self) -> KeySet {
        self.records.iter().map(|r| r.key.verifying_key()).collect()
    }

    pub fn active_verifying_keys(&self) -> Vec<VerifyingKey> {
        self.records
            .iter()
            .filter(|r| r.active)
            .map(|r| r.key.verifying_key())
            .collect()
    }
}

/// Signs the union of the standard and agent claims.
pub fn mint_agent_id_token(
    standard: &StandardClaims,
    agent: Option<&AgentClaims>,
    key: &SigningKey,
) -> Result<String, TokenError> {
    standard.check()?;
    let mut payload = standard.to_json();
    if let Some(agent) = agent {
        let agent_json = agent.to_json();
        // Re-parse so nothing is signed that a validator would reject.
        parse_agent_claims(&agent_json)?;
        for (name, value) in agent_json {
            if payload.contains_key(&name) {
                return Err(TokenError::InvalidClaims(format!("claim `{name}` given twice")));
            }
            payload.insert(name, value);
        }
    }
    jose::sign_compact(&Value::Object(payload), key, Some(ID_TOKEN_TYP)).map_err(TokenError::Signing)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationOptions {
    pub issuer: String,
    pub audience: String,
    /// Tolerance for an `iat` slightly in the future. `exp` is always exact.
    pub leeway_seconds: u64,
}

impl ValidationOptions {
    pub fn new(issuer: impl Into<String>, audience: impl Into<String>) -> Self {
        ValidationOptions {
            issuer: issuer.into(),
            audience: audience.into(),
            leeway_seconds: DEFAULT_LEEWAY_SECONDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedToken {
    pub standard: StandardClaims,
    /// `None` when the token carries no agent claims.
    pub agent: Option<AgentClaims>,
    /// The full verified payload, including claims neither struct models.
    pub payload: Map<String, Value>,
}

/// Verifies signature, issuer, audience and lifetime, then parses the agent
/// claims. Does not validate the delegation chain.
pub fn validate_agent_id_token(
    token: &str,
    options: &ValidationOptions,
    issuer_keys: &KeySet,
    now: NumericDate,
) -> Result<ValidatedToken, TokenError> {
    let (_, payload) = jose::verify_compact(token, issuer_keys).map_err(|e| match e {
        JoseError::Malformed(m) => TokenError::Malformed(m),
        other => TokenError::BadSignature(other),
    })?;
    let Value::Object(payload) = payload else {
        return Err(TokenError::Malformed("payload is not an object".into()));
    };
    let standard = StandardClaims::from_json(&payload)?;
    if standard.iss != options.issuer {
        return Err(TokenError::WrongIssuer {
            expected: options.issuer.clone(),
            found: standard.iss,
        });
    }
    if !standard.aud.contains(&options.audience) {
        return Err(TokenError::WrongAudience {
            expected: options.audience.clone(),
            found: standard.aud.to_vec(),
        });
    }
    if standard.iat > now.saturating_add(options.leeway_seconds as i64) {
        return Err(TokenError::NotYetValid {
            iat: standard.iat,
            now,
        });
    }
    if now >= standard.exp {
        return Err(TokenError::Expired {
            exp: standard.exp,
            now,
        });
    }
    let agent = parse_agent_claims(&payload)?;
    Ok(ValidatedToken {
        standard,
        agent,
        payload,
    })
}

/// Validates the token's delegation chain under `policy`, additionally
/// enforcing token-level `delegation_constraints` (as if attached to the
/// last step) and that the token's `scope` is covered by the last step.
/// Both constraint sources apply; neither overrides the other.
pub fn validate_token_delegation(
    token: &ValidatedToken,
    policy: &TrustPolicy,
    now: NumericDate,
    revocations: &dyn RevocationView,
) -> ChainValidationReport {
    let empty = DelegationChain::new();
    let agent = token.agent.as_ref();
    let chain = agent.and_then(|a| a.delegation_chain.as_ref()).unwrap_or(&empty);
    let mut report = validate_delegation_chain(chain, policy, now, revocations);

    let mut extra = Vec::new();
    let last = chain.last();
    if let (Some(scope), Some(last)) = (&token.standard.scope, last) {
        match check_scope_reduction(&last.scope, scope) {
            Ok(escalated) if escalated.is_empty() => {}
            Ok(escalated) => extra.push(Violation {
                rule: Rule::R4,
                step_index: None,
                detail: format!("token scope exceeds the final step's: {}", escalated.join(" ")),
            }),
            Err(e) => extra.push(Violation {
                rule: Rule::R4,
                step_index: None,
                detail: format!("token scope: {e}"),
            }),
        }
    }
    if let Some(constraints) = agent.and_then(|a| a.delegation_constraints.as_ref()) {
        let start = last.map_or(token.standard.iat, |s| s.delegated_at);
        if let Some(duration) = constraints.max_duration_seconds {
            let bound = start.saturating_add(duration as i64);
            if now > bound {
                extra.push(Violation {
                    rule: Rule::R5,
                    step_index: None,
                    detail: format!("token delegation_constraints lapsed at {bound}, now {now}"),
                });
            }
        }
        if policy.unknown_constraint_mode == UnknownConstraintMode::Reject {
            for key in constraints.other.keys() {
                extra.push(Violation {
                    rule: Rule::R5,
                    step_index: None,
                    detail: format!("unrecognized token constraint `{key}`"),
                });
            }
        }
    }
    if !extra.is_empty() {
        report.extend(extra);
    }
    report
}

/// Who a delegated token is issued to.
#[derive(Debug, Clone, PartialEq)]
pub struct Delegatee {
    /// Agent identity of the receiving agent; its `agent_instance_id` becomes
    /// the new step's `aud` and the token's `sub`.
    pub agent: AgentClaims,
    /// `aud` of the issued token, normally the delegatee's client id.
    pub audience: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelegationRequest {
    pub delegatee: Delegatee,
    pub scope: String,
    pub purpose: Option<String>,
    pub constraints: Option<ConstraintSet>,
    /// Explicit lifetime; must not exceed what inherited constraints allow.
    pub lifetime_seconds: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Issuer {
    pub issuer: String,
    pub key: SigningKey,
    pub default_lifetime_seconds: u64,
}

impl Issuer {
    pub fn new(issuer: impl Into<String>, key: SigningKey) -> Self {
        Issuer {
            issuer: issuer.into(),
            key,
            default_lifetime_seconds: DEFAULT_TOKEN_LIFETIME_SECONDS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DelegatedToken {
    pub token: String,
    pub standard: StandardClaims,
    pub agent: AgentClaims,
    /// The step appended for this delegation, with its assigned `jti`.
    pub step: DelegationStep,
}

/// The scope the parent token's subject holds: its `scope` claim, or else
/// the scope of the last step in its chain.
pub fn effective_scope(parent: &ValidatedToken) -> Option<String> {
    parent.standard.scope.clone().or_else(|| {
        parent
            .agent
            .as_ref()
            .and_then(|a| a.delegation_chain.as_ref())
            .and_then(|c| c.last())
            .map(|s| s.scope.clone())
    })
}

/// Issues a token to `request.delegatee` carrying the parent's chain plus
/// one new step from the parent's subject.
///
/// The new chain is validated under `policy` before signing, so every token
/// this returns validates under the same policy at `now`.
pub fn mint_delegated_token(
    parent: &ValidatedToken,
    request: &DelegationRequest,
    issuer: &Issuer,
    policy: &TrustPolicy,
    revocations: &dyn RevocationView,
    now: NumericDate,
) -> Result<DelegatedToken, TokenError> {
    let held = effective_scope(parent)
        .ok_or_else(|| TokenError::InvalidClaims("parent token carries no scope to delegate".into()))?;
    let parent_chain = parent
        .agent
        .as_ref()
        .and_then(|a| a.delegation_chain.clone())
        .unwrap_or_default();
    let delegatee_id = request.delegatee.agent.agent_instance_id.clone();

    let mut step = DelegationStep::new(
        issuer.issuer.clone(),
        parent.standard.sub.clone(),
        delegatee_id.clone(),
        now,
        request.scope.clone(),
    );
    step.purpose = request.purpose.clone();
    step.constraints = request.constraints.clone().filter(|c| !c.is_empty());
    let chain = append_delegation_step(&parent_chain, step, &held)?;
    let step = chain.last().cloned().expect("append adds a step");

    let report = validate_delegation_chain(&chain, policy, now, revocations);
    if !report.is_valid() {
        return Err(TokenError::ChainRejected(Box::new(report)));
    }

    let mut cap = issuer.default_lifetime_seconds as i64;
    let inherited = chain
        .steps()
        .iter()
        .filter_map(|s| Some((s.delegated_at, s.constraints.as_ref()?.max_duration_seconds?)))
        .chain(
            parent
                .agent
                .as_ref()
                .and_then(|a| a.delegation_constraints.as_ref())
                .and_then(|c| c.max_duration_seconds)
                .map(|d| (parent_chain.last().map_or(parent.standard.iat, |s| s.delegated_at), d)),
        );
    for (start, duration) in inherited {
        cap = cap.min(start.saturating_add(duration as i64) - now);
    }
    cap = cap.min(parent.standard.exp - now);
    let lifetime = match request.lifetime_seconds {
        Some(asked) if asked as i64 > cap => {
            return Err(TokenError::ConstraintConflict(format!(
                "requested lifetime {asked} s exceeds the {cap} s allowed by inherited constraints"
            )))
        }
        Some(asked) => asked as i64,
        None => cap,
    };
    if lifetime <= 0 {
        return Err(TokenError::ConstraintConflict(
            "inherited constraints leave no remaining lifetime".into(),
        ));
    }

    let standard = StandardClaims {
        iss: issuer.issuer.clone(),
        sub: delegatee_id,
        aud: Audience::One(request.delegatee.audience.clone()),
        exp: now + lifetime,
        iat: now,
        auth_time: None,
        nonce: None,
        scope: Some(request.scope.clone()),
        jti: Some(crate::random_id()),
    };
    let mut agent = request.delegatee.agent.clone();
    agent.delegator_sub = Some(parent.standard.sub.clone());
    agent.delegation_chain = Some(chain);
    agent.delegation_purpose = request.purpose.clone();
    agent.delegation_constraints = request.constraints.clone().filter(|c| !c.is_empty());
    let token = mint_agent_id_token(&standard, Some(&agent), &issuer.key)?;
    Ok(DelegatedToken {
        token,
        standard,
        agent,
        step,
    })
}
