//! Delegation chains: the ordered record of who handed which scopes to whom.
//!
//! Chains are built with [`append_delegation_step`], which refuses any step
//! that would widen the delegator's scope, and checked with
//! [`validate_delegation_chain`], which evaluates all seven chain rules and
//! reports every violation it finds.

mod revocation;
mod validate;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::claims::ConstraintSet;
use crate::jose::{self, JoseError, SigningKey};
use crate::scope::{check_scope_reduction, parse_scope, ScopeError};
use crate::NumericDate;

pub use revocation::{NoRevocations, RevocationList, RevocationView};
pub use validate::{
    enforce_constraints, validate_delegation_chain, ChainValidationReport, EffectiveConstraints,
    Rule, RuleOutcome, RuleResult, TrustPolicy, UnknownConstraintMode, Verdict, Violation,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DelegationError {
    #[error("delegation chain is malformed: {0}")]
    Malformed(String),
    #[error("delegation step {index} is invalid: {reason}")]
    InvalidStep { index: usize, reason: String },
    #[error("requested scope exceeds the delegator's: {}", .0.join(" "))]
    ScopeEscalation(Vec<String>),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error("step subject `{found}` does not continue from previous audience `{expected}`")]
    Linkage { expected: String, found: String },
    #[error("step delegated at {new} precedes previous step at {previous}")]
    Chronology {
        previous: NumericDate,
        new: NumericDate,
    },
}

/// One delegation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelegationStep {
    pub iss: String,
    pub sub: String,
    pub aud: String,
    pub delegated_at: NumericDate,
    pub scope: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ConstraintSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jti: Option<String>,
    /// Optional compact JWS over [`DelegationStep::signing_payload`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
}

impl DelegationStep {
    pub fn new(
        iss: impl Into<String>,
        sub: impl Into<String>,
        aud: impl Into<String>,
        delegated_at: NumericDate,
        scope: impl Into<String>,
    ) -> Self {
        DelegationStep {
            iss: iss.into(),
            sub: sub.into(),
            aud: aud.into(),
            delegated_at,
            scope: scope.into(),
            purpose: None,
            constraints: None,
            jti: None,
            signature: None,
        }
    }

    pub fn with_purpose(mut self, purpose: impl Into<String>) -> Self {
        self.purpose = Some(purpose.into());
        self
    }

    pub fn with_constraints(mut self, constraints: ConstraintSet) -> Self {
        self.constraints = Some(constraints);
        self
    }

    pub fn with_jti(mut self, jti: impl Into<String>) -> Self {
        self.jti = Some(jti.into());
        self
    }

    /// Structural checks that do not depend on the rest of the chain.
    pub fn check(&self) -> Result<(), String> {
        for (name, value) in [("iss", &self.iss), ("sub", &self.sub), ("aud", &self.aud)] {
            if value.is_empty() {
                return Err(format!("`{name}` must not be empty"));
            }
        }
        if self.sub == self.aud {
            return Err(format!("`{}` delegates to itself", self.sub));
        }
        parse_scope(&self.scope).map_err(|e| e.to_string())?;
        if self.jti.as_deref() == Some("") {
            return Err("`jti` must not be empty".into());
        }
        Ok(())
    }

    /// The step as JSON without its signature, which is what a step signature covers.
    pub fn signing_payload(&self) -> Value {
        let mut unsigned = self.clone();
        unsigned.signature = None;
        serde_json::to_value(&unsigned).expect("steps always serialize")
    }

    pub fn sign(&mut self, key: &SigningKey) -> Result<(), JoseError> {
        self.signature = None;
        self.signature = Some(jose::sign_compact(&self.signing_payload(), key, Some("delegation-step+jwt"))?);
        Ok(())
    }
}

/// Steps ordered from the original user to the current agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelegationChain {
    steps: Vec<DelegationStep>,
}

impl DelegationChain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a chain from steps that each pass [`DelegationStep::check`].
    pub fn from_steps(steps: Vec<DelegationStep>) -> Result<Self, DelegationError> {
        for (index, step) in steps.iter().enumerate() {
            step.check()
                .map_err(|reason| DelegationError::InvalidStep { index, reason })?;
        }
        Ok(DelegationChain { steps })
    }

    pub fn from_json(value: &Value) -> Result<Self, DelegationError> {
        let Value::Array(items) = value else {
            return Err(DelegationError::Malformed("expected an array of steps".into()));
        };
        let steps = items
            .iter()
            .enumerate()
            .map(|(index, item)| {
                if !item.is_object() {
                    return Err(DelegationError::InvalidStep {
                        index,
                        reason: "expected an object".into(),
                    });
                }
                serde_json::from_value::<DelegationStep>(item.clone()).map_err(|e| {
                    DelegationError::InvalidStep {
                        index,
                        reason: e.to_string(),
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_steps(steps)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("chains always serialize")
    }

    pub fn steps(&self) -> &[DelegationStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&DelegationStep> {
        self.steps.last()
    }

    /// Mutable access for building test fixtures; bypasses all checks.
    #[doc(hidden)]
    pub fn steps_mut(&mut self) -> &mut Vec<DelegationStep> {
        &mut self.steps
    }
}

/// Extends `chain` with `new_step` after checking linkage, chronology and
/// that `delegator_scope` (what the delegator actually holds) covers the
/// step's scope. A missing `jti` is filled with a fresh random id.
pub fn append_delegation_step(
    chain: &DelegationChain,
    mut new_step: DelegationStep,
    delegator_scope: &str,
) -> Result<DelegationChain, DelegationError> {
    new_step.check().map_err(|reason| DelegationError::InvalidStep {
        index: chain.len(),
        reason,
    })?;
    if let Some(last) = chain.last() {
        if last.aud != new_step.sub {
            return Err(DelegationError::Linkage {
                expected: last.aud.clone(),
                found: new_step.sub.clone(),
            });
        }
        if new_step.delegated_at < last.delegated_at {
            return Err(DelegationError::Chronology {
                previous: last.delegated_at,
                new: new_step.delegated_at,
            });
        }
    }
    let escalated = check_scope_reduction(delegator_scope, &new_step.scope)?;
    if !escalated.is_empty() {
        return Err(DelegationError::ScopeEscalation(escalated));
    }
    if new_step.jti.is_none() {
        new_step.jti = Some(crate::random_id());
    }
    let mut steps = chain.steps.clone();
    steps.push(new_step);
    Ok(DelegationChain { steps })
}
