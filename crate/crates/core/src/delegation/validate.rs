use std::collections::BTreeSet;
use std::fmt;
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use super::{DelegationChain, DelegationStep, RevocationView};
use crate::jose::{self, KeySet};
use crate::scope::check_scope_reduction;
use crate::NumericDate;

/// What to do with constraint keys this implementation does not understand.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownConstraintMode {
    #[default]
    Reject,
    Ignore,
}

/// Verifier-side configuration for chain validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustPolicy {
    pub trusted_issuers: BTreeSet<String>,
    pub max_chain_length: NonZeroUsize,
    /// Scopes the first delegator is known to hold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_grant_scopes: Option<Vec<String>>,
    #[serde(default)]
    pub clock_skew_seconds: u64,
    #[serde(default)]
    pub unknown_constraint_mode: UnknownConstraintMode,
    /// Keys for individually signed steps.
    #[serde(default, skip_serializing_if = "KeySet::is_empty")]
    pub step_signing_keys: KeySet,
}

impl TrustPolicy {
    pub const DEFAULT_MAX_CHAIN_LENGTH: usize = 5;

    pub fn trusting<I, S>(issuers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TrustPolicy {
            trusted_issuers: issuers.into_iter().map(Into::into).collect(),
            max_chain_length: NonZeroUsize::new(Self::DEFAULT_MAX_CHAIN_LENGTH).unwrap(),
            root_grant_scopes: None,
            clock_skew_seconds: 0,
            unknown_constraint_mode: UnknownConstraintMode::Reject,
            step_signing_keys: KeySet::new(),
        }
    }

    /// Panics when `max` is zero.
    pub fn with_max_chain_length(mut self, max: usize) -> Self {
        self.max_chain_length = NonZeroUsize::new(max).expect("max_chain_length must be at least 1");
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
}

impl Rule {
    pub const ALL: [Rule; 7] = [Rule::R1, Rule::R2, Rule::R3, Rule::R4, Rule::R5, Rule::R6, Rule::R7];

    pub fn name(&self) -> &'static str {
        match self {
            Rule::R1 => "chronology",
            Rule::R2 => "issuer_trust",
            Rule::R3 => "linkage",
            Rule::R4 => "scope_reduction",
            Rule::R5 => "constraints",
            Rule::R6 => "signatures",
            Rule::R7 => "policy",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOutcome {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: Rule,
    pub name: String,
    pub outcome: RuleOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    /// `None` for findings about the chain as a whole.
    pub step_index: Option<usize>,
    pub detail: String,
}

/// Constraints in force for the final delegatee after folding every step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveConstraints {
    /// Earliest `delegated_at + max_duration_seconds` across the chain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expires_at: Option<NumericDate>,
    /// Further hops the final delegatee may still make.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remaining_depth: Option<u64>,
    /// Each inner list is one step's `allowed_resources`; all must admit a resource.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resource_restrictions: Vec<Vec<String>>,
    /// Unknown constraint keys skipped under [`UnknownConstraintMode::Ignore`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignored_constraints: Vec<String>,
}

impl EffectiveConstraints {
    /// True when every resource restriction admits `resource` by prefix.
    pub fn permits_resource(&self, resource: &str) -> bool {
        self.resource_restrictions
            .iter()
            .all(|allowed| allowed.iter().any(|prefix| resource.starts_with(prefix.as_str())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainValidationReport {
    pub verdict: Verdict,
    pub rule_results: Vec<RuleResult>,
    pub violations: Vec<Violation>,
    pub effective_constraints: EffectiveConstraints,
}

impl ChainValidationReport {
    pub fn outcome(&self, rule: Rule) -> RuleOutcome {
        self.rule_results
            .iter()
            .find(|r| r.rule == rule)
            .map(|r| r.outcome)
            .unwrap_or(RuleOutcome::NotApplicable)
    }

    pub fn failed_rules(&self) -> BTreeSet<Rule> {
        self.violations.iter().map(|v| v.rule).collect()
    }

    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }

    /// Records extra findings (for example token-level constraints) and
    /// recomputes the verdict.
    pub fn extend(&mut self, violations: impl IntoIterator<Item = Violation>) {
        self.violations.extend(violations);
        for result in &mut self.rule_results {
            if self.violations.iter().any(|v| v.rule == result.rule) {
                result.outcome = RuleOutcome::Fail;
            }
        }
        self.verdict = if self.violations.is_empty() {
            Verdict::Valid
        } else {
            Verdict::Invalid
        };
    }
}

fn violation(rule: Rule, step_index: Option<usize>, detail: impl Into<String>) -> Violation {
    Violation {
        rule,
        step_index,
        detail: detail.into(),
    }
}

/// Checks the constraints attached to the step at `step_index` against the
/// rest of the chain and the current time.
///
/// Constraints bind every later step: a duration limit also rejects later
/// steps delegated after it lapsed. `allowed_resources` is not checked here;
/// it only matters when a resource is accessed.
pub fn enforce_constraints(
    step: &DelegationStep,
    step_index: usize,
    chain: &DelegationChain,
    now: NumericDate,
    mode: UnknownConstraintMode,
) -> Vec<Violation> {
    let Some(constraints) = &step.constraints else {
        return Vec::new();
    };
    let mut found = Vec::new();
    if let Some(duration) = constraints.max_duration_seconds {
        let bound = step.delegated_at.saturating_add(duration as i64);
        if now > bound {
            found.push(violation(
                Rule::R5,
                Some(step_index),
                format!("delegation lapsed at {bound} (max_duration_seconds {duration}), now {now}"),
            ));
        }
        for (later_index, later) in chain.steps().iter().enumerate().skip(step_index + 1) {
            if later.delegated_at > bound {
                found.push(violation(
                    Rule::R5,
                    Some(later_index),
                    format!("delegated at {} after step {step_index} lapsed at {bound}", later.delegated_at),
                ));
            }
        }
    }
    if let Some(depth) = constraints.max_delegation_depth {
        let after = chain.len().saturating_sub(step_index + 1) as u64;
        if after > depth {
            found.push(violation(
                Rule::R5,
                Some(step_index),
                format!("{after} further delegation(s) exceed max_delegation_depth {depth}"),
            ));
        }
    }
    if mode == UnknownConstraintMode::Reject {
        for key in constraints.other.keys() {
            found.push(violation(
                Rule::R5,
                Some(step_index),
                format!("unrecognized constraint `{key}`"),
            ));
        }
    }
    found
}

fn check_step_signature(step: &DelegationStep, keys: &KeySet) -> Result<(), String> {
    let Some(signature) = &step.signature else {
        return Ok(());
    };
    let (_, payload) = jose::verify_compact(signature, keys).map_err(|e| e.to_string())?;
    if payload != step.signing_payload() {
        return Err("signature does not cover this step's contents".into());
    }
    Ok(())
}

/// Evaluates the chain rules in order and collects every violation:
///
/// 1. chronology: `delegated_at` non-decreasing and not in the future
/// 2. every `iss` is trusted
/// 3. `aud` of step N equals `sub` of step N+1
/// 4. each scope is covered by the previous step's (or the root grant)
/// 5. constraints of each step hold for later steps and for `now`
/// 6. individually signed steps verify (not applicable when none are signed)
/// 7. chain length and revocation policy
pub fn validate_delegation_chain(
    chain: &DelegationChain,
    policy: &TrustPolicy,
    now: NumericDate,
    revocations: &dyn RevocationView,
) -> ChainValidationReport {
    let steps = chain.steps();
    let skew = policy.clock_skew_seconds as i64;
    let mut violations = Vec::new();

    for (i, step) in steps.iter().enumerate() {
        if i > 0 && step.delegated_at + skew < steps[i - 1].delegated_at {
            violations.push(violation(
                Rule::R1,
                Some(i),
                format!(
                    "delegated_at {} precedes previous step's {}",
                    step.delegated_at,
                    steps[i - 1].delegated_at
                ),
            ));
        }
        if step.delegated_at > now + skew {
            violations.push(violation(
                Rule::R1,
                Some(i),
                format!("delegated_at {} is in the future (now {now})", step.delegated_at),
            ));
        }
    }

    for (i, step) in steps.iter().enumerate() {
        if !policy.trusted_issuers.contains(&step.iss) {
            violations.push(violation(Rule::R2, Some(i), format!("issuer `{}` is not trusted", step.iss)));
        }
    }

    for (i, pair) in steps.windows(2).enumerate() {
        if pair[0].aud != pair[1].sub {
            violations.push(violation(
                Rule::R3,
                Some(i + 1),
                format!("sub `{}` does not match previous aud `{}`", pair[1].sub, pair[0].aud),
            ));
        }
    }

    if let (Some(root), Some(first)) = (&policy.root_grant_scopes, steps.first()) {
        match check_scope_reduction(&root.join(" "), &first.scope) {
            Ok(excess) if excess.is_empty() => {}
            Ok(excess) => violations.push(violation(
                Rule::R4,
                Some(0),
                format!("scope not held by the original grant: {}", excess.join(" ")),
            )),
            Err(e) => violations.push(violation(Rule::R4, Some(0), e.to_string())),
        }
    }
    for (i, pair) in steps.windows(2).enumerate() {
        match check_scope_reduction(&pair[0].scope, &pair[1].scope) {
            Ok(excess) if excess.is_empty() => {}
            Ok(excess) => violations.push(violation(
                Rule::R4,
                Some(i + 1),
                format!("scope exceeds delegator's: {}", excess.join(" ")),
            )),
            Err(e) => violations.push(violation(Rule::R4, Some(i + 1), e.to_string())),
        }
    }

    for (i, step) in steps.iter().enumerate() {
        violations.extend(enforce_constraints(step, i, chain, now, policy.unknown_constraint_mode));
    }

    let any_signed = steps.iter().any(|s| s.signature.is_some());
    for (i, step) in steps.iter().enumerate() {
        if let Err(detail) = check_step_signature(step, &policy.step_signing_keys) {
            violations.push(violation(Rule::R6, Some(i), detail));
        }
    }

    if steps.len() > policy.max_chain_length.get() {
        violations.push(violation(
            Rule::R7,
            None,
            format!(
                "chain length {} exceeds max_chain_length {}",
                steps.len(),
                policy.max_chain_length
            ),
        ));
    }
    for (i, step) in steps.iter().enumerate() {
        if let Some(jti) = &step.jti {
            if revocations.is_revoked(jti) {
                violations.push(violation(Rule::R7, Some(i), format!("step `{jti}` has been revoked")));
            }
        }
    }

    let rule_results = Rule::ALL
        .iter()
        .map(|&rule| {
            let outcome = if violations.iter().any(|v| v.rule == rule) {
                RuleOutcome::Fail
            } else if rule == Rule::R6 && !any_signed {
                RuleOutcome::NotApplicable
            } else {
                RuleOutcome::Pass
            };
            RuleResult {
                rule,
                name: rule.name().to_owned(),
                outcome,
            }
        })
        .collect();

    ChainValidationReport {
        verdict: if violations.is_empty() {
            Verdict::Valid
        } else {
            Verdict::Invalid
        },
        rule_results,
        violations,
        effective_constraints: effective_constraints(chain, policy.unknown_constraint_mode),
    }
}

fn effective_constraints(chain: &DelegationChain, mode: UnknownConstraintMode) -> EffectiveConstraints {
    let mut summary = EffectiveConstraints::default();
    let len = chain.len();
    for (i, step) in chain.steps().iter().enumerate() {
        let Some(c) = &step.constraints else { continue };
        if let Some(d) = c.max_duration_seconds {
            let bound = step.delegated_at.saturating_add(d as i64);
            summary.expires_at = Some(summary.expires_at.map_or(bound, |e| e.min(bound)));
        }
        if let Some(depth) = c.max_delegation_depth {
            let used = (len - 1 - i) as u64;
            let remaining = depth.saturating_sub(used);
            summary.remaining_depth = Some(summary.remaining_depth.map_or(remaining, |r| r.min(remaining)));
        }
        if let Some(resources) = &c.allowed_resources {
            summary.resource_restrictions.push(resources.clone());
        }
        if mode == UnknownConstraintMode::Ignore {
            summary.ignored_constraints.extend(c.other.keys().cloned());
        }
    }
    summary
}
