//! WebAssembly bindings for `www/index.html`. Every export takes and returns
//! strings so the page needs no generated glue beyond wasm-bindgen's.

use oidca_core::claims::parse_agent_claims;
use oidca_core::delegation::{validate_delegation_chain, DelegationChain, NoRevocations, TrustPolicy};
use oidca_core::jose;
use oidca_core::scope::{check_scope_reduction, parse_scope};
use oidca_core::NumericDate;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn chain_from(input: &str) -> Result<DelegationChain, String> {
    let input = input.trim();
    let value = if jose::is_compact_shape(input) {
        jose::decode_unverified(input).map_err(|e| e.to_string())?.1
    } else {
        serde_json::from_str(input).map_err(|e| format!("not JSON: {e}"))?
    };
    let chain = match value.get("delegation_chain") {
        Some(chain) => chain.clone(),
        None => value,
    };
    DelegationChain::from_json(&chain).map_err(|e| e.to_string())
}

/// Validates a chain (bare array, object with `delegation_chain`, or compact
/// token) under a policy trusting `trusted_issuers` (space separated). When
/// empty, the first step's issuer is trusted.
pub fn inspect_chain_json(input: &str, trusted_issuers: &str, max_chain_length: usize, now: NumericDate) -> Result<Value, String> {
    let chain = chain_from(input)?;
    let mut issuers: Vec<String> = trusted_issuers.split_whitespace().map(str::to_owned).collect();
    if issuers.is_empty() {
        issuers.extend(chain.steps().first().map(|s| s.iss.clone()));
    }
    if max_chain_length == 0 {
        return Err("max chain length must be at least 1".into());
    }
    let policy = TrustPolicy::trusting(issuers).with_max_chain_length(max_chain_length);
    let report = validate_delegation_chain(&chain, &policy, now, &NoRevocations);
    Ok(json!({ "steps": chain.to_json(), "report": report }))
}

/// Which requested scope tokens the held scope does not cover.
pub fn check_scope_json(held: &str, requested: &str) -> Result<Value, String> {
    let escalated = check_scope_reduction(held, requested).map_err(|e| e.to_string())?;
    let requested_tokens = parse_scope(requested).map_err(|e| e.to_string())?;
    let covered: Vec<&str> = requested_tokens
        .iter()
        .copied()
        .filter(|t| !escalated.iter().any(|e| e == t))
        .collect();
    Ok(json!({
        "allowed": escalated.is_empty(),
        "covered": covered,
        "escalated": escalated,
    }))
}

/// Decodes a token without verifying it and checks the agent claims it
/// carries.
pub fn decode_token_json(token: &str) -> Result<Value, String> {
    let (header, claims) = jose::decode_unverified(token.trim()).map_err(|e| e.to_string())?;
    let agent = match claims.as_object().map(parse_agent_claims) {
        Some(Ok(Some(agent))) => json!({
            "present": true,
            "valid": true,
            "agent_type": agent.agent_type.as_str(),
            "agent_instance_id": agent.agent_instance_id,
            "chain_length": agent.delegation_chain.as_ref().map_or(0, |c| c.len()),
        }),
        Some(Ok(None)) => json!({ "present": false }),
        Some(Err(e)) => json!({ "present": true, "valid": false, "error": e.to_string(), "code": e.code() }),
        None => json!({ "present": false }),
    };
    Ok(json!({
        "header": header,
        "claims": claims,
        "agent": agent,
        "signature_checked": false,
    }))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsError> {
    result
        .map(|v| serde_json::to_string_pretty(&v).expect("values serialize"))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn inspect_chain(input: &str, trusted_issuers: &str, max_chain_length: usize, now: f64) -> Result<String, JsError> {
    to_js(inspect_chain_json(input, trusted_issuers, max_chain_length, now as NumericDate))
}

#[wasm_bindgen]
pub fn check_scope(held: &str, requested: &str) -> Result<String, JsError> {
    to_js(check_scope_json(held, requested))
}

#[wasm_bindgen]
pub fn decode_token(token: &str) -> Result<String, JsError> {
    to_js(decode_token_json(token))
}
