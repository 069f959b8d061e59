use std::fmt::Display;
use std::io::Read;
use std::path::Path;

use oidca_core::delegation::{DelegationChain, TrustPolicy};
use oidca_core::jose::{self, Jwks, KeySet, SigningKey, VerifyingKey};
use serde_json::Value;

#[derive(Debug)]
pub enum Failure {
    /// The input was well-formed but did not verify.
    Invalid(String),
    /// Bad arguments, unreadable files or unparseable input.
    Usage(String),
}

impl Failure {
    pub fn usage(e: impl Display) -> Failure {
        Failure::Usage(e.to_string())
    }

    pub fn io<E: Display>(what: impl Display) -> impl FnOnce(E) -> Failure {
        move |e| Failure::Usage(format!("{what}: {e}"))
    }
}

/// Reads a path, or stdin when `source` is `-`.
pub fn read_input(source: &str, stdin: &mut dyn Read) -> Result<String, Failure> {
    if source == "-" {
        let mut text = String::new();
        stdin.read_to_string(&mut text).map_err(Failure::io("stdin"))?;
        Ok(text)
    } else {
        std::fs::read_to_string(source).map_err(Failure::io(source))
    }
}

pub fn read_json(source: &str, stdin: &mut dyn Read) -> Result<Value, Failure> {
    let text = read_input(source, stdin)?;
    serde_json::from_str(&text).map_err(Failure::io(source))
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(Failure::io(path.display()))
}

pub fn load_signing_key(path: &Path) -> Result<SigningKey, Failure> {
    SigningKey::from_pem(&read_file(path)?).map_err(Failure::io(path.display()))
}

/// Accepts a JWKS document, an SPKI public key or a private key (whose
/// public half is used).
pub fn load_verification_keys(path: &Path) -> Result<KeySet, Failure> {
    let text = read_file(path)?;
    let fail = Failure::io(path.display());
    if text.trim_start().starts_with('{') {
        let jwks: Jwks = serde_json::from_str(&text).map_err(Failure::io(path.display()))?;
        return KeySet::from_jwks(&jwks).map_err(fail);
    }
    let key = match VerifyingKey::from_pem(&text) {
        Ok(key) => key,
        Err(_) => SigningKey::from_pem(&text).map_err(fail)?.verifying_key(),
    };
    Ok([key].into_iter().collect())
}

pub fn load_policy(path: &Path) -> Result<TrustPolicy, Failure> {
    serde_json::from_str(&read_file(path)?).map_err(Failure::io(path.display()))
}

/// A chain given as a bare array, as an object with `delegation_chain`, or
/// inside a compact token (whose signature is not checked here).
pub fn parse_chain(text: &str) -> Result<DelegationChain, Failure> {
    let trimmed = text.trim();
    let value = if jose::is_compact_shape(trimmed) {
        let (_, claims) = jose::decode_unverified(trimmed).map_err(Failure::io("token"))?;
        claims
    } else {
        serde_json::from_str(trimmed).map_err(Failure::io("input"))?
    };
    let chain = match &value {
        Value::Array(_) => &value,
        Value::Object(o) => o
            .get("delegation_chain")
            .ok_or_else(|| Failure::Usage("input has no `delegation_chain`".into()))?,
        _ => return Err(Failure::Usage("expected a chain array or an object with `delegation_chain`".into())),
    };
    DelegationChain::from_json(chain).map_err(Failure::io("delegation_chain"))
}
