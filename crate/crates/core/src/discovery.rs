//! Server metadata published at `/.well-known/openid-configuration`, and the
//! verification key set document.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::attestation::EAT_FORMAT;
use crate::claims::{AGENT_CLAIM_NAMES, STANDARD_AGENT_TYPES};
use crate::jose::{Jwks, VerifyingKey};

pub const DISCOVERY_PATH: &str = "/.well-known/openid-configuration";
pub const REGISTRATION_PATH: &str = "/register";
pub const DELEGATION_PATH: &str = "/delegate";
pub const ATTESTATION_PATH: &str = "/agent/attest";
pub const CAPABILITIES_PATH: &str = "/agent/capabilities";
pub const VERIFICATION_KEYS_PATH: &str = "/keys/attestation";
pub const REVOCATION_PATH: &str = "/revoke";

/// The only delegation method this implementation speaks.
pub const DELEGATION_METHOD_CHAIN: &str = "chain";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiscoveryError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no active verification keys")]
    NoActiveKeys,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub issuer: String,
    pub attestation_enabled: bool,
    pub capabilities_enabled: bool,
    pub registration_enabled: bool,
    pub delegation_enabled: bool,
    pub revocation_enabled: bool,
    pub agent_types_supported: Vec<String>,
    /// Formats beyond EAT, which is always listed.
    pub extra_attestation_formats: Vec<String>,
    pub signing_algorithms: Vec<String>,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            issuer: String::new(),
            attestation_enabled: true,
            capabilities_enabled: true,
            registration_enabled: true,
            delegation_enabled: true,
            revocation_enabled: true,
            agent_types_supported: STANDARD_AGENT_TYPES.iter().map(|t| t.to_string()).collect(),
            extra_attestation_formats: Vec::new(),
            signing_algorithms: vec!["ES256".into(), "RS256".into()],
        }
    }
}

impl DiscoveryConfig {
    pub fn new(issuer: impl Into<String>) -> Self {
        DiscoveryConfig {
            issuer: issuer.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryDocument {
    pub issuer: String,
    pub jwks_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration_endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delegation_endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revocation_endpoint: Option<String>,
    pub response_types_supported: Vec<String>,
    pub subject_types_supported: Vec<String>,
    pub id_token_signing_alg_values_supported: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_attestation_endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_capabilities_endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attestation_verification_keys_endpoint: Option<String>,
    pub agent_claims_supported: Vec<String>,
    pub agent_types_supported: Vec<String>,
    pub delegation_methods_supported: Vec<String>,
    pub attestation_formats_supported: Vec<String>,
}

impl DiscoveryDocument {
    /// Every endpoint URL the document advertises.
    pub fn endpoint_urls(&self) -> Vec<&str> {
        let mut urls = vec![self.jwks_uri.as_str()];
        for url in [
            &self.registration_endpoint,
            &self.delegation_endpoint,
            &self.revocation_endpoint,
            &self.agent_attestation_endpoint,
            &self.agent_capabilities_endpoint,
            &self.attestation_verification_keys_endpoint,
        ]
        .into_iter()
        .flatten()
        {
            urls.push(url);
        }
        urls
    }
}

fn validate_issuer(issuer: &str) -> Result<Url, DiscoveryError> {
    let url = Url::parse(issuer).map_err(|e| DiscoveryError::InvalidConfig(format!("issuer: {e}")))?;
    if !matches!(url.scheme(), "https" | "http") {
        return Err(DiscoveryError::InvalidConfig("issuer must be an http(s) URL".into()));
    }
    if url.query().is_some() || url.fragment().is_some() {
        return Err(DiscoveryError::InvalidConfig(
            "issuer must not carry a query or fragment".into(),
        ));
    }
    Ok(url)
}

pub fn build_discovery_document(config: &DiscoveryConfig) -> Result<DiscoveryDocument, DiscoveryError> {
    validate_issuer(&config.issuer)?;
    for t in &config.agent_types_supported {
        crate::claims::validate_agent_type(t).map_err(|e| DiscoveryError::InvalidConfig(e.to_string()))?;
    }
    if config.agent_types_supported.is_empty() {
        return Err(DiscoveryError::InvalidConfig("agent_types_supported is empty".into()));
    }
    let base = config.issuer.trim_end_matches('/');
    let at = |path: &str| format!("{base}{path}");
    let when = |enabled: bool, path: &str| enabled.then(|| at(path));

    let mut formats = vec![EAT_FORMAT.to_owned()];
    for f in &config.extra_attestation_formats {
        if !formats.contains(f) {
            formats.push(f.clone());
        }
    }

    Ok(DiscoveryDocument {
        issuer: config.issuer.clone(),
        jwks_uri: at(VERIFICATION_KEYS_PATH),
        registration_endpoint: when(config.registration_enabled, REGISTRATION_PATH),
        delegation_endpoint: when(config.delegation_enabled, DELEGATION_PATH),
        revocation_endpoint: when(config.revocation_enabled, REVOCATION_PATH),
        response_types_supported: vec!["id_token".into()],
        subject_types_supported: vec!["public".into()],
        id_token_signing_alg_values_supported: config.signing_algorithms.clone(),
        agent_attestation_endpoint: when(config.attestation_enabled, ATTESTATION_PATH),
        agent_capabilities_endpoint: when(config.capabilities_enabled, CAPABILITIES_PATH),
        attestation_verification_keys_endpoint: when(config.attestation_enabled, VERIFICATION_KEYS_PATH),
        agent_claims_supported: AGENT_CLAIM_NAMES.iter().map(|c| c.to_string()).collect(),
        agent_types_supported: config.agent_types_supported.clone(),
        delegation_methods_supported: vec![DELEGATION_METHOD_CHAIN.into()],
        attestation_formats_supported: formats,
    })
}

/// Public key set for the given active keys. Only public members are ever
/// emitted.
pub fn publish_verification_keys<'a, I>(active_keys: I) -> Result<Jwks, DiscoveryError>
where
    I: IntoIterator<Item = &'a VerifyingKey>,
{
    let keys: Vec<_> = active_keys.into_iter().map(VerifyingKey::to_jwk).collect();
    if keys.is_empty() {
        return Err(DiscoveryError::NoActiveKeys);
    }
    Ok(Jwks { keys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jose::{Algorithm, SigningKey};

    const TABLE_4: [&str; 7] = [
        "agent_attestation_endpoint",
        "agent_capabilities_endpoint",
        "agent_claims_supported",
        "agent_types_supported",
        "delegation_methods_supported",
        "attestation_formats_supported",
        "attestation_verification_keys_endpoint",
    ];

    #[test]
    fn full_config_lists_every_field() {
        let doc = build_discovery_document(&DiscoveryConfig::new("https://auth.example.com")).unwrap();
        let json = serde_json::to_value(&doc).unwrap();
        for field in TABLE_4 {
            assert!(json.get(field).is_some(), "{field}");
        }
        assert_eq!(json["agent_attestation_endpoint"], "https://auth.example.com/agent/attest");
        assert_eq!(json["agent_types_supported"].as_array().unwrap().len(), 6);
        assert!(doc.attestation_formats_supported.contains(&EAT_FORMAT.to_owned()));
        let issuer = Url::parse(&doc.issuer).unwrap();
        for url in doc.endpoint_urls() {
            assert_eq!(Url::parse(url).unwrap().origin(), issuer.origin());
        }
    }

    #[test]
    fn disabled_attestation_is_omitted() {
        let config = DiscoveryConfig {
            attestation_enabled: false,
            extra_attestation_formats: vec![EAT_FORMAT.into(), "tpm2-quote".into()],
            ..DiscoveryConfig::new("https://auth.example.com/")
        };
        let doc = build_discovery_document(&config).unwrap();
        let json = serde_json::to_value(&doc).unwrap();
        assert!(json.get("agent_attestation_endpoint").is_none());
        assert!(json.get("attestation_verification_keys_endpoint").is_none());
        assert_eq!(doc.attestation_formats_supported, vec![EAT_FORMAT, "tpm2-quote"]);
        assert_eq!(doc.jwks_uri, "https://auth.example.com/keys/attestation");
    }

    #[test]
    fn json_round_trip() {
        let doc = build_discovery_document(&DiscoveryConfig::new("https://auth.example.com")).unwrap();
        let text = serde_json::to_string(&doc).unwrap();
        let back: DiscoveryDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn bad_config() {
        assert!(build_discovery_document(&DiscoveryConfig::new("not a url")).is_err());
        assert!(build_discovery_document(&DiscoveryConfig::new("ftp://x")).is_err());
        let config = DiscoveryConfig {
            agent_types_supported: vec!["Bad Type".into()],
            ..DiscoveryConfig::new("https://a.example")
        };
        assert!(build_discovery_document(&config).is_err());
    }

    #[test]
    fn key_set_has_public_members_only() {
        assert_eq!(publish_verification_keys([]), Err(DiscoveryError::NoActiveKeys));
        for alg in [Algorithm::ES256, Algorithm::RS256] {
            let key = SigningKey::generate(alg).unwrap().verifying_key();
            let jwks = publish_verification_keys([&key]).unwrap();
            assert_eq!(jwks.keys.len(), 1);
            let json = serde_json::to_value(&jwks).unwrap();
            for private in ["d", "p", "q", "dp", "dq", "qi", "oth", "k"] {
                assert!(json["keys"][0].get(private).is_none(), "{private}");
            }
        }
    }
}
