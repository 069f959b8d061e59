//! Agent client registration: dynamic client registration extended with
//! agent metadata.
//!
//! Clients must authenticate with an asymmetric key (`private_key_jwt`);
//! shared-secret methods are refused outright.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::claims::{validate_agent_type, validate_capability_identifier, ConstraintSet};
use crate::discovery::DELEGATION_METHOD_CHAIN;
use crate::jose::{Jwks, KeySet};
use crate::store::{Namespace, Store, StoreError};
use crate::NumericDate;

pub const AUTH_METHOD_PRIVATE_KEY_JWT: &str = "private_key_jwt";
const SHARED_SECRET_METHODS: [&str; 3] = ["client_secret_basic", "client_secret_post", "client_secret_jwt"];
pub const DEFAULT_AGENT_TYPE: &str = "assistant";

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("invalid client metadata: {}", .0.join("; "))]
    InvalidMetadata(Vec<String>),
    #[error("unsupported authentication method `{0}`: register a public key instead")]
    UnsupportedAuthMethod(String),
    #[error("storage: {0}")]
    Store(#[from] StoreError),
}

impl RegistrationError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistrationError::InvalidMetadata(_) => "invalid_client_metadata",
            RegistrationError::UnsupportedAuthMethod(_) => "unsupported_auth_method",
            RegistrationError::Store(_) => "server_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityDescriptor {
    pub id: String,
    pub description: String,
    pub supported_constraints: Vec<String>,
}

impl CapabilityDescriptor {
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        CapabilityDescriptor {
            description: format!("Capability `{id}`"),
            id,
            supported_constraints: ConstraintSet::RECOGNIZED_KEYS.iter().map(|k| k.to_string()).collect(),
        }
    }
}

/// How the client proves its identity: an inline key set or a URL to one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKeys {
    Jwks(Jwks),
    JwksUri(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRegistration {
    pub client_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_name: Option<String>,
    pub agent_provider: String,
    pub agent_models_supported: Vec<String>,
    pub agent_capabilities: Vec<CapabilityDescriptor>,
    pub attestation_formats_supported: Vec<String>,
    pub delegation_methods_supported: Vec<String>,
    pub token_endpoint_auth_method: String,
    #[serde(flatten)]
    pub keys: ClientKeys,
    /// Agent type tokens issued to this client carry.
    pub agent_type: String,
    pub client_id_issued_at: NumericDate,
}

impl ClientRegistration {
    pub fn capability_ids(&self) -> Vec<&str> {
        self.agent_capabilities.iter().map(|c| c.id.as_str()).collect()
    }

    /// Registration response: the record with Table 3 names verbatim.
    pub fn to_json(&self) -> Value {
        let mut value = serde_json::to_value(self).expect("registrations always serialize");
        value["agent_capabilities"] = Value::Array(
            self.agent_capabilities
                .iter()
                .map(|c| Value::String(c.id.clone()))
                .collect(),
        );
        value
    }
}

fn string_list(doc: &Map<String, Value>, name: &str, problems: &mut Vec<String>) -> Option<Vec<String>> {
    match doc.get(name) {
        None => None,
        Some(Value::Array(items)) => {
            let strings: Option<Vec<String>> = items.iter().map(|v| v.as_str().map(str::to_owned)).collect();
            if strings.is_none() {
                problems.push(format!("{name}: entries must be strings"));
            }
            strings
        }
        Some(_) => {
            problems.push(format!("{name}: expected an array of strings"));
            None
        }
    }
}

fn capability(value: &Value, problems: &mut Vec<String>) -> Option<CapabilityDescriptor> {
    let (id, description) = match value {
        Value::String(id) => (id.clone(), None),
        Value::Object(o) => match o.get("id").and_then(Value::as_str) {
            Some(id) => (id.to_owned(), o.get("description").and_then(Value::as_str)),
            None => {
                problems.push("agent_capabilities: capability objects need a string `id`".into());
                return None;
            }
        },
        _ => {
            problems.push("agent_capabilities: entries must be strings or objects".into());
            return None;
        }
    };
    if let Err(e) = validate_capability_identifier(&id) {
        problems.push(format!("agent_capabilities: {e}"));
        return None;
    }
    let mut descriptor = CapabilityDescriptor::new(id);
    if let Some(d) = description {
        descriptor.description = d.to_owned();
    }
    Some(descriptor)
}

/// Validates registration metadata and assigns a fresh `client_id`.
/// Does not persist anything; see [`ClientRegistry::register`].
pub fn process_registration_request(
    metadata: &Value,
    now: NumericDate,
) -> Result<ClientRegistration, RegistrationError> {
    let Value::Object(doc) = metadata else {
        return Err(RegistrationError::InvalidMetadata(vec!["expected a JSON object".into()]));
    };

    let method = match doc.get("token_endpoint_auth_method") {
        None => AUTH_METHOD_PRIVATE_KEY_JWT.to_owned(),
        Some(Value::String(m)) => m.clone(),
        Some(_) => {
            return Err(RegistrationError::InvalidMetadata(vec![
                "token_endpoint_auth_method: expected a string".into(),
            ]))
        }
    };
    if SHARED_SECRET_METHODS.contains(&method.as_str()) || doc.contains_key("client_secret") {
        return Err(RegistrationError::UnsupportedAuthMethod(method));
    }
    if method != AUTH_METHOD_PRIVATE_KEY_JWT {
        return Err(RegistrationError::UnsupportedAuthMethod(method));
    }

    let mut problems = Vec::new();

    let agent_provider = match doc.get("agent_provider") {
        Some(Value::String(p)) if !p.is_empty() => Some(p.clone()),
        Some(_) => {
            problems.push("agent_provider: expected a non-empty string".into());
            None
        }
        None => {
            problems.push("agent_provider: required".into());
            None
        }
    };

    let models = string_list(doc, "agent_models_supported", &mut problems).unwrap_or_default();
    if models.iter().any(String::is_empty) {
        problems.push("agent_models_supported: entries must not be empty".into());
    }

    let capabilities = match doc.get("agent_capabilities") {
        None => Vec::new(),
        Some(Value::Array(items)) => items.iter().filter_map(|v| capability(v, &mut problems)).collect(),
        Some(_) => {
            problems.push("agent_capabilities: expected an array".into());
            Vec::new()
        }
    };
    let mut seen = std::collections::BTreeSet::new();
    for c in &capabilities {
        if !seen.insert(c.id.as_str()) {
            problems.push(format!("agent_capabilities: `{}` listed twice", c.id));
        }
    }

    let formats = match string_list(doc, "attestation_formats_supported", &mut problems) {
        Some(f) if f.is_empty() => {
            problems.push("attestation_formats_supported: list at least one format or omit the field".into());
            Vec::new()
        }
        Some(f) => f,
        None => Vec::new(),
    };
    if formats.iter().any(String::is_empty) {
        problems.push("attestation_formats_supported: entries must not be empty".into());
    }

    let delegation_methods = string_list(doc, "delegation_methods_supported", &mut problems)
        .unwrap_or_else(|| vec![DELEGATION_METHOD_CHAIN.to_owned()]);
    for m in &delegation_methods {
        if m != DELEGATION_METHOD_CHAIN {
            problems.push(format!("delegation_methods_supported: `{m}` is not supported"));
        }
    }

    let keys = match (doc.get("jwks"), doc.get("jwks_uri")) {
        (Some(_), Some(_)) => {
            problems.push("jwks and jwks_uri are mutually exclusive".into());
            None
        }
        (Some(jwks), None) => match serde_json::from_value::<Jwks>(jwks.clone()) {
            Ok(jwks) => match KeySet::from_jwks(&jwks) {
                Ok(set) if !set.is_empty() => Some(ClientKeys::Jwks(set.to_jwks())),
                Ok(_) => {
                    problems.push("jwks: no keys".into());
                    None
                }
                Err(e) => {
                    problems.push(format!("jwks: {e}"));
                    None
                }
            },
            Err(e) => {
                problems.push(format!("jwks: {e}"));
                None
            }
        },
        (None, Some(Value::String(uri))) => match url::Url::parse(uri) {
            Ok(u) if u.scheme() == "https" => Some(ClientKeys::JwksUri(uri.clone())),
            _ => {
                problems.push("jwks_uri: expected an https URL".into());
                None
            }
        },
        (None, Some(_)) => {
            problems.push("jwks_uri: expected a string".into());
            None
        }
        (None, None) => {
            problems.push("a public key (jwks or jwks_uri) is required for private_key_jwt".into());
            None
        }
    };

    let agent_type = match doc.get("agent_type") {
        None => DEFAULT_AGENT_TYPE.to_owned(),
        Some(Value::String(t)) => {
            if let Err(e) = validate_agent_type(t) {
                problems.push(format!("agent_type: {e}"));
            }
            t.clone()
        }
        Some(_) => {
            problems.push("agent_type: expected a string".into());
            String::new()
        }
    };

    let client_name = match doc.get("client_name") {
        None => None,
        Some(Value::String(n)) => Some(n.clone()),
        Some(_) => {
            problems.push("client_name: expected a string".into());
            None
        }
    };

    if !problems.is_empty() {
        return Err(RegistrationError::InvalidMetadata(problems));
    }
    Ok(ClientRegistration {
        client_id: crate::random_id(),
        client_name,
        agent_provider: agent_provider.expect("checked above"),
        agent_models_supported: models,
        agent_capabilities: capabilities,
        attestation_formats_supported: formats,
        delegation_methods_supported: delegation_methods,
        token_endpoint_auth_method: method,
        keys: keys.expect("checked above"),
        agent_type,
        client_id_issued_at: now,
    })
}

/// Registered clients persisted in the `clients` namespace.
#[derive(Clone)]
pub struct ClientRegistry {
    store: Arc<dyn Store>,
}

impl ClientRegistry {
    pub fn new(store: Arc<dyn Store>) -> Self {
        ClientRegistry { store }
    }

    pub fn register(&self, metadata: &Value, now: NumericDate) -> Result<ClientRegistration, RegistrationError> {
        let registration = process_registration_request(metadata, now)?;
        self.insert(&registration)?;
        Ok(registration)
    }

    /// Stores a registration as is, replacing any with the same `client_id`.
    pub fn insert(&self, registration: &ClientRegistration) -> Result<(), RegistrationError> {
        let value = serde_json::to_value(registration).expect("registrations always serialize");
        self.store.put(Namespace::Clients, &registration.client_id, value, None)?;
        Ok(())
    }

    pub fn get(&self, client_id: &str) -> Result<Option<ClientRegistration>, RegistrationError> {
        let Some(value) = self.store.get(Namespace::Clients, client_id, NumericDate::MIN)? else {
            return Ok(None);
        };
        serde_json::from_value(value)
            .map(Some)
            .map_err(|e| RegistrationError::Store(StoreError::Corrupt(format!("client {client_id}: {e}"))))
    }

    pub fn all(&self) -> Result<Vec<ClientRegistration>, RegistrationError> {
        self.store
            .scan(Namespace::Clients, NumericDate::MIN)?
            .into_iter()
            .map(|r| {
                serde_json::from_value(r.value)
                    .map_err(|e| RegistrationError::Store(StoreError::Corrupt(format!("client {}: {e}", r.key))))
            })
            .collect()
    }
}
