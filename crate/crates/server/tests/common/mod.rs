#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use oidca_core::attestation::measurement_digest;
use oidca_core::claims::AgentClaims;
use oidca_core::clock::ManualClock;
use oidca_core::jose::{Algorithm, KeySet, SigningKey};
use oidca_core::registration::{CapabilityDescriptor, ClientKeys, ClientRegistration};
use oidca_core::token::{mint_agent_id_token, StandardClaims};
use oidca_server::config::ReferenceMeasurement;
use oidca_server::{router, AppState, ServerConfig, TraceHook};
use serde_json::Value;
use tower::ServiceExt;

pub const ISSUER: &str = "https://auth.example.com";
pub const NOW: i64 = 1_714_348_800;
pub const REGISTRATION_TOKEN: &str = "initial-access-token";
pub const ADMIN_TOKEN: &str = "admin-secret";
pub const GOOD_BUILD: &[u8] = b"gpt-4 2025-03 release build";

pub struct Harness {
    pub state: Arc<AppState>,
    pub clock: Arc<ManualClock>,
    pub app: Router,
    /// Key trusted to sign attestation evidence.
    pub attester: SigningKey,
    pub dir: tempfile::TempDir,
}

pub struct Options {
    pub configure: Box<dyn FnOnce(&mut ServerConfig)>,
    pub trace: Option<TraceHook>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            configure: Box::new(|_| {}),
            trace: None,
        }
    }
}

impl Harness {
    pub fn new() -> Self {
        Self::with(Options::default())
    }

    pub fn configured(f: impl FnOnce(&mut ServerConfig) + 'static) -> Self {
        Self::with(Options {
            configure: Box::new(f),
            trace: None,
        })
    }

    pub fn with(options: Options) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let attester = SigningKey::generate(Algorithm::ES256).unwrap();
        let jwks_path = dir.path().join("attestation-keys.json");
        let jwks = [attester.verifying_key()].into_iter().collect::<KeySet>().to_jwks();
        std::fs::write(&jwks_path, serde_json::to_vec(&jwks).unwrap()).unwrap();

        let mut config = ServerConfig {
            issuer: ISSUER.into(),
            registration_token: Some(REGISTRATION_TOKEN.into()),
            admin_token: Some(ADMIN_TOKEN.into()),
            ..ServerConfig::default()
        };
        config.attestation.trusted_keys = Some(jwks_path);
        config.attestation.reference_measurements.push(ReferenceMeasurement {
            provider: "openai.com".into(),
            model: "gpt-4".into(),
            version: "2025-03".into(),
            digest: measurement_digest(GOOD_BUILD),
        });
        (options.configure)(&mut config);

        let clock = Arc::new(ManualClock::at(NOW));
        let mut state = AppState::build(config, clock.clone()).unwrap();
        if let Some(hook) = options.trace {
            state = state.with_trace_hook(hook);
        }
        let state = Arc::new(state);
        Harness {
            app: router(state.clone()),
            state,
            clock,
            attester,
            dir,
        }
    }

    pub fn now(&self) -> i64 {
        use oidca_core::clock::Clock;
        self.clock.now()
    }

    pub async fn call(&self, method: Method, path: &str, bearer: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let (status, _, value) = self.call_full(method, path, bearer, body).await;
        (status, value)
    }

    pub async fn call_full(
        &self,
        method: Method,
        path: &str,
        bearer: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, axum::http::HeaderMap, Value) {
        let mut request = Request::builder().method(method).uri(path);
        if let Some(token) = bearer {
            request = request.header(header::AUTHORIZATION, format!("Bearer {token}"));
        }
        let body = match body {
            Some(v) => {
                request = request.header(header::CONTENT_TYPE, "application/json");
                Body::from(serde_json::to_vec(&v).unwrap())
            }
            None => Body::empty(),
        };
        let response = self.app.clone().oneshot(request.body(body).unwrap()).await.unwrap();
        let status = response.status();
        let headers = response.headers().clone();
        let bytes = response.into_body().collect().await.unwrap().to_bytes();
        let value = serde_json::from_slice(&bytes)
            .unwrap_or_else(|e| panic!("non-JSON body ({e}): {}", String::from_utf8_lossy(&bytes)));
        (status, headers, value)
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, None, None).await
    }

    pub async fn post(&self, path: &str, bearer: Option<&str>, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, bearer, Some(body)).await
    }

    /// Adds a client with a fixed id straight to the registry.
    pub fn insert_client(&self, client_id: &str, models: &[&str], capabilities: &[&str]) {
        let key = SigningKey::generate(Algorithm::ES256).unwrap();
        let registration = ClientRegistration {
            client_id: client_id.into(),
            client_name: None,
            agent_provider: "openai.com".into(),
            agent_models_supported: models.iter().map(|m| m.to_string()).collect(),
            agent_capabilities: capabilities.iter().map(|c| CapabilityDescriptor::new(*c)).collect(),
            attestation_formats_supported: vec![oidca_core::attestation::EAT_FORMAT.into()],
            delegation_methods_supported: vec!["chain".into()],
            token_endpoint_auth_method: "private_key_jwt".into(),
            keys: ClientKeys::Jwks([key.verifying_key()].into_iter().collect::<KeySet>().to_jwks()),
            agent_type: "assistant".into(),
            client_id_issued_at: NOW,
        };
        self.state.clients.insert(&registration).unwrap();
    }

    /// An ID token for a human user, standing in for a completed
    /// authentication with consent.
    pub fn user_token(&self, sub: &str, aud: &str, scope: &str) -> String {
        let now = self.now();
        let standard = StandardClaims {
            iss: ISSUER.into(),
            sub: sub.into(),
            aud: aud.into(),
            exp: now + 3600,
            iat: now,
            auth_time: Some(now),
            nonce: None,
            scope: Some(scope.into()),
            jti: Some(oidca_core::random_id()),
        };
        mint_agent_id_token(&standard, None, &self.state.active_key()).unwrap()
    }

    /// An agent ID token minted directly, without a delegation chain.
    pub fn agent_token(&self, instance: &str, aud: &str, scope: &str) -> String {
        let now = self.now();
        let standard = StandardClaims {
            iss: ISSUER.into(),
            sub: instance.into(),
            aud: aud.into(),
            exp: now + 3600,
            iat: now,
            auth_time: None,
            nonce: None,
            scope: Some(scope.into()),
            jti: Some(oidca_core::random_id()),
        };
        let agent = AgentClaims::new("assistant".parse().unwrap(), "gpt-4", "openai.com", instance);
        mint_agent_id_token(&standard, Some(&agent), &self.state.active_key()).unwrap()
    }
}

/// Registration metadata accepted by `/register`.
pub fn registration_body(capabilities: &[&str]) -> Value {
    let key = SigningKey::generate(Algorithm::ES256).unwrap();
    let jwks = [key.verifying_key()].into_iter().collect::<KeySet>().to_jwks();
    serde_json::json!({
        "client_name": "Mail helper",
        "agent_provider": "openai.com",
        "agent_models_supported": ["gpt-4"],
        "agent_capabilities": capabilities,
        "attestation_formats_supported": [oidca_core::attestation::EAT_FORMAT],
        "jwks": jwks,
    })
}

/// Token bits are covered when the token or one of its `:` prefixes is in
/// `held`.
pub fn covered(held: &[&str], token: &str) -> bool {
    let parts: Vec<&str> = token.split(':').collect();
    (1..=parts.len()).any(|n| held.contains(&parts[..n].join(":").as_str()))
}
