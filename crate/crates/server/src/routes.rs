use std::collections::HashMap;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use oidca_core::attestation::{build_attestation_response, AttestationError};
use oidca_core::claims::{AgentClaims, AttestationEvidence, ConstraintSet};
use oidca_core::discovery::{self, publish_verification_keys};
use oidca_core::jose;
use oidca_core::registration::{CapabilityDescriptor, RegistrationError};
use oidca_core::token::{
    mint_delegated_token, validate_agent_id_token, Delegatee, DelegationRequest, Issuer, TokenError,
    ValidatedToken, ValidationOptions,
};
use serde_json::{json, Map, Value};
use tracing::Instrument;

use crate::audit::AuditEvent;
use crate::ratelimit::Decision;
use crate::state::{AppState, Stage};

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route(discovery::DISCOVERY_PATH, get(discovery_document))
        .route(discovery::VERIFICATION_KEYS_PATH, get(verification_keys))
        .route(discovery::DELEGATION_PATH, post(delegate))
        .route(discovery::REVOCATION_PATH, post(revoke));
    if state.config.registration_enabled() {
        app = app.route(discovery::REGISTRATION_PATH, post(register));
    }
    if state.config.attestation.enabled {
        app = app.route(discovery::ATTESTATION_PATH, post(attest));
    }
    if state.config.capabilities_enabled {
        app = app.route(discovery::CAPABILITIES_PATH, get(capabilities));
    }
    app.fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .layer(middleware::from_fn(request_envelope))
        .with_state(state)
}

/// Error body in the OAuth shape, plus optional extra members.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    description: String,
    extra: Map<String, Value>,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, description: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            description: description.into(),
            extra: Map::new(),
            retry_after: None,
        }
    }

    fn bad_request(description: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", description)
    }

    fn unauthorized(description: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "invalid_token", description)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "internal error");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "server_error", "internal error")
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.extra.insert(key.into(), value);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = self.extra;
        body.insert("error".into(), self.code.into());
        body.insert("error_description".into(), self.description.into());
        let mut response = (self.status, Json(Value::Object(body))).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            response
                .headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        if let Some(secs) = self.retry_after {
            response.headers_mut().insert(header::RETRY_AFTER, secs.into());
        }
        response
    }
}

type ApiResult = Result<Response, ApiError>;

/// Gives every response a JSON object body carrying `request_id`, turning
/// framework-generated plain-text errors into OAuth-style error objects.
async fn request_envelope(request: Request, next: Next) -> Response {
    let request_id = oidca_core::random_id();
    let span = tracing::info_span!(
        "request",
        request_id = %request_id,
        method = %request.method(),
        path = %request.uri().path(),
    );
    let response = next.run(request).instrument(span.clone()).await;
    let (mut parts, body) = response.into_parts();
    let bytes = axum::body::to_bytes(body, usize::MAX).await.unwrap_or_default();
    let mut object = match serde_json::from_slice::<Value>(&bytes) {
        Ok(Value::Object(o)) => o,
        _ => {
            let status = parts.status;
            let code = match status {
                StatusCode::NOT_FOUND => "not_found",
                StatusCode::METHOD_NOT_ALLOWED => "method_not_allowed",
                StatusCode::UNSUPPORTED_MEDIA_TYPE => "unsupported_media_type",
                s if s.is_server_error() => "server_error",
                _ => "invalid_request",
            };
            let text = String::from_utf8_lossy(&bytes);
            let description = if text.trim().is_empty() {
                status.canonical_reason().unwrap_or("error").to_owned()
            } else {
                text.into_owned()
            };
            let mut o = Map::new();
            o.insert("error".into(), code.into());
            o.insert("error_description".into(), description.into());
            o
        }
    };
    object.insert("request_id".into(), request_id.clone().into());
    span.in_scope(|| tracing::info!(status = parts.status.as_u16(), "response"));
    let body = serde_json::to_vec(&object).expect("JSON objects serialize");
    parts.headers.remove(header::CONTENT_LENGTH);
    parts
        .headers
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    if let Ok(v) = HeaderValue::from_str(&request_id) {
        parts.headers.insert("x-request-id", v);
    }
    Response::from_parts(parts, Body::from(body))
}

fn json_response(status: StatusCode, value: Value) -> Response {
    (status, Json(value)).into_response()
}

fn parse_body(body: &Bytes) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(o)) => Ok(o),
        Ok(_) => Err(ApiError::bad_request("request body must be a JSON object")),
        Err(e) => Err(ApiError::bad_request(format!("request body is not valid JSON: {e}"))),
    }
}

fn optional_str<'a>(body: &'a Map<String, Value>, name: &str) -> Result<Option<&'a str>, ApiError> {
    match body.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if !s.is_empty() => Ok(Some(s)),
        Some(_) => Err(ApiError::bad_request(format!("`{name}` must be a non-empty string"))),
    }
}

fn required_str<'a>(body: &'a Map<String, Value>, name: &str) -> Result<&'a str, ApiError> {
    optional_str(body, name)?.ok_or_else(|| ApiError::bad_request(format!("`{name}` is required")))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim()).filter(|t| !t.is_empty())
}

fn constant_time_eq(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.bytes().zip(b.bytes()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Validates a bearer ID token issued by this server. Its audience must be
/// this server or a registered client.
fn authenticate(state: &AppState, headers: &HeaderMap) -> Result<ValidatedToken, ApiError> {
    let token = bearer(headers).ok_or_else(|| ApiError::unauthorized("bearer token required"))?;
    let (_, claims) = jose::decode_unverified(token).map_err(|e| ApiError::unauthorized(e.to_string()))?;
    let audiences: Vec<String> = match &claims["aud"] {
        Value::String(a) => vec![a.clone()],
        Value::Array(items) => items.iter().filter_map(|v| v.as_str().map(str::to_owned)).collect(),
        _ => Vec::new(),
    };
    let mut audience = None;
    for aud in audiences {
        if aud == state.config.issuer || state.clients.get(&aud).map_err(ApiError::internal)?.is_some() {
            audience = Some(aud);
            break;
        }
    }
    let audience = audience.ok_or_else(|| ApiError::unauthorized("token audience is not this server or a registered client"))?;
    let options = ValidationOptions::new(state.config.issuer.clone(), audience);
    validate_agent_id_token(token, &options, &state.verification_keys(), state.clock.now())
        .map_err(|e| ApiError::unauthorized(e.to_string()))
}

async fn discovery_document(State(state): State<Arc<AppState>>) -> Response {
    json_response(StatusCode::OK, serde_json::to_value(&state.discovery).expect("document serializes"))
}

async fn verification_keys(State(state): State<Arc<AppState>>) -> ApiResult {
    let keys = state.verification_keys();
    let jwks = publish_verification_keys(keys.iter()).map_err(ApiError::internal)?;
    Ok(json_response(StatusCode::OK, serde_json::to_value(jwks).map_err(ApiError::internal)?))
}

async fn register(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    if let Some(expected) = &state.config.registration_token {
        match bearer(&headers) {
            Some(t) if constant_time_eq(t, expected) => {}
            _ => return Err(ApiError::unauthorized("a valid initial access token is required")),
        }
    }
    let metadata = Value::Object(parse_body(&body)?);
    match state.clients.register(&metadata, state.clock.now()) {
        Ok(registration) => {
            tracing::info!(client_id = %registration.client_id, "registered client");
            Ok(json_response(StatusCode::CREATED, registration.to_json()))
        }
        Err(e @ RegistrationError::Store(_)) => Err(ApiError::internal(e)),
        Err(e) => {
            let code = e.code();
            Err(ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string()))
        }
    }
}

async fn capabilities(
    State(state): State<Arc<AppState>>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult {
    let supported_constraints = ConstraintSet::RECOGNIZED_KEYS.to_vec();
    let (client_id, list) = match query.get("client_id") {
        Some(id) => {
            let client = state
                .clients
                .get(id)
                .map_err(ApiError::internal)?
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_client", format!("no client `{id}`")))?;
            (Some(id.clone()), client.agent_capabilities)
        }
        None => {
            let mut catalog: Vec<CapabilityDescriptor> = Vec::new();
            for client in state.clients.all().map_err(ApiError::internal)? {
                for c in client.agent_capabilities {
                    if !catalog.iter().any(|known| known.id == c.id) {
                        catalog.push(c);
                    }
                }
            }
            catalog.sort_by(|a, b| a.id.cmp(&b.id));
            (None, catalog)
        }
    };
    let mut body = json!({
        "capabilities": list,
        "supported_constraints": supported_constraints,
    });
    if let Some(id) = client_id {
        body["client_id"] = id.into();
    }
    Ok(json_response(StatusCode::OK, body))
}

async fn attest(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    const ENDPOINT: &str = "attest";
    state.trace(ENDPOINT, Stage::RateLimit);
    let caller = bearer(&headers).unwrap_or("anonymous");
    if let Decision::Limited { retry_after_seconds } = state.limiter.check(caller, state.clock.now_millis()) {
        let mut e = ApiError::new(StatusCode::TOO_MANY_REQUESTS, "rate_limited", "too many attestation requests");
        e.retry_after = Some(retry_after_seconds);
        return Err(e);
    }

    state.trace(ENDPOINT, Stage::Auth);
    let caller = authenticate(&state, &headers)?;
    let body = parse_body(&body)?;
    let agent_id = required_str(&body, "agent_id")?;
    let known = agent_id == caller.standard.sub
        || caller.agent.as_ref().is_some_and(|a| a.agent_instance_id == agent_id)
        || state.audit.client_of_instance(agent_id).is_some()
        || state.clients.get(agent_id).map_err(ApiError::internal)?.is_some();
    if !known {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_agent", format!("no agent `{agent_id}`")));
    }
    let now = state.clock.now();

    let Some(evidence) = body.get("evidence").filter(|v| !v.is_null()) else {
        let nonce = state.verifier.issue_nonce(agent_id, now).map_err(ApiError::internal)?;
        return Ok(json_response(
            StatusCode::OK,
            json!({
                "agent_id": agent_id,
                "nonce": nonce.value,
                "expires_at": nonce.expires_at,
            }),
        ));
    };
    let evidence = AttestationEvidence::from_json(evidence).map_err(|e| ApiError::bad_request(format!("evidence: {e}")))?;
    let nonce = required_str(&body, "nonce")?;

    state.trace(ENDPOINT, Stage::Work);
    let result = match state.verifier.verify_attestation_evidence(&evidence, agent_id, nonce, now) {
        Ok(r) => r,
        Err(e @ (AttestationError::Store(_) | AttestationError::Signing(_))) => return Err(ApiError::internal(e)),
        Err(e) => return Err(ApiError::new(StatusCode::BAD_REQUEST, e.code(), e.to_string())),
    };
    let token = build_attestation_response(&state.config.issuer, agent_id, &result, &state.active_key())
        .map_err(ApiError::internal)?;
    tracing::info!(agent_id, status = result.status.as_str(), "attestation verified");
    Ok(json_response(
        StatusCode::OK,
        json!({
            "attestation_result": token,
            "status": result.status.as_str(),
            "checks": result.checks,
        }),
    ))
}

fn delegation_error(e: TokenError) -> ApiError {
    match e {
        TokenError::ScopeEscalation(tokens) => {
            ApiError::new(StatusCode::FORBIDDEN, "scope_escalation", format!("not held by the delegator: {}", tokens.join(" ")))
                .with("violating_scopes", json!(tokens))
        }
        TokenError::ChainRejected(report) => {
            let description = e_description(&report);
            ApiError::new(StatusCode::FORBIDDEN, "invalid_delegation", description)
                .with("violations", serde_json::to_value(&report.violations).unwrap_or_default())
        }
        TokenError::Signing(_) => ApiError::internal(e),
        other => ApiError::new(StatusCode::BAD_REQUEST, other.code(), other.to_string()),
    }
}

fn e_description(report: &oidca_core::delegation::ChainValidationReport) -> String {
    report
        .violations
        .iter()
        .map(|v| format!("{}: {}", v.rule, v.detail))
        .collect::<Vec<_>>()
        .join("; ")
}

async fn delegate(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    const ENDPOINT: &str = "delegate";
    state.trace(ENDPOINT, Stage::Auth);
    let parent = authenticate(&state, &headers)?;
    let body = parse_body(&body)?;
    let scope = required_str(&body, "scope")?;
    let purpose = optional_str(&body, "purpose")?;
    let constraints = match body.get("constraints") {
        None | Some(Value::Null) => None,
        Some(v) => Some(ConstraintSet::from_json(v).map_err(|e| ApiError::bad_request(format!("constraints: {e}")))?),
    };
    let lifetime_seconds = match body.get("lifetime_seconds") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| ApiError::bad_request("`lifetime_seconds` must be a positive integer"))?),
    };

    let client_id = optional_str(&body, "delegatee_client_id")?;
    let instance_id = optional_str(&body, "agent_instance_id")?;
    let bound_client = instance_id.and_then(|i| state.audit.client_of_instance(i));
    let client_id = match (client_id, &bound_client) {
        (Some(c), Some(bound)) if c != bound => {
            return Err(ApiError::bad_request(format!(
                "agent instance `{}` belongs to another client",
                instance_id.unwrap_or_default()
            )))
        }
        (Some(c), _) => c.to_owned(),
        (None, Some(bound)) => bound.clone(),
        (None, None) if instance_id.is_some() => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_delegatee",
                format!("no agent instance `{}`", instance_id.unwrap_or_default()),
            ))
        }
        (None, None) => return Err(ApiError::bad_request("`delegatee_client_id` or `agent_instance_id` is required")),
    };
    let client = state
        .clients
        .get(&client_id)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_delegatee", format!("no client `{client_id}`")))?;

    let model = match optional_str(&body, "agent_model")? {
        Some(m) if client.agent_models_supported.is_empty() || client.agent_models_supported.iter().any(|s| s == m) => m.to_owned(),
        Some(m) => return Err(ApiError::bad_request(format!("client does not support model `{m}`"))),
        None => client
            .agent_models_supported
            .first()
            .cloned()
            .ok_or_else(|| ApiError::bad_request("`agent_model` is required for this client"))?,
    };
    let agent_type = client.agent_type.parse().map_err(ApiError::internal)?;
    let instance_id = instance_id.map_or_else(|| format!("agent_{}", oidca_core::random_id()), str::to_owned);
    let mut agent = AgentClaims::new(agent_type, model, client.agent_provider.clone(), instance_id);
    agent.agent_version = optional_str(&body, "agent_version")?.map(str::to_owned);
    if !client.agent_capabilities.is_empty() {
        let caps = client.capability_ids().into_iter().map(str::parse).collect::<Result<Vec<_>, _>>();
        agent.agent_capabilities = Some(caps.map_err(ApiError::internal)?);
    }

    let request = DelegationRequest {
        delegatee: Delegatee {
            agent,
            audience: client.client_id.clone(),
        },
        scope: scope.to_owned(),
        purpose: purpose.map(str::to_owned),
        constraints,
        lifetime_seconds,
    };
    let mut issuer = Issuer::new(state.config.issuer.clone(), state.active_key());
    issuer.default_lifetime_seconds = state.config.policy.token_lifetime_seconds;
    let now = state.clock.now();

    state.trace(ENDPOINT, Stage::Work);
    let issued = mint_delegated_token(&parent, &request, &issuer, &state.policy, &state.revocations, now)
        .map_err(delegation_error)?;
    let jti = issued.step.jti.clone().expect("appended steps carry a jti");
    state
        .audit
        .record(AuditEvent::Delegation {
            jti: jti.clone(),
            delegator: parent.standard.sub.clone(),
            delegatee: issued.agent.agent_instance_id.clone(),
            delegatee_client_id: client.client_id.clone(),
            scope: scope.to_owned(),
            purpose: request.purpose.clone(),
            timestamp: now,
        })
        .map_err(ApiError::internal)?;
    Ok(json_response(
        StatusCode::OK,
        json!({
            "id_token": issued.token,
            "token_type": "id_token",
            "expires_in": issued.standard.exp - now,
            "delegation_jti": jti,
            "agent_instance_id": issued.agent.agent_instance_id,
        }),
    ))
}

async fn revoke(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    const ENDPOINT: &str = "revoke";
    state.trace(ENDPOINT, Stage::Auth);
    let presented = bearer(&headers).ok_or_else(|| ApiError::unauthorized("bearer token required"))?;
    let admin = state
        .config
        .admin_token
        .as_deref()
        .is_some_and(|expected| constant_time_eq(presented, expected));
    let caller = if admin {
        "admin".to_owned()
    } else {
        authenticate(&state, &headers)?.standard.sub
    };
    let body = parse_body(&body)?;
    let jti = required_str(&body, "jti")?;
    if !admin && state.audit.delegator_of(jti).as_deref() != Some(caller.as_str()) {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "access_denied",
            "only the delegator of a step may revoke it",
        ));
    }
    let now = state.clock.now();
    state.revocations.revoke_step(jti, now).map_err(ApiError::internal)?;
    state
        .audit
        .record(AuditEvent::Revocation {
            jti: jti.to_owned(),
            revoked_by: caller,
            timestamp: now,
        })
        .map_err(ApiError::internal)?;
    Ok(json_response(StatusCode::OK, json!({ "jti": jti, "revoked": true })))
}
