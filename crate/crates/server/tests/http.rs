mod common;

use std::sync::{Arc, Mutex};

use axum::http::{Method, StatusCode};
use common::{registration_body, Harness, Options, ADMIN_TOKEN, GOOD_BUILD, ISSUER, NOW, REGISTRATION_TOKEN};
use oidca_core::attestation::{measurement_digest, EatClaims};
use oidca_core::delegation::DelegationChain;
use oidca_core::jose::{self, Jwks, KeySet};
use oidca_core::token::{validate_agent_id_token, ValidationOptions};
use oidca_server::Stage;
use serde_json::{json, Value};

fn evidence(h: &Harness, nonce: &str, build: &[u8]) -> Value {
    let claims = EatClaims {
        iss: "https://attest.openai.com".into(),
        iat: h.now(),
        nonce: nonce.into(),
        agent_provider: "openai.com".into(),
        agent_model: "gpt-4".into(),
        agent_version: "2025-03".into(),
        measurement: measurement_digest(build),
    };
    serde_json::to_value(claims.into_evidence(&h.attester).unwrap()).unwrap()
}

fn assert_error(body: &Value, code: &str) {
    assert_eq!(body["error"], code, "{body}");
    assert!(body["error_description"].is_string(), "{body}");
    assert!(body["request_id"].is_string(), "{body}");
}

#[tokio::test]
async fn every_response_is_json_with_request_id() {
    let h = Harness::new();
    let (status, headers, body) = h.call_full(Method::GET, "/.well-known/openid-configuration", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["x-request-id"].to_str().unwrap(), body["request_id"]);

    let (status, body) = h.get("/nowhere").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "not_found");

    let (status, body) = h.get("/delegate").await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_error(&body, "method_not_allowed");

    let (status, body) = h.call(Method::GET, "/agent/capabilities?client_id=a&client_id", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_client");

    let token = h.user_token("user_1", ISSUER, "email");
    let request = axum::http::Request::builder()
        .method(Method::POST)
        .uri("/delegate")
        .header("authorization", format!("Bearer {token}"))
        .body(axum::body::Body::from("{not json"))
        .unwrap();
    let response = tower::ServiceExt::oneshot(h.app.clone(), request).await.unwrap();
    assert_eq!(response.status(), StatusCode::BAD_REQUEST);
    let bytes = http_body_util::BodyExt::collect(response.into_body()).await.unwrap().to_bytes();
    assert_error(&serde_json::from_slice(&bytes).unwrap(), "invalid_request");
}

fn recording() -> (Options, Arc<Mutex<Vec<(&'static str, Stage)>>>) {
    let log = Arc::new(Mutex::new(Vec::new()));
    let sink = log.clone();
    let options = Options {
        trace: Some(Arc::new(move |endpoint, stage| sink.lock().unwrap().push((endpoint, stage)))),
        ..Options::default()
    };
    (options, log)
}

#[tokio::test]
async fn rate_limit_and_auth_precede_crypto_work() {
    let (options, log) = recording();
    let h = Harness::with(options);
    h.insert_client("client_123", &["gpt-4"], &[]);
    let token = h.agent_token("agent_instance_789", "client_123", "email");

    let (_, challenge) = h.post("/agent/attest", Some(&token), json!({"agent_id": "agent_instance_789"})).await;
    let nonce = challenge["nonce"].as_str().unwrap();
    let body = json!({"agent_id": "agent_instance_789", "nonce": nonce, "evidence": evidence(&h, nonce, GOOD_BUILD)});
    let (status, _) = h.post("/agent/attest", Some(&token), body).await;
    assert_eq!(status, StatusCode::OK);
    let stages: Vec<Stage> = log.lock().unwrap().drain(..).map(|(_, s)| s).collect();
    assert_eq!(
        stages,
        [Stage::RateLimit, Stage::Auth, Stage::RateLimit, Stage::Auth, Stage::Work]
    );

    // Unauthenticated and rate-limited requests never reach the work stage.
    let (status, _) = h.post("/agent/attest", Some("garbage"), json!({"agent_id": "x"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    for _ in 0..10 {
        h.post("/agent/attest", Some("garbage"), json!({})).await;
    }
    let (status, _) = h.post("/delegate", None, json!({"scope": "email"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let seen = log.lock().unwrap().clone();
    assert!(seen.iter().all(|(_, s)| *s != Stage::Work), "{seen:?}");
    assert_eq!(seen.iter().filter(|(e, s)| *e == "attest" && *s == Stage::Auth).count(), 10);
}

#[tokio::test]
async fn calendar_chain_scenario_over_http() {
    let h = Harness::new();
    h.insert_client("client_123", &["gpt-4"], &["email:read", "email:draft", "calendar:view"]);
    h.insert_client("client_101", &["gpt-4"], &["calendar:view"]);
    let user = h.user_token("user_456", "client_123", "email calendar");

    let (status, first) = h
        .post(
            "/delegate",
            Some(&user),
            json!({
                "delegatee_client_id": "client_123",
                "agent_instance_id": "agent_instance_789",
                "scope": "email calendar",
                "purpose": "Manage my emails and calendar",
            }),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{first}");
    h.clock.advance_millis(30_000);
    let (status, second) = h
        .post(
            "/delegate",
            first["id_token"].as_str(),
            json!({
                "delegatee_client_id": "client_101",
                "agent_instance_id": "agent_instance_101",
                "scope": "calendar:view",
                "purpose": "Analyze available time slots",
            }),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{second}");

    let token = second["id_token"].as_str().unwrap();
    let v = validate_agent_id_token(token, &ValidationOptions::new(ISSUER, "client_101"), &h.state.verification_keys(), h.now())
        .unwrap();
    let agent = v.agent.unwrap();
    assert_eq!(agent.delegator_sub.as_deref(), Some("agent_instance_789"));
    let mut chain = agent.delegation_chain.unwrap().to_json();
    for step in chain.as_array_mut().unwrap() {
        assert!(step.as_object_mut().unwrap().remove("jti").is_some());
    }
    let fixture: Value = serde_json::from_str(include_str!("../../../fixtures/calendar_chain.json")).unwrap();
    assert_eq!(chain, fixture["delegation_chain"]);
    DelegationChain::from_json(&chain).unwrap();

    // The instance is now known, so it can be named without its client.
    let (status, _) = h
        .post("/delegate", Some(&user), json!({"agent_instance_id": "agent_instance_789", "scope": "email"}))
        .await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn delegation_errors() {
    let h = Harness::new();
    h.insert_client("client_123", &["gpt-4"], &[]);
    let user = h.user_token("user_456", "client_123", "email calendar:view");

    let (status, body) = h.post("/delegate", Some(&user), json!({"delegatee_client_id": "client_123"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");

    let (status, body) = h
        .post("/delegate", Some(&user), json!({"delegatee_client_id": "client_123", "scope": "email:read calendar admin"}))
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_error(&body, "scope_escalation");
    assert_eq!(body["violating_scopes"], json!(["calendar", "admin"]));

    let (status, body) = h.post("/delegate", Some(&user), json!({"delegatee_client_id": "nobody", "scope": "email"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_delegatee");

    let (status, body) = h.post("/delegate", Some(&user), json!({"agent_instance_id": "ghost", "scope": "email"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_delegatee");

    let (status, body) = h
        .post(
            "/delegate",
            Some(&user),
            json!({"delegatee_client_id": "client_123", "scope": "email", "lifetime_seconds": 7200}),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "constraint_conflict");

    let (status, body) = h
        .post("/delegate", Some(&user), json!({"delegatee_client_id": "client_123", "scope": "email", "agent_model": "claude"}))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");

    // A token for an audience nobody registered is not a credential here.
    let stranger = h.user_token("user_456", "client_999", "email");
    let (status, body) = h.post("/delegate", Some(&stranger), json!({"delegatee_client_id": "client_123", "scope": "email"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_error(&body, "invalid_token");

    h.clock.advance_millis(3_600_000);
    let (status, _) = h.post("/delegate", Some(&user), json!({"delegatee_client_id": "client_123", "scope": "email"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn registration_requires_initial_access_token() {
    let h = Harness::new();
    let (status, body) = h.post("/register", None, registration_body(&["email:read"])).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_error(&body, "invalid_token");

    let (status, body) = h.post("/register", Some(REGISTRATION_TOKEN), registration_body(&["email:read", "calendar:view"])).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let client_id = body["client_id"].as_str().unwrap();
    assert_eq!(body["agent_capabilities"], json!(["email:read", "calendar:view"]));
    assert_eq!(body["client_id_issued_at"], NOW);
    assert!(h.state.clients.get(client_id).unwrap().is_some());

    let mut secret = registration_body(&[]);
    secret["token_endpoint_auth_method"] = "client_secret_basic".into();
    let (status, body) = h.post("/register", Some(REGISTRATION_TOKEN), secret).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "unsupported_auth_method");

    let (status, body) = h.post("/register", Some(REGISTRATION_TOKEN), json!({"agent_provider": 3})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_client_metadata");
}

#[tokio::test]
async fn registration_is_off_without_token_or_dev_mode() {
    let h = Harness::configured(|c| c.registration_token = None);
    let (_, doc) = h.get("/.well-known/openid-configuration").await;
    assert!(doc.get("registration_endpoint").is_none());
    assert_eq!(h.post("/register", None, registration_body(&[])).await.0, StatusCode::NOT_FOUND);

    let dev = Harness::configured(|c| {
        c.registration_token = None;
        c.dev_mode = true;
    });
    assert_eq!(dev.post("/register", None, registration_body(&[])).await.0, StatusCode::CREATED);
}

#[tokio::test]
async fn capabilities_per_client_and_catalog() {
    let h = Harness::new();
    h.insert_client("client_123", &["gpt-4"], &["email:read", "email:draft", "calendar:view"]);
    h.insert_client("client_456", &["gpt-4"], &["calendar:view", "files:read"]);

    let (status, body) = h.get("/agent/capabilities?client_id=client_123").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body["capabilities"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["email:read", "email:draft", "calendar:view"]);
    assert_eq!(
        body["supported_constraints"],
        json!(["max_duration_seconds", "allowed_resources", "max_delegation_depth"])
    );

    let (_, catalog) = h.get("/agent/capabilities").await;
    assert_eq!(catalog["capabilities"].as_array().unwrap().len(), 4);

    let (status, body) = h.get("/agent/capabilities?client_id=nobody").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_client");

    let off = Harness::configured(|c| c.capabilities_enabled = false);
    let (_, doc) = off.get("/.well-known/openid-configuration").await;
    assert!(doc.get("agent_capabilities_endpoint").is_none());
    assert_eq!(off.get("/agent/capabilities").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn attestation_challenge_verify_and_replay() {
    let h = Harness::new();
    h.insert_client("client_123", &["gpt-4"], &[]);
    let token = h.agent_token("agent_instance_789", "client_123", "email");

    let (status, challenge) = h.post("/agent/attest", Some(&token), json!({"agent_id": "agent_instance_789"})).await;
    assert_eq!(status, StatusCode::OK, "{challenge}");
    let nonce = challenge["nonce"].as_str().unwrap();
    assert_eq!(challenge["expires_at"], NOW + 300);

    let body = json!({"agent_id": "agent_instance_789", "nonce": nonce, "evidence": evidence(&h, nonce, GOOD_BUILD)});
    let (status, verified) = h.post("/agent/attest", Some(&token), body.clone()).await;
    assert_eq!(status, StatusCode::OK, "{verified}");
    assert_eq!(verified["status"], "verified");

    let (_, jwks) = h.get("/keys/attestation").await;
    let jwks: Jwks = serde_json::from_value(jwks).unwrap();
    let keys = KeySet::from_jwks(&jwks).unwrap();
    let (header, payload) = jose::verify_compact(verified["attestation_result"].as_str().unwrap(), &keys).unwrap();
    assert_eq!(header.typ.as_deref(), Some("attestation-result+jwt"));
    assert_eq!(payload["status"], "verified");
    assert_eq!(payload["agent_id"], "agent_instance_789");

    let (status, replay) = h.post("/agent/attest", Some(&token), body).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(replay["status"], "failed");
    assert_eq!(replay["checks"]["nonce"]["passed"], false);
    assert_eq!(replay["checks"]["signature"]["passed"], true);

    let (status, body) = h.post("/agent/attest", Some(&token), json!({"agent_id": "agent_404"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_agent");

    let (status, _) = h.post("/agent/attest", None, json!({"agent_id": "agent_instance_789"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let (status, body) = h
        .post("/agent/attest", Some(&token), json!({"agent_id": "agent_instance_789", "evidence": {"format": "x"}}))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");
}

#[tokio::test]
async fn rate_limit_refills_and_is_per_caller() {
    let h = Harness::configured(|c| c.rate_limit.capacity = 2);
    h.insert_client("client_123", &["gpt-4"], &[]);
    let a = h.agent_token("agent_a", "client_123", "email");
    let b = h.agent_token("agent_b", "client_123", "email");
    let attest = |t: String, agent: &'static str| {
        let h = &h;
        async move { h.call_full(Method::POST, "/agent/attest", Some(&t), Some(json!({"agent_id": agent}))).await }
    };
    assert_eq!(attest(a.clone(), "agent_a").await.0, StatusCode::OK);
    assert_eq!(attest(a.clone(), "agent_a").await.0, StatusCode::OK);
    let (status, headers, body) = attest(a.clone(), "agent_a").await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
    assert_error(&body, "rate_limited");
    assert_eq!(headers["retry-after"], "5");
    assert_eq!(attest(b, "agent_b").await.0, StatusCode::OK);
    h.clock.advance_millis(5_000);
    assert_eq!(attest(a, "agent_a").await.0, StatusCode::OK);
}

#[tokio::test]
async fn revocation_authorization() {
    let h = Harness::new();
    h.insert_client("client_123", &["gpt-4"], &[]);
    let user = h.user_token("user_456", "client_123", "email");
    let (_, issued) = h.post("/delegate", Some(&user), json!({"delegatee_client_id": "client_123", "scope": "email"})).await;
    let jti = issued["delegation_jti"].as_str().unwrap();

    let (status, _) = h.post("/revoke", None, json!({"jti": jti})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let other = h.user_token("user_999", "client_123", "email");
    let (status, body) = h.post("/revoke", Some(&other), json!({"jti": jti})).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_error(&body, "access_denied");

    let (status, body) = h.post("/revoke", Some(&user), json!({})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");

    for _ in 0..2 {
        let (status, body) = h.post("/revoke", Some(&user), json!({"jti": jti})).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["revoked"], true);
    }
    let (status, _) = h.post("/revoke", Some(ADMIN_TOKEN), json!({"jti": "anything"})).await;
    assert_eq!(status, StatusCode::OK);

    // A revoked step cannot be extended.
    let (status, body) = h
        .post("/delegate", issued["id_token"].as_str(), json!({"delegatee_client_id": "client_123", "scope": "email"}))
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_error(&body, "invalid_delegation");
}

#[tokio::test]
async fn state_survives_restart() {
    let data = tempfile::tempdir().unwrap();
    let (store_dir, audit) = (data.path().join("store"), data.path().join("audit.log"));
    let configure = {
        let (store_dir, audit) = (store_dir.clone(), audit.clone());
        move |c: &mut oidca_server::ServerConfig| {
            c.data_dir = Some(store_dir);
            c.audit_log = Some(audit);
        }
    };

    let first = Harness::configured(configure.clone());
    first.insert_client("client_123", &["gpt-4"], &[]);
    let user = first.user_token("user_456", "client_123", "email");
    let (_, issued) = first.post("/delegate", Some(&user), json!({"delegatee_client_id": "client_123", "scope": "email"})).await;
    let jti = issued["delegation_jti"].as_str().unwrap().to_owned();
    drop(first);

    let second = Harness::configured(configure);
    // Same signing key, same clients, same audit index.
    let (status, body) = second.post("/revoke", Some(&user), json!({"jti": jti})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let log = std::fs::read_to_string(&audit).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 2);
    assert_eq!(events[0]["event"], "delegation");
    assert_eq!(events[0]["delegator"], "user_456");
    assert_eq!(events[1]["event"], "revocation");
}
