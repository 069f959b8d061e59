use oidca_demo::{check_scope_json, decode_token_json, inspect_chain_json};
use serde_json::Value;

const CALENDAR_CHAIN: &str = include_str!("../../../fixtures/calendar_chain.json");
const ASSISTANT_JWT: &str = include_str!("../../../fixtures/cli/assistant_token.jwt");
const NOW: i64 = 1_714_349_000;

fn outcomes(report: &Value) -> Vec<(String, String)> {
    report["rule_results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["rule"].as_str().unwrap().to_owned(), r["outcome"].as_str().unwrap().to_owned()))
        .collect()
}

#[test]
fn inspects_the_calendar_chain() {
    let out = inspect_chain_json(CALENDAR_CHAIN, "https://auth.example.com", 5, NOW).unwrap();
    assert_eq!(out["steps"].as_array().unwrap().len(), 2);
    assert_eq!(out["report"]["verdict"], "valid");
    assert!(outcomes(&out["report"]).iter().all(|(_, o)| o != "fail"));
}

#[test]
fn untrusted_issuer_and_short_limit_fail_their_rules() {
    let out = inspect_chain_json(CALENDAR_CHAIN, "https://elsewhere.example", 5, NOW).unwrap();
    assert!(outcomes(&out["report"]).contains(&("R2".into(), "fail".into())));

    let out = inspect_chain_json(CALENDAR_CHAIN, "", 1, NOW).unwrap();
    assert!(outcomes(&out["report"]).contains(&("R7".into(), "fail".into())));
    assert!(outcomes(&out["report"]).contains(&("R2".into(), "pass".into())));

    assert!(inspect_chain_json(CALENDAR_CHAIN, "", 0, NOW).is_err());
    assert!(inspect_chain_json("{", "", 5, NOW).is_err());
}

#[test]
fn reads_the_chain_out_of_a_token() {
    let out = inspect_chain_json(ASSISTANT_JWT, "", 5, NOW).unwrap();
    assert_eq!(out["steps"][0]["sub"], "user_456");
    assert_eq!(out["report"]["verdict"], "valid");
}

#[test]
fn scope_check_splits_covered_and_escalated() {
    let out = check_scope_json("email calendar", "calendar:view email:send files").unwrap();
    assert_eq!(out["allowed"], false);
    assert_eq!(out["covered"], serde_json::json!(["calendar:view", "email:send"]));
    assert_eq!(out["escalated"], serde_json::json!(["files"]));

    let out = check_scope_json("calendar:view", "calendar").unwrap();
    assert_eq!(out["escalated"], serde_json::json!(["calendar"]));

    assert_eq!(check_scope_json("email", "email").unwrap()["allowed"], true);
    assert!(check_scope_json("email", "").is_err());
}

#[test]
fn decodes_agent_claims_without_verifying() {
    let out = decode_token_json(ASSISTANT_JWT).unwrap();
    assert_eq!(out["header"]["alg"], "ES256");
    assert_eq!(out["agent"]["valid"], true);
    assert_eq!(out["agent"]["chain_length"], 1);
    assert_eq!(out["signature_checked"], false);
    assert!(decode_token_json("a.b").is_err());
}
