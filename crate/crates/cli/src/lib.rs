//! `oidca`: key generation, token minting and validation, chain inspection,
//! offline delegation, attestation fixtures and the reference server.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage or input error.
//! Reports are JSON on stdout; diagnostics go to stderr.

mod input;
mod table;

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oidca_core::attestation::{measurement_digest, AttestationPolicy, AttestationStatus, AttestationVerifier, EatClaims};
use oidca_core::claims::{AgentClaims, ConstraintSet};
use oidca_core::clock::{Clock, SystemClock};
use oidca_core::delegation::{validate_delegation_chain, NoRevocations, TrustPolicy};
use oidca_core::jose::{self, Algorithm, KeySet, SigningKey};
use oidca_core::store::MemoryStore;
use oidca_core::token::{
    mint_agent_id_token, mint_delegated_token, validate_agent_id_token, validate_token_delegation, Delegatee,
    DelegationRequest, Issuer, StandardClaims, TokenError, ValidationOptions, DEFAULT_LEEWAY_SECONDS,
};
use oidca_core::NumericDate;
use serde_json::{json, Map, Value};

use input::{load_policy, load_signing_key, load_verification_keys, read_input, read_json, Failure};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "oidca", version, about = "Agent identity, delegation and attestation tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a signing key pair.
    Keygen(KeygenArgs),
    /// Sign a claims document as an ID token.
    Mint(MintArgs),
    /// Validate an ID token and report every check as JSON.
    Validate(ValidateArgs),
    /// Validate a delegation chain rule by rule.
    ChainInspect(ChainInspectArgs),
    /// Issue a delegated token from a parent token, offline.
    Delegate(DelegateArgs),
    /// Generate or verify EAT attestation evidence.
    #[command(subcommand)]
    Attest(AttestCommand),
    /// Run the reference authorization server.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgArg {
    Es256,
    Rs256,
}

impl From<AlgArg> for Algorithm {
    fn from(a: AlgArg) -> Self {
        match a {
            AlgArg::Es256 => Algorithm::ES256,
            AlgArg::Rs256 => Algorithm::RS256,
        }
    }
}

#[derive(Debug, Args)]
struct KeygenArgs {
    #[arg(long, value_enum, default_value = "es256")]
    alg: AlgArg,
    /// Private key output (PKCS#8 PEM).
    #[arg(long)]
    out: PathBuf,
    /// Public key output (SPKI PEM).
    #[arg(long)]
    public: Option<PathBuf>,
    /// Public key set output (JWKS JSON).
    #[arg(long)]
    jwks: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MintArgs {
    /// JSON claims document, or `-` for stdin.
    #[arg(long)]
    claims: String,
    /// Private key (PKCS#8 PEM).
    #[arg(long)]
    key: PathBuf,
    /// Override `iat` (and set `exp` from --lifetime).
    #[arg(long)]
    iat: Option<NumericDate>,
    #[arg(long, default_value_t = 3600)]
    lifetime: i64,
}

#[derive(Debug, Args)]
struct TimeArgs {
    /// Evaluate at this NumericDate instead of the system time.
    #[arg(long)]
    now: Option<NumericDate>,
}

impl TimeArgs {
    fn now(&self) -> NumericDate {
        self.now.unwrap_or_else(|| SystemClock.now())
    }
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Compact token, or `-` for stdin.
    #[arg(long)]
    token: String,
    /// Issuer public key: SPKI PEM, private PEM or JWKS.
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    issuer: String,
    #[arg(long)]
    audience: String,
    /// Trust policy JSON for chain validation. Defaults to trusting --issuer
    /// with a maximum chain length of 5.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LEEWAY_SECONDS)]
    leeway: u64,
    #[command(flatten)]
    time: TimeArgs,
}

#[derive(Debug, Args)]
struct ChainInspectArgs {
    /// Chain as a JSON array, an object with `delegation_chain`, or a compact
    /// token; `-` for stdin.
    #[arg(long)]
    input: String,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Print a table instead of JSON.
    #[arg(long)]
    pretty: bool,
    #[command(flatten)]
    time: TimeArgs,
}

#[derive(Debug, Args)]
struct DelegateArgs {
    /// Parent token, or `-` for stdin.
    #[arg(long)]
    parent: String,
    /// Issuer private key; also verifies the parent.
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    scope: String,
    /// `agent_instance_id` of the receiving agent.
    #[arg(long)]
    delegatee: String,
    /// `aud` of the issued token (the delegatee's client id).
    #[arg(long)]
    audience: String,
    /// Defaults to the parent's issuer.
    #[arg(long)]
    issuer: Option<String>,
    #[arg(long)]
    purpose: Option<String>,
    /// Constraint object as inline JSON.
    #[arg(long)]
    constraints: Option<String>,
    #[arg(long, default_value = "assistant")]
    agent_type: String,
    /// Defaults to the parent agent's model.
    #[arg(long)]
    model: Option<String>,
    /// Defaults to the parent agent's provider.
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    lifetime: Option<u64>,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[command(flatten)]
    time: TimeArgs,
}

#[derive(Debug, Subcommand)]
enum AttestCommand {
    /// Sign EAT evidence answering a nonce.
    Generate(AttestGenerateArgs),
    /// Verify evidence against trusted keys and reference measurements.
    Verify(AttestVerifyArgs),
}

#[derive(Debug, Args)]
struct AttestGenerateArgs {
    /// Attester private key.
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    nonce: String,
    #[arg(long)]
    provider: String,
    #[arg(long)]
    model: String,
    #[arg(long)]
    version: String,
    /// Hex SHA-256 of the agent build.
    #[arg(long, conflicts_with = "artifact", required_unless_present = "artifact")]
    digest: Option<String>,
    /// File to hash as the measurement.
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long, default_value = "urn:oidca:attester")]
    iss: String,
    #[command(flatten)]
    time: TimeArgs,
}

#[derive(Debug, Args)]
struct AttestVerifyArgs {
    /// Evidence JSON, or `-` for stdin.
    #[arg(long)]
    evidence: String,
    /// Attester public keys: SPKI PEM, private PEM or JWKS.
    #[arg(long)]
    trusted_keys: PathBuf,
    /// The challenge the evidence must answer.
    #[arg(long)]
    nonce: String,
    #[arg(long)]
    agent_id: String,
    /// `provider,model,version,digest`; repeatable.
    #[arg(long = "reference", value_name = "P,M,V,DIGEST")]
    references: Vec<String>,
    #[arg(long, default_value_t = oidca_core::attestation::DEFAULT_FRESHNESS_WINDOW_SECONDS)]
    freshness: u64,
    #[command(flatten)]
    time: TimeArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "OIDCA_CONFIG")]
    config: Option<PathBuf>,
}

struct Io<'a> {
    stdin: &'a mut dyn Read,
    stdout: &'a mut dyn Write,
}

impl Io<'_> {
    fn json(&mut self, value: &Value) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).expect("values serialize");
        text.push('\n');
        self.stdout.write_all(text.as_bytes()).map_err(Failure::io("stdout"))
    }

    fn line(&mut self, text: &str) -> Result<(), Failure> {
        writeln!(self.stdout, "{text}").map_err(Failure::io("stdout"))
    }
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                EXIT_USAGE
            } else {
                let _ = stdout.write_all(text.as_bytes());
                EXIT_OK
            };
        }
    };
    let mut io = Io { stdin, stdout };
    let outcome = match cli.command {
        Command::Keygen(a) => keygen(a, &mut io),
        Command::Mint(a) => mint(a, &mut io),
        Command::Validate(a) => validate(a, &mut io),
        Command::ChainInspect(a) => chain_inspect(a, &mut io),
        Command::Delegate(a) => delegate(a, &mut io),
        Command::Attest(AttestCommand::Generate(a)) => attest_generate(a, &mut io),
        Command::Attest(AttestCommand::Verify(a)) => attest_verify(a, &mut io),
        Command::Serve(a) => serve(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Invalid(message)) => {
            let _ = writeln!(stderr, "oidca: {message}");
            EXIT_INVALID
        }
        Err(Failure::Usage(message)) => {
            let _ = writeln!(stderr, "oidca: error: {message}");
            EXIT_USAGE
        }
    }
}

type Outcome = Result<i32, Failure>;

fn keygen(a: KeygenArgs, io: &mut Io) -> Outcome {
    let key = SigningKey::generate(a.alg.into()).map_err(Failure::usage)?;
    let write = |path: &PathBuf, text: &str| std::fs::write(path, text).map_err(Failure::io(path.display()));
    write(&a.out, &key.to_pem().map_err(Failure::usage)?)?;
    let public = key.verifying_key();
    if let Some(path) = &a.public {
        write(path, &public.to_pem().map_err(Failure::usage)?)?;
    }
    if let Some(path) = &a.jwks {
        let jwks = [public.clone()].into_iter().collect::<KeySet>().to_jwks();
        write(path, &serde_json::to_string_pretty(&jwks).expect("JWKS serializes"))?;
    }
    io.json(&json!({
        "alg": key.algorithm().as_str(),
        "kid": key.kid(),
        "private_key": a.out,
        "public_key": a.public,
        "jwks": a.jwks,
    }))?;
    Ok(EXIT_OK)
}

fn mint(a: MintArgs, io: &mut Io) -> Outcome {
    let mut doc = match read_json(&a.claims, io.stdin)? {
        Value::Object(o) => o,
        _ => return Err(Failure::Usage("claims must be a JSON object".into())),
    };
    if let Some(iat) = a.iat {
        doc.insert("iat".into(), iat.into());
        doc.insert("exp".into(), (iat + a.lifetime).into());
    }
    let key = load_signing_key(&a.key)?;
    let standard = StandardClaims::from_json(&doc).map_err(|e| Failure::Usage(format!("claims: {e}")))?;
    let agent = oidca_core::claims::parse_agent_claims(&doc).map_err(|e| Failure::Usage(format!("claims: {e}")))?;
    let token = mint_agent_id_token(&standard, agent.as_ref(), &key).map_err(|e| Failure::Usage(e.to_string()))?;
    io.line(&token)?;
    Ok(EXIT_OK)
}

fn check(passed: bool) -> Value {
    json!({ "passed": passed })
}

fn failed(code: &str, detail: impl ToString) -> Value {
    json!({ "passed": false, "code": code, "detail": detail.to_string() })
}

fn skipped(reason: &str) -> Value {
    json!({ "passed": null, "skipped": reason })
}

fn default_policy(issuer: &str) -> TrustPolicy {
    TrustPolicy::trusting([issuer])
}

fn validate(a: ValidateArgs, io: &mut Io) -> Outcome {
    let token = read_input(&a.token, io.stdin)?.trim().to_owned();
    let keys = load_verification_keys(&a.keys)?;
    let policy = match &a.policy {
        Some(p) => load_policy(p)?,
        None => default_policy(&a.issuer),
    };
    let now = a.time.now();

    let header = match jose::decode_unverified(&token) {
        Ok((h, _)) => json!({ "alg": h.alg, "kid": h.kid, "typ": h.typ }),
        Err(e) => {
            io.json(&json!({
                "verdict": "invalid",
                "header": null,
                "checks": {
                    "signature": failed("malformed_token", e),
                    "standard_claims": skipped("token is malformed"),
                    "agent_claims": skipped("token is malformed"),
                    "delegation_chain": skipped("token is malformed"),
                },
            }))?;
            return Ok(EXIT_INVALID);
        }
    };

    let mut checks = Map::new();
    let mut summary = Map::new();
    let signature_ok = match jose::verify_compact(&token, &keys) {
        Ok(_) => {
            checks.insert("signature".into(), check(true));
            true
        }
        Err(e) => {
            checks.insert("signature".into(), failed("bad_signature", e));
            false
        }
    };

    let mut options = ValidationOptions::new(a.issuer.clone(), a.audience.clone());
    options.leeway_seconds = a.leeway;
    let validated = if signature_ok {
        match validate_agent_id_token(&token, &options, &keys, now) {
            Ok(v) => {
                checks.insert("standard_claims".into(), check(true));
                let mut agent = check(true);
                agent["present"] = v.agent.is_some().into();
                checks.insert("agent_claims".into(), agent);
                Some(v)
            }
            Err(e @ TokenError::Claims(_)) => {
                checks.insert("standard_claims".into(), check(true));
                checks.insert("agent_claims".into(), failed(e.code(), &e));
                None
            }
            Err(e) => {
                checks.insert("standard_claims".into(), failed(e.code(), &e));
                checks.insert("agent_claims".into(), skipped("standard claims failed"));
                None
            }
        }
    } else {
        checks.insert("standard_claims".into(), skipped("signature failed"));
        checks.insert("agent_claims".into(), skipped("signature failed"));
        None
    };

    let mut valid = validated.is_some();
    match &validated {
        None => {
            checks.insert("delegation_chain".into(), skipped("token did not validate"));
        }
        Some(v) => {
            summary.insert("sub".into(), v.standard.sub.clone().into());
            summary.insert("exp".into(), v.standard.exp.into());
            if let Some(agent) = &v.agent {
                summary.insert("agent_type".into(), agent.agent_type.as_str().into());
                summary.insert("agent_instance_id".into(), agent.agent_instance_id.clone().into());
            }
            let has_chain = v.agent.as_ref().and_then(|a| a.delegation_chain.as_ref()).is_some();
            if has_chain {
                let report = validate_token_delegation(v, &policy, now, &NoRevocations);
                valid &= report.is_valid();
                let mut entry = check(report.is_valid());
                entry["report"] = serde_json::to_value(&report).expect("reports serialize");
                checks.insert("delegation_chain".into(), entry);
            } else {
                checks.insert("delegation_chain".into(), skipped("token carries no delegation chain"));
            }
        }
    }

    io.json(&json!({
        "verdict": if valid { "valid" } else { "invalid" },
        "header": header,
        "checks": checks,
        "token": summary,
    }))?;
    Ok(if valid { EXIT_OK } else { EXIT_INVALID })
}

fn chain_inspect(a: ChainInspectArgs, io: &mut Io) -> Outcome {
    let text = read_input(&a.input, io.stdin)?;
    let chain = input::parse_chain(&text)?;
    let policy = match &a.policy {
        Some(p) => load_policy(p)?,
        None => TrustPolicy::trusting(chain.steps().first().map(|s| s.iss.clone())),
    };
    let report = validate_delegation_chain(&chain, &policy, a.time.now(), &NoRevocations);
    if a.pretty {
        io.line(&table::render(&chain, &report))?;
    } else {
        io.json(&json!({
            "steps": chain.to_json(),
            "report": report,
        }))?;
    }
    Ok(if report.is_valid() { EXIT_OK } else { EXIT_INVALID })
}

fn delegate(a: DelegateArgs, io: &mut Io) -> Outcome {
    let parent_token = read_input(&a.parent, io.stdin)?.trim().to_owned();
    let key = load_signing_key(&a.key)?;
    let keys: KeySet = [key.verifying_key()].into_iter().collect();
    let (_, claims) = jose::decode_unverified(&parent_token).map_err(|e| Failure::Invalid(format!("parent: {e}")))?;
    let issuer = a
        .issuer
        .clone()
        .or_else(|| claims["iss"].as_str().map(str::to_owned))
        .ok_or_else(|| Failure::Usage("parent has no `iss`; pass --issuer".into()))?;
    let parent_aud = match &claims["aud"] {
        Value::String(s) => s.clone(),
        Value::Array(v) => v.first().and_then(Value::as_str).unwrap_or_default().to_owned(),
        _ => String::new(),
    };
    let now = a.time.now();
    let parent = validate_agent_id_token(&parent_token, &ValidationOptions::new(issuer.clone(), parent_aud), &keys, now)
        .map_err(|e| Failure::Invalid(format!("parent token: {e}")))?;

    let inherited = parent.agent.as_ref();
    let model = a
        .model
        .clone()
        .or_else(|| inherited.map(|p| p.agent_model.clone()))
        .ok_or_else(|| Failure::Usage("parent is not an agent token; pass --model".into()))?;
    let provider = a
        .provider
        .clone()
        .or_else(|| inherited.map(|p| p.agent_provider.clone()))
        .ok_or_else(|| Failure::Usage("parent is not an agent token; pass --provider".into()))?;
    let agent_type = a.agent_type.parse().map_err(|e| Failure::Usage(format!("--agent-type: {e}")))?;
    let constraints = match &a.constraints {
        None => None,
        Some(text) => {
            let value: Value = serde_json::from_str(text).map_err(|e| Failure::Usage(format!("--constraints: {e}")))?;
            Some(ConstraintSet::from_json(&value).map_err(|e| Failure::Usage(format!("--constraints: {e}")))?)
        }
    };
    let policy = match &a.policy {
        Some(p) => load_policy(p)?,
        None => default_policy(&issuer),
    };
    let request = DelegationRequest {
        delegatee: Delegatee {
            agent: AgentClaims::new(agent_type, model, provider, a.delegatee.clone()),
            audience: a.audience.clone(),
        },
        scope: a.scope.clone(),
        purpose: a.purpose.clone(),
        constraints,
        lifetime_seconds: a.lifetime,
    };
    let issued = mint_delegated_token(&parent, &request, &Issuer::new(issuer, key), &policy, &NoRevocations, now)
        .map_err(|e| match e {
            TokenError::ScopeEscalation(_) | TokenError::ChainRejected(_) | TokenError::ConstraintConflict(_) => {
                Failure::Invalid(format!("{}: {e}", e.code()))
            }
            other => Failure::Usage(other.to_string()),
        })?;
    io.json(&json!({
        "id_token": issued.token,
        "delegation_jti": issued.step.jti,
        "expires_at": issued.standard.exp,
    }))?;
    Ok(EXIT_OK)
}

fn attest_generate(a: AttestGenerateArgs, io: &mut Io) -> Outcome {
    let key = load_signing_key(&a.key)?;
    let measurement = match (&a.digest, &a.artifact) {
        (Some(d), _) => d.to_ascii_lowercase(),
        (None, Some(path)) => measurement_digest(&std::fs::read(path).map_err(Failure::io(path.display()))?),
        (None, None) => unreachable!("clap requires one of --digest/--artifact"),
    };
    if !oidca_core::attestation::is_valid_digest(&measurement) {
        return Err(Failure::Usage("--digest must be 64 hex characters".into()));
    }
    let evidence = EatClaims {
        iss: a.iss,
        iat: a.time.now(),
        nonce: a.nonce,
        agent_provider: a.provider,
        agent_model: a.model,
        agent_version: a.version,
        measurement,
    }
    .into_evidence(&key)
    .map_err(|e| Failure::Usage(e.to_string()))?;
    io.json(&serde_json::to_value(evidence).expect("evidence serializes"))?;
    Ok(EXIT_OK)
}

fn attest_verify(a: AttestVerifyArgs, io: &mut Io) -> Outcome {
    let value = read_json(&a.evidence, io.stdin)?;
    let evidence = oidca_core::claims::AttestationEvidence::from_json(&value)
        .map_err(|e| Failure::Usage(format!("evidence: {e}")))?;
    let mut policy = AttestationPolicy::new(load_verification_keys(&a.trusted_keys)?);
    policy.freshness_window_seconds = a.freshness;
    let now = a.time.now();
    let verifier = AttestationVerifier::new(policy, Arc::new(MemoryStore::new()));
    for reference in &a.references {
        let parts: Vec<&str> = reference.split(',').collect();
        let [p, m, v, digest] = parts[..] else {
            return Err(Failure::Usage(format!("--reference `{reference}`: expected provider,model,version,digest")));
        };
        verifier
            .register_reference_measurement(p, m, v, &digest.to_ascii_lowercase())
            .map_err(|e| Failure::Usage(format!("--reference `{reference}`: {e}")))?;
    }
    verifier
        .register_nonce(&a.nonce, &a.agent_id, now)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let result = verifier
        .verify_attestation_evidence(&evidence, &a.agent_id, &a.nonce, now)
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    io.json(&serde_json::to_value(&result).expect("results serialize"))?;
    Ok(if result.status == AttestationStatus::Verified {
        EXIT_OK
    } else {
        EXIT_INVALID
    })
}

fn serve(a: ServeArgs) -> Outcome {
    let config = oidca_server::ServerConfig::load(a.config.as_deref()).map_err(Failure::usage)?;
    oidca_server::init_logging();
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::io("runtime"))?;
    runtime.block_on(oidca_server::serve(config)).map_err(Failure::usage)?;
    Ok(EXIT_OK)
}
