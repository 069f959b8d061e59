//! Compact JWS signing and verification with ES256 and RS256 keys, plus JWK
//! set documents.
//!
//! Key ids default to the RFC 7638 thumbprint of the public key.

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use p256::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rsa::pkcs1::DecodeRsaPrivateKey;
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::traits::PublicKeyParts;
use rsa::{BigUint, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JoseError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("unsupported algorithm `{0}`")]
    UnsupportedAlgorithm(String),
    #[error("no trusted key matches kid {0:?}")]
    UnknownKey(Option<String>),
    #[error("signature verification failed")]
    BadSignature,
    #[error("invalid key: {0}")]
    Key(String),
    #[error("signing failed: {0}")]
    Signing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    ES256,
    RS256,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::ES256 => "ES256",
            Algorithm::RS256 => "RS256",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = JoseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ES256" => Ok(Algorithm::ES256),
            "RS256" => Ok(Algorithm::RS256),
            other => Err(JoseError::UnsupportedAlgorithm(other.to_owned())),
        }
    }
}

/// Protected header of a compact JWS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub alg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typ: Option<String>,
}

#[derive(Clone)]
enum PrivateKey {
    Es256(p256::ecdsa::SigningKey),
    Rs256(Box<RsaPrivateKey>),
}

#[derive(Clone)]
pub struct SigningKey {
    kid: String,
    key: PrivateKey,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey")
            .field("kid", &self.kid)
            .field("alg", &self.algorithm())
            .finish_non_exhaustive()
    }
}

impl SigningKey {
    pub fn generate(alg: Algorithm) -> Result<Self, JoseError> {
        let mut rng = rand::rngs::OsRng;
        let key = match alg {
            Algorithm::ES256 => PrivateKey::Es256(p256::ecdsa::SigningKey::random(&mut rng)),
            Algorithm::RS256 => PrivateKey::Rs256(Box::new(
                RsaPrivateKey::new(&mut rng, 2048).map_err(|e| JoseError::Key(e.to_string()))?,
            )),
        };
        Ok(Self::with_thumbprint_kid(key))
    }

    fn with_thumbprint_kid(key: PrivateKey) -> Self {
        let mut signing = SigningKey {
            kid: String::new(),
            key,
        };
        signing.kid = signing.verifying_key().thumbprint();
        signing
    }

    /// Parses a PKCS#8 private key (EC P-256 or RSA), or a PKCS#1 RSA key.
    pub fn from_pem(pem: &str) -> Result<Self, JoseError> {
        if let Ok(key) = p256::ecdsa::SigningKey::from_pkcs8_pem(pem) {
            return Ok(Self::with_thumbprint_kid(PrivateKey::Es256(key)));
        }
        let rsa = RsaPrivateKey::from_pkcs8_pem(pem)
            .or_else(|_| RsaPrivateKey::from_pkcs1_pem(pem))
            .map_err(|_| JoseError::Key("expected a PKCS#8 P-256 or RSA private key".into()))?;
        Ok(Self::with_thumbprint_kid(PrivateKey::Rs256(Box::new(rsa))))
    }

    pub fn to_pem(&self) -> Result<String, JoseError> {
        let doc = match &self.key {
            PrivateKey::Es256(k) => k.to_pkcs8_pem(LineEnding::LF),
            PrivateKey::Rs256(k) => k.to_pkcs8_pem(LineEnding::LF),
        };
        doc.map(|pem| pem.to_string())
            .map_err(|e| JoseError::Key(e.to_string()))
    }

    pub fn with_kid(mut self, kid: impl Into<String>) -> Self {
        self.kid = kid.into();
        self
    }

    pub fn kid(&self) -> &str {
        &self.kid
    }

    pub fn algorithm(&self) -> Algorithm {
        match self.key {
            PrivateKey::Es256(_) => Algorithm::ES256,
            PrivateKey::Rs256(_) => Algorithm::RS256,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        let key = match &self.key {
            PrivateKey::Es256(k) => PublicKey::Es256(*k.verifying_key()),
            PrivateKey::Rs256(k) => PublicKey::Rs256(k.to_public_key()),
        };
        VerifyingKey {
            kid: self.kid.clone(),
            key,
        }
    }

    pub fn sign(&self, message: &[u8]) -> Result<Vec<u8>, JoseError> {
        match &self.key {
            PrivateKey::Es256(k) => {
                let sig: p256::ecdsa::Signature = k
                    .try_sign(message)
                    .map_err(|e| JoseError::Signing(e.to_string()))?;
                Ok(sig.to_bytes().to_vec())
            }
            PrivateKey::Rs256(k) => {
                let signer = rsa::pkcs1v15::SigningKey::<Sha256>::new((**k).clone());
                let sig = signer
                    .try_sign(message)
                    .map_err(|e| JoseError::Signing(e.to_string()))?;
                Ok(sig.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PublicKey {
    Es256(p256::ecdsa::VerifyingKey),
    Rs256(RsaPublicKey),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyingKey {
    kid: String,
    key: PublicKey,
}

impl VerifyingKey {
    pub fn from_pem(pem: &str) -> Result<Self, JoseError> {
        let key = if let Ok(k) = p256::ecdsa::VerifyingKey::from_public_key_pem(pem) {
            PublicKey::Es256(k)
        } else {
            PublicKey::Rs256(
                RsaPublicKey::from_public_key_pem(pem)
                    .map_err(|_| JoseError::Key("expected an SPKI P-256 or RSA public key".into()))?,
            )
        };
        let mut vk = VerifyingKey {
            kid: String::new(),
            key,
        };
        vk.kid = vk.thumbprint();
        Ok(vk)
    }

    pub fn to_pem(&self) -> Result<String, JoseError> {
        match &self.key {
            PublicKey::Es256(k) => k.to_public_key_pem(LineEnding::LF),
            PublicKey::Rs256(k) => k.to_public_key_pem(LineEnding::LF),
        }
        .map_err(|e| JoseError::Key(e.to_string()))
    }

    pub fn with_kid(mut self, kid: impl Into<String>) -> Self {
        self.kid = kid.into();
        self
    }

    pub fn kid(&self) -> &str {
        &self.kid
    }

    pub fn algorithm(&self) -> Algorithm {
        match self.key {
            PublicKey::Es256(_) => Algorithm::ES256,
            PublicKey::Rs256(_) => Algorithm::RS256,
        }
    }

    /// RFC 7638 JWK thumbprint, base64url SHA-256.
    pub fn thumbprint(&self) -> String {
        let jwk = self.public_members();
        let canonical = match &self.key {
            PublicKey::Es256(_) => format!(
                r#"{{"crv":"{}","kty":"EC","x":"{}","y":"{}"}}"#,
                jwk.crv.unwrap_or_default(),
                jwk.x.unwrap_or_default(),
                jwk.y.unwrap_or_default()
            ),
            PublicKey::Rs256(_) => format!(
                r#"{{"e":"{}","kty":"RSA","n":"{}"}}"#,
                jwk.e.unwrap_or_default(),
                jwk.n.unwrap_or_default()
            ),
        };
        URL_SAFE_NO_PAD.encode(Sha256::digest(canonical.as_bytes()))
    }

    fn public_members(&self) -> Jwk {
        match &self.key {
            PublicKey::Es256(k) => {
                let point = k.to_encoded_point(false);
                Jwk {
                    kty: "EC".into(),
                    crv: Some("P-256".into()),
                    x: point.x().map(|x| URL_SAFE_NO_PAD.encode(x)),
                    y: point.y().map(|y| URL_SAFE_NO_PAD.encode(y)),
                    ..Jwk::default()
                }
            }
            PublicKey::Rs256(k) => Jwk {
                kty: "RSA".into(),
                n: Some(URL_SAFE_NO_PAD.encode(k.n().to_bytes_be())),
                e: Some(URL_SAFE_NO_PAD.encode(k.e().to_bytes_be())),
                ..Jwk::default()
            },
        }
    }

    pub fn to_jwk(&self) -> Jwk {
        Jwk {
            kid: Some(self.kid.clone()),
            alg: Some(self.algorithm().as_str().to_owned()),
            key_use: Some("sig".into()),
            ..self.public_members()
        }
    }

    pub fn from_jwk(jwk: &Jwk) -> Result<Self, JoseError> {
        let decode = |field: &Option<String>, name: &str| -> Result<Vec<u8>, JoseError> {
            let value = field
                .as_deref()
                .ok_or_else(|| JoseError::Key(format!("JWK is missing `{name}`")))?;
            URL_SAFE_NO_PAD
                .decode(value)
                .map_err(|_| JoseError::Key(format!("JWK `{name}` is not base64url")))
        };
        let key = match jwk.kty.as_str() {
            "EC" => {
                if jwk.crv.as_deref() != Some("P-256") {
                    return Err(JoseError::Key("only the P-256 curve is supported".into()));
                }
                let x = decode(&jwk.x, "x")?;
                let y = decode(&jwk.y, "y")?;
                if x.len() != 32 || y.len() != 32 {
                    return Err(JoseError::Key("P-256 coordinates must be 32 bytes".into()));
                }
                let sec1 = [&[0x04][..], &x, &y].concat();
                PublicKey::Es256(
                    p256::ecdsa::VerifyingKey::from_sec1_bytes(&sec1)
                        .map_err(|_| JoseError::Key("point is not on the curve".into()))?,
                )
            }
            "RSA" => {
                let n = BigUint::from_bytes_be(&decode(&jwk.n, "n")?);
                let e = BigUint::from_bytes_be(&decode(&jwk.e, "e")?);
                PublicKey::Rs256(RsaPublicKey::new(n, e).map_err(|e| JoseError::Key(e.to_string()))?)
            }
            other => return Err(JoseError::Key(format!("unsupported key type `{other}`"))),
        };
        if let Some(alg) = &jwk.alg {
            let alg: Algorithm = alg.parse()?;
            let expected = match key {
                PublicKey::Es256(_) => Algorithm::ES256,
                PublicKey::Rs256(_) => Algorithm::RS256,
            };
            if alg != expected {
                return Err(JoseError::Key(format!("`alg` {alg} does not fit the key type")));
            }
        }
        let mut vk = VerifyingKey {
            kid: String::new(),
            key,
        };
        vk.kid = jwk.kid.clone().unwrap_or_else(|| vk.thumbprint());
        Ok(vk)
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        match &self.key {
            PublicKey::Es256(k) => p256::ecdsa::Signature::from_slice(signature)
                .map(|sig| k.verify(message, &sig).is_ok())
                .unwrap_or(false),
            PublicKey::Rs256(k) => {
                let verifier = rsa::pkcs1v15::VerifyingKey::<Sha256>::new(k.clone());
                rsa::pkcs1v15::Signature::try_from(signature)
                    .map(|sig| verifier.verify(message, &sig).is_ok())
                    .unwrap_or(false)
            }
        }
    }
}

/// Public JSON Web Key. Private members are deliberately not representable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jwk {
    pub kty: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alg: Option<String>,
    #[serde(rename = "use", default, skip_serializing_if = "Option::is_none")]
    pub key_use: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jwks {
    pub keys: Vec<Jwk>,
}

/// Set of trusted verification keys, looked up by key id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeySet {
    keys: Vec<VerifyingKey>,
}

impl KeySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a key, replacing any key with the same id.
    pub fn insert(&mut self, key: VerifyingKey) {
        self.keys.retain(|k| k.kid != key.kid);
        self.keys.push(key);
    }

    pub fn get(&self, kid: &str) -> Option<&VerifyingKey> {
        self.keys.iter().find(|k| k.kid == kid)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VerifyingKey> {
        self.keys.iter()
    }

    pub fn from_jwks(jwks: &Jwks) -> Result<Self, JoseError> {
        let mut set = KeySet::new();
        for jwk in &jwks.keys {
            set.insert(VerifyingKey::from_jwk(jwk)?);
        }
        Ok(set)
    }

    pub fn to_jwks(&self) -> Jwks {
        Jwks {
            keys: self.keys.iter().map(VerifyingKey::to_jwk).collect(),
        }
    }

    fn select(&self, header: &Header) -> Result<&VerifyingKey, JoseError> {
        let alg: Algorithm = header.alg.parse()?;
        let key = match &header.kid {
            Some(kid) => self.get(kid),
            None => {
                let mut candidates = self.keys.iter().filter(|k| k.algorithm() == alg);
                match (candidates.next(), candidates.next()) {
                    (Some(only), None) => Some(only),
                    _ => None,
                }
            }
        }
        .ok_or_else(|| JoseError::UnknownKey(header.kid.clone()))?;
        if key.algorithm() != alg {
            return Err(JoseError::BadSignature);
        }
        Ok(key)
    }
}

impl FromIterator<VerifyingKey> for KeySet {
    fn from_iter<I: IntoIterator<Item = VerifyingKey>>(iter: I) -> Self {
        let mut set = KeySet::new();
        for key in iter {
            set.insert(key);
        }
        set
    }
}

impl Serialize for KeySet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_jwks().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for KeySet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let jwks = Jwks::deserialize(deserializer)?;
        KeySet::from_jwks(&jwks).map_err(serde::de::Error::custom)
    }
}

/// Signs `payload` into a compact JWS carrying `alg`, `kid` and optionally `typ`.
pub fn sign_compact(payload: &Value, key: &SigningKey, typ: Option<&str>) -> Result<String, JoseError> {
    let header = Header {
        alg: key.algorithm().as_str().to_owned(),
        kid: Some(key.kid().to_owned()),
        typ: typ.map(str::to_owned),
    };
    let header = serde_json::to_vec(&header).map_err(|e| JoseError::Signing(e.to_string()))?;
    let payload = serde_json::to_vec(payload).map_err(|e| JoseError::Signing(e.to_string()))?;
    let signing_input = format!("{}.{}", URL_SAFE_NO_PAD.encode(header), URL_SAFE_NO_PAD.encode(payload));
    let signature = key.sign(signing_input.as_bytes())?;
    Ok(format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(signature)))
}

struct Parts<'a> {
    signing_input: &'a str,
    header: Header,
    payload: Value,
    signature: Vec<u8>,
}

fn split(token: &str) -> Result<Parts<'_>, JoseError> {
    let mut segments = token.split('.');
    let (Some(h), Some(p), Some(s), None) = (segments.next(), segments.next(), segments.next(), segments.next())
    else {
        return Err(JoseError::Malformed("expected three dot-separated segments".into()));
    };
    let decode = |segment: &str, what: &str| {
        URL_SAFE_NO_PAD
            .decode(segment)
            .map_err(|_| JoseError::Malformed(format!("{what} is not base64url")))
    };
    let header: Header = serde_json::from_slice(&decode(h, "header")?)
        .map_err(|e| JoseError::Malformed(format!("header: {e}")))?;
    let payload: Value = serde_json::from_slice(&decode(p, "payload")?)
        .map_err(|e| JoseError::Malformed(format!("payload: {e}")))?;
    if !payload.is_object() {
        return Err(JoseError::Malformed("payload is not a JSON object".into()));
    }
    Ok(Parts {
        signing_input: &token[..h.len() + 1 + p.len()],
        header,
        payload,
        signature: decode(s, "signature")?,
    })
}

/// Verifies a compact JWS against `keys` and returns its header and payload.
pub fn verify_compact(token: &str, keys: &KeySet) -> Result<(Header, Value), JoseError> {
    let parts = split(token)?;
    let key = keys.select(&parts.header)?;
    if !key.verify(parts.signing_input.as_bytes(), &parts.signature) {
        return Err(JoseError::BadSignature);
    }
    Ok((parts.header, parts.payload))
}

/// Decodes a compact JWS without checking its signature.
pub fn decode_unverified(token: &str) -> Result<(Header, Value), JoseError> {
    let parts = split(token)?;
    Ok((parts.header, parts.payload))
}

/// True when `token` looks like three non-empty base64url segments.
pub fn is_compact_shape(token: &str) -> bool {
    let segments: Vec<&str> = token.split('.').collect();
    segments.len() == 3
        && segments.iter().all(|s| {
            !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        })
}
