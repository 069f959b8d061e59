//! Agent identity, delegation and attestation primitives for OpenID Connect.
//!
//! The crate is organised around the artifacts a relying party or an
//! authorization server handles when software agents act on behalf of users:
//!
//! - [`claims`]: the agent claim vocabulary carried inside ID Tokens.
//! - [`scope`] and [`delegation`]: delegation chains, scope narrowing and the
//!   seven chain validation rules.
//! - [`attestation`]: EAT-format evidence verification with single-use nonces.
//! - [`token`]: minting and validating signed agent ID Tokens.
//! - [`discovery`] and [`registration`]: server metadata and agent client
//!   registration.
//! - [`store`]: persistence for keys, clients, nonces, measurements and
//!   revocations.
//!
//! Every operation that depends on time takes the current time explicitly as a
//! [`NumericDate`].

pub mod attestation;
pub mod claims;
pub mod clock;
pub mod delegation;
pub mod discovery;
pub mod jose;
pub mod registration;
pub mod scope;
pub mod store;
pub mod token;

mod random;

/// Seconds since the Unix epoch, as used by JWT.
pub type NumericDate = i64;

pub use random::random_id;
