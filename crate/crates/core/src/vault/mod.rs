//! Emulated key vaults.
//!
//! [`KeyVault`] holds non-exportable RSA key pairs: callers get public keys
//! and unwrap results, never private material. [`SecretVault`] stores the
//! wrapped data keys, one per document. Both authorize every call against the
//! role matrix, audit every outcome, and persist records sealed under a vault
//! master key so a raw disk read yields nothing usable.

mod keys;
mod secrets;

use thiserror::Error;

use crate::audit::AuditError;
use crate::crypto::CryptoError;
use crate::identity::Denied;
use crate::ids::InvalidIdentifier;

pub use keys::{KeyFactory, KeyHandle, KeyVault};
pub use secrets::{SecretRecord, SecretVault};

/// Environment variable holding the hex-encoded vault master key.
pub const VAULT_MASTER_KEY_ENV: &str = "LOCKBOX_VAULT_MASTER_KEY";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VaultError {
    #[error(transparent)]
    Unauthorized(#[from] Denied),
    #[error("key {0} not found")]
    KeyNotFound(String),
    #[error("key {0} is disabled")]
    KeyDisabled(String),
    #[error("wrapped key names {wrapped} but handle is {handle}")]
    KekMismatch { wrapped: String, handle: String },
    #[error("unwrap failed")]
    UnwrapFailure,
    #[error("key generation failed: {0}")]
    KeyGenerationFailure(String),
    #[error("secret {0} already exists")]
    DuplicateSecret(String),
    #[error("secret {0} not found")]
    SecretNotFound(String),
    #[error("audit unavailable: {0}")]
    AuditUnavailable(String),
    #[error(transparent)]
    InvalidIdentifier(#[from] InvalidIdentifier),
    #[error("vault storage: {0}")]
    Storage(String),
}

impl From<AuditError> for VaultError {
    fn from(e: AuditError) -> Self {
        VaultError::AuditUnavailable(e.to_string())
    }
}

impl From<CryptoError> for VaultError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::UnwrapFailure => VaultError::UnwrapFailure,
            CryptoError::KeyGeneration(m) => VaultError::KeyGenerationFailure(m),
            other => VaultError::Storage(other.to_string()),
        }
    }
}

fn storage(e: impl std::fmt::Display) -> VaultError {
    VaultError::Storage(e.to_string())
}
