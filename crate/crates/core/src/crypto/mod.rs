//! Client- and server-side cryptography.
//!
//! Documents are sealed with AES-256-GCM under a single-use [`DataKey`]
//! (empty AAD, 12-byte nonce, 16-byte tag appended to the ciphertext). The
//! data key is wrapped with RSA-OAEP (SHA-256, MGF1-SHA-256, empty label)
//! under a key-encryption key of at least 3072 bits. The [`envelope`] module
//! defines the binary container that carries both to the server.

mod data_key;
pub mod envelope;
mod kek;
mod payload;
mod plaintext;
mod sealing;
mod tamper;
mod upload;

use thiserror::Error;

use crate::entropy::EntropyUnavailable;

pub use data_key::{generate_data_key, DataKey, Nonce, DATA_KEY_LEN, NONCE_LEN};
pub use envelope::{decode_envelope, encode_envelope, Envelope, EnvelopeError};
pub use kek::{wrap_data_key, KekPublicKey, WrappedDataKey, KEK_BITS, MIN_KEK_BITS};
pub(crate) use kek::{generate_kek, unwrap_data_key};
pub use payload::{decrypt_document, encrypt_document, EncryptedPayload, TAG_LEN};
pub use plaintext::{PlaintextBuffer, SinkBytes, TaintedInput};
pub use sealing::SealingKey;
pub use tamper::{bit_flip_sweep, FlipSweep};
pub use upload::{seal_for_upload, UploadTarget};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error(transparent)]
    EntropyUnavailable(#[from] EntropyUnavailable),
    #[error("data key must be {DATA_KEY_LEN} bytes, got {0}")]
    InvalidKeyLength(usize),
    #[error("nonce must be {NONCE_LEN} bytes, got {0}")]
    InvalidNonceLength(usize),
    #[error("data key has already encrypted a document")]
    KeyReused,
    #[error("data key has been wiped")]
    KeyWiped,
    #[error("plaintext buffer has been wiped")]
    BufferWiped,
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("key-encryption key of {bits} bits is below the {MIN_KEK_BITS}-bit floor")]
    PolicyViolation { bits: usize },
    #[error("key wrap failed: {0}")]
    WrapFailure(String),
    #[error("key unwrap failed")]
    UnwrapFailure,
    #[error("invalid public key: {0}")]
    InvalidPublicKey(String),
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}
