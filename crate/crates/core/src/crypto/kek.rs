use rsa::pkcs8::{DecodePublicKey, EncodePublicKey, LineEnding};
use rsa::traits::PublicKeyParts;
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use sha2::Sha256;
use zeroize::Zeroizing;

use super::{CryptoError, DataKey};
use crate::entropy::{seeded_rng, EntropySource};
use crate::instrument::LiveTracker;

/// Modulus size of every key pair the vault generates.
pub const KEK_BITS: usize = 3072;
/// Smallest modulus accepted for wrapping.
pub const MIN_KEK_BITS: usize = 3072;

/// RSA-OAEP ciphertext of a [`DataKey`] plus the identity of the wrapping key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WrappedDataKey {
    pub bytes: Vec<u8>,
    pub kek_name: String,
    pub kek_version: u32,
}

/// Public half of a key-encryption key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KekPublicKey(RsaPublicKey);

impl KekPublicKey {
    pub fn from_pem(pem: &str) -> Result<Self, CryptoError> {
        RsaPublicKey::from_public_key_pem(pem)
            .map(KekPublicKey)
            .map_err(|e| CryptoError::InvalidPublicKey(e.to_string()))
    }

    pub fn to_pem(&self) -> Result<String, CryptoError> {
        self.0
            .to_public_key_pem(LineEnding::LF)
            .map_err(|e| CryptoError::InvalidPublicKey(e.to_string()))
    }

    pub fn modulus_bits(&self) -> usize {
        self.0.n().bits()
    }

    /// Length in bytes of every ciphertext produced under this key.
    pub fn modulus_len(&self) -> usize {
        self.0.size()
    }

    pub(crate) fn from_private(private: &RsaPrivateKey) -> Self {
        KekPublicKey(private.to_public_key())
    }
}

fn oaep() -> Oaep {
    Oaep::new::<Sha256>()
}

/// Wraps `key` with RSA-OAEP-SHA256 under `kek`. Randomized: two wraps of the
/// same key differ.
pub fn wrap_data_key(
    key: &DataKey,
    kek: &KekPublicKey,
    kek_name: &str,
    kek_version: u32,
    source: &dyn EntropySource,
) -> Result<WrappedDataKey, CryptoError> {
    let bits = kek.modulus_bits();
    if bits < MIN_KEK_BITS {
        return Err(CryptoError::PolicyViolation { bits });
    }
    let mut rng = seeded_rng(source)?;
    let bytes = kek
        .0
        .encrypt(&mut rng, oaep(), key.expose_secret()?)
        .map_err(|e| CryptoError::WrapFailure(e.to_string()))?;
    Ok(WrappedDataKey {
        bytes,
        kek_name: kek_name.to_owned(),
        kek_version,
    })
}

/// Inverse of [`wrap_data_key`]. Only the vault holds private keys.
pub(crate) fn unwrap_data_key(
    private: &RsaPrivateKey,
    wrapped: &WrappedDataKey,
    source: &dyn EntropySource,
    tracker: &LiveTracker,
) -> Result<DataKey, CryptoError> {
    let mut rng = seeded_rng(source)?;
    let raw = Zeroizing::new(
        private
            .decrypt_blinded(&mut rng, oaep(), &wrapped.bytes)
            .map_err(|_| CryptoError::UnwrapFailure)?,
    );
    DataKey::try_from_slice(&raw, tracker).map_err(|_| CryptoError::UnwrapFailure)
}

pub(crate) fn generate_kek(
    bits: usize,
    source: &dyn EntropySource,
) -> Result<RsaPrivateKey, CryptoError> {
    let mut rng = seeded_rng(source)?;
    RsaPrivateKey::new(&mut rng, bits).map_err(|e| CryptoError::KeyGeneration(e.to_string()))
}
