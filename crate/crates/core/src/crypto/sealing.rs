use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Key};
use zeroize::{Zeroize, Zeroizing};

use super::{CryptoError, NONCE_LEN};
use crate::entropy::{random_bytes, EntropySource};

/// AES-256-GCM master key for records at rest (vault records, blobs).
///
/// Sealed form is `nonce || ciphertext || tag`; the caller-supplied label is
/// bound as associated data so a record cannot be swapped for another.
#[derive(Clone)]
pub struct SealingKey([u8; 32]);

impl SealingKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SealingKey(bytes)
    }

    /// Parses 64 hex characters.
    pub fn from_hex(hex_str: &str) -> Result<Self, CryptoError> {
        let raw = Zeroizing::new(
            hex::decode(hex_str.trim()).map_err(|_| CryptoError::InvalidKeyLength(0))?,
        );
        let bytes: [u8; 32] = raw
            .as_slice()
            .try_into()
            .map_err(|_| CryptoError::InvalidKeyLength(raw.len()))?;
        Ok(SealingKey(bytes))
    }

    pub fn generate(source: &dyn EntropySource) -> Result<Self, CryptoError> {
        Ok(SealingKey(random_bytes::<32>(source)?))
    }

    pub fn seal(
        &self,
        label: &[u8],
        plaintext: &[u8],
        source: &dyn EntropySource,
    ) -> Result<Vec<u8>, CryptoError> {
        let nonce = random_bytes::<NONCE_LEN>(source)?;
        let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&self.0));
        let ct = cipher
            .encrypt(
                (&nonce).into(),
                Payload {
                    msg: plaintext,
                    aad: label,
                },
            )
            .map_err(|_| CryptoError::WrapFailure("seal".into()))?;
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        Ok(out)
    }

    pub fn open(&self, label: &[u8], sealed: &[u8]) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
        if sealed.len() < NONCE_LEN {
            return Err(CryptoError::AuthenticationFailed);
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&self.0));
        cipher
            .decrypt(nonce.into(), Payload { msg: ct, aad: label })
            .map(Zeroizing::new)
            .map_err(|_| CryptoError::AuthenticationFailed)
    }
}

impl Drop for SealingKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl fmt::Debug for SealingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SealingKey(..)")
    }
}
