use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Key};
use zeroize::Zeroize;

use super::{CryptoError, DataKey, Nonce, PlaintextBuffer, NONCE_LEN};

pub const TAG_LEN: usize = 16;

/// AES-256-GCM output: the nonce plus ciphertext with the 16-byte tag appended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedPayload {
    pub nonce: Nonce,
    pub ciphertext_and_tag: Vec<u8>,
}

impl EncryptedPayload {
    pub fn plaintext_len(&self) -> usize {
        self.ciphertext_and_tag.len().saturating_sub(TAG_LEN)
    }

    /// `nonce || ciphertext || tag`, the form kept in blob storage.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.ciphertext_and_tag.len());
        out.extend_from_slice(self.nonce.as_bytes());
        out.extend_from_slice(&self.ciphertext_and_tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(CryptoError::AuthenticationFailed);
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        Ok(Self {
            nonce: Nonce::try_from_slice(nonce)?,
            ciphertext_and_tag: rest.to_vec(),
        })
    }
}

fn cipher(key: &DataKey) -> Result<Aes256Gcm, CryptoError> {
    Ok(Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(
        key.expose_secret()?,
    )))
}

/// Encrypts one document. Consumes the key's single use.
pub fn encrypt_document(
    plaintext: &[u8],
    key: &DataKey,
    nonce: Nonce,
) -> Result<EncryptedPayload, CryptoError> {
    let cipher = cipher(key)?;
    key.mark_used()?;
    let mut buf = Vec::with_capacity(plaintext.len() + TAG_LEN);
    buf.extend_from_slice(plaintext);
    let tag = cipher
        .encrypt_in_place_detached(nonce.as_bytes().into(), b"", &mut buf)
        .map_err(|_| CryptoError::WrapFailure("aes-gcm encryption".into()))?;
    buf.extend_from_slice(&tag);
    Ok(EncryptedPayload {
        nonce,
        ciphertext_and_tag: buf,
    })
}

/// Verifies the tag and decrypts into a taint-marked buffer.
///
/// The tag is checked before any keystream is applied, so a failed call
/// never materializes plaintext.
pub fn decrypt_document(
    payload: &EncryptedPayload,
    key: &DataKey,
) -> Result<PlaintextBuffer, CryptoError> {
    let cipher = cipher(key)?;
    let body = &payload.ciphertext_and_tag;
    if body.len() < TAG_LEN {
        return Err(CryptoError::AuthenticationFailed);
    }
    let (ct, tag) = body.split_at(body.len() - TAG_LEN);
    let mut buf = ct.to_vec();
    match cipher.decrypt_in_place_detached(
        payload.nonce.as_bytes().into(),
        b"",
        &mut buf,
        tag.into(),
    ) {
        Ok(()) => Ok(PlaintextBuffer::with_tracker(buf, key.tracker())),
        Err(_) => {
            buf.zeroize();
            Err(CryptoError::AuthenticationFailed)
        }
    }
}
