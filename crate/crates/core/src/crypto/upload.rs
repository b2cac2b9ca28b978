//! Everything an uploader does before any byte leaves its machine.

use super::{encode_envelope, encrypt_document, generate_data_key, wrap_data_key, CryptoError, Envelope, KekPublicKey, Nonce};
use crate::entropy::EntropySource;
use crate::instrument::LiveTracker;

/// The key an upload session told the client to wrap under.
#[derive(Clone, Copy, Debug)]
pub struct UploadTarget<'a> {
    pub public_key_pem: &'a str,
    pub kek_name: &'a str,
    pub kek_version: u32,
}

/// Encrypts `plaintext` under a fresh data key, wraps the key for `target`
/// and returns the encoded envelope. The data key is wiped before return.
pub fn seal_for_upload(
    plaintext: &[u8],
    document_id: &str,
    target: UploadTarget<'_>,
    source: &dyn EntropySource,
    tracker: &LiveTracker,
) -> Result<Vec<u8>, CryptoError> {
    let kek = KekPublicKey::from_pem(target.public_key_pem)?;
    let mut key = generate_data_key(source, tracker)?;
    let nonce = Nonce::generate(source)?;
    let sealed = encrypt_document(plaintext, &key, nonce).and_then(|payload| {
        let wrapped = wrap_data_key(&key, &kek, target.kek_name, target.kek_version, source)?;
        Ok((payload, wrapped))
    });
    key.wipe();
    let (payload, wrapped) = sealed?;
    Ok(encode_envelope(&Envelope::new(document_id.to_owned(), wrapped, payload))?)
}
