//! The `LBX1` transit container.
//!
//! ```text
//! magic        4 bytes  "LBX1"
//! version      1 byte   0x01
//! document_id  u16 length + UTF-8
//! kek_name     u16 length + UTF-8
//! kek_version  u32
//! wrapped_key  u16 length + bytes
//! nonce        12 bytes
//! payload      u64 length + ciphertext||tag
//! ```
//!
//! Integers are big-endian and trailing bytes are rejected.

use thiserror::Error;

use super::{EncryptedPayload, Nonce, WrappedDataKey, NONCE_LEN, TAG_LEN};

pub const MAGIC: &[u8; 4] = b"LBX1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub version: u8,
    pub document_id: String,
    pub wrapped_key: WrappedDataKey,
    pub payload: EncryptedPayload,
}

impl Envelope {
    pub fn new(document_id: String, wrapped_key: WrappedDataKey, payload: EncryptedPayload) -> Self {
        Self {
            version: VERSION,
            document_id,
            wrapped_key,
            payload,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error("envelope field cannot be encoded: {0}")]
    NotWellFormed(&'static str),
}

fn check_well_formed(e: &Envelope) -> Result<(), EnvelopeError> {
    let fail = EnvelopeError::NotWellFormed;
    if e.version != VERSION {
        return Err(fail("version"));
    }
    if e.document_id.is_empty() || e.document_id.len() > u16::MAX as usize {
        return Err(fail("document_id length"));
    }
    if e.wrapped_key.kek_name.is_empty() || e.wrapped_key.kek_name.len() > u16::MAX as usize {
        return Err(fail("kek_name length"));
    }
    if e.wrapped_key.kek_version == 0 {
        return Err(fail("kek_version must be positive"));
    }
    if e.wrapped_key.bytes.is_empty() || e.wrapped_key.bytes.len() > u16::MAX as usize {
        return Err(fail("wrapped_key length"));
    }
    if e.payload.ciphertext_and_tag.len() < TAG_LEN {
        return Err(fail("payload shorter than tag"));
    }
    Ok(())
}

pub fn encode_envelope(e: &Envelope) -> Result<Vec<u8>, EnvelopeError> {
    check_well_formed(e)?;
    let w = &e.wrapped_key;
    let body = &e.payload.ciphertext_and_tag;
    let mut out = Vec::with_capacity(
        4 + 1 + 2 + e.document_id.len() + 2 + w.kek_name.len() + 4 + 2 + w.bytes.len()
            + NONCE_LEN + 8 + body.len(),
    );
    out.extend_from_slice(MAGIC);
    out.push(e.version);
    out.extend_from_slice(&(e.document_id.len() as u16).to_be_bytes());
    out.extend_from_slice(e.document_id.as_bytes());
    out.extend_from_slice(&(w.kek_name.len() as u16).to_be_bytes());
    out.extend_from_slice(w.kek_name.as_bytes());
    out.extend_from_slice(&w.kek_version.to_be_bytes());
    out.extend_from_slice(&(w.bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(&w.bytes);
    out.extend_from_slice(e.payload.nonce.as_bytes());
    out.extend_from_slice(&(body.len() as u64).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], EnvelopeError> {
        if self.buf.len() < n {
            return Err(EnvelopeError::Malformed(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], EnvelopeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N, what)?);
        Ok(out)
    }

    fn u16_prefixed(&mut self, what: &'static str) -> Result<&'a [u8], EnvelopeError> {
        let len = u16::from_be_bytes(self.array(what)?) as usize;
        self.take(len, what)
    }

    fn text(&mut self, what: &'static str) -> Result<String, EnvelopeError> {
        let raw = self.u16_prefixed(what)?;
        if raw.is_empty() {
            return Err(EnvelopeError::Malformed(what));
        }
        String::from_utf8(raw.to_vec()).map_err(|_| EnvelopeError::Malformed(what))
    }
}

/// Total over arbitrary input: returns a well-formed envelope or an error.
pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
    let mut r = Reader { buf: bytes };
    if r.take(4, "magic")? != MAGIC {
        return Err(EnvelopeError::Malformed("magic"));
    }
    let version = r.array::<1>("version")?[0];
    if version != VERSION {
        return Err(EnvelopeError::Malformed("version"));
    }
    let document_id = r.text("document_id")?;
    let kek_name = r.text("kek_name")?;
    let kek_version = u32::from_be_bytes(r.array("kek_version")?);
    if kek_version == 0 {
        return Err(EnvelopeError::Malformed("kek_version"));
    }
    let wrapped = r.u16_prefixed("wrapped_key")?;
    if wrapped.is_empty() {
        return Err(EnvelopeError::Malformed("wrapped_key"));
    }
    let nonce = Nonce::from_bytes(r.array("nonce")?);
    let payload_len = u64::from_be_bytes(r.array("payload length")?);
    if payload_len < TAG_LEN as u64 || payload_len != r.buf.len() as u64 {
        return Err(EnvelopeError::Malformed("payload length"));
    }
    let body = r.take(payload_len as usize, "payload")?;
    Ok(Envelope {
        version,
        document_id,
        wrapped_key: WrappedDataKey {
            bytes: wrapped.to_vec(),
            kek_name,
            kek_version,
        },
        payload: EncryptedPayload {
            nonce,
            ciphertext_and_tag: body.to_vec(),
        },
    })
}
