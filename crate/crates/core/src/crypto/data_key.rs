use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use zeroize::Zeroize;

use super::CryptoError;
use crate::entropy::{random_bytes, EntropySource};
use crate::instrument::LiveTracker;

pub const DATA_KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;

/// Per-document AES-256 key.
///
/// A data key encrypts at most one document; a second
/// [`encrypt_document`](super::encrypt_document) with the same key fails with
/// [`CryptoError::KeyReused`], which is what makes random 96-bit nonces safe.
/// The bytes are zeroed by [`wipe`](DataKey::wipe) or on drop.
pub struct DataKey {
    bytes: [u8; DATA_KEY_LEN],
    used: AtomicBool,
    wiped: bool,
    tracker: LiveTracker,
}

impl DataKey {
    pub fn from_bytes(bytes: [u8; DATA_KEY_LEN]) -> Self {
        Self::with_tracker(bytes, LiveTracker::global())
    }

    pub fn with_tracker(bytes: [u8; DATA_KEY_LEN], tracker: &LiveTracker) -> Self {
        tracker.key_created();
        Self {
            bytes,
            used: AtomicBool::new(false),
            wiped: false,
            tracker: tracker.clone(),
        }
    }

    pub fn try_from_slice(bytes: &[u8], tracker: &LiveTracker) -> Result<Self, CryptoError> {
        let arr: [u8; DATA_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidKeyLength(bytes.len()))?;
        Ok(Self::with_tracker(arr, tracker))
    }

    pub fn expose_secret(&self) -> Result<&[u8; DATA_KEY_LEN], CryptoError> {
        if self.wiped {
            return Err(CryptoError::KeyWiped);
        }
        Ok(&self.bytes)
    }

    pub(crate) fn mark_used(&self) -> Result<(), CryptoError> {
        if self.used.swap(true, Ordering::SeqCst) {
            Err(CryptoError::KeyReused)
        } else {
            Ok(())
        }
    }

    pub fn is_wiped(&self) -> bool {
        self.wiped
    }

    pub(crate) fn tracker(&self) -> &LiveTracker {
        &self.tracker
    }

    pub fn wipe(&mut self) {
        if !self.wiped {
            self.bytes.zeroize();
            self.wiped = true;
            self.tracker.key_wiped();
        }
    }

    /// Reads the backing storage regardless of wipe state.
    #[cfg(any(test, feature = "test-hooks"))]
    pub fn backing_snapshot(&self) -> [u8; DATA_KEY_LEN] {
        self.bytes
    }
}

impl Drop for DataKey {
    fn drop(&mut self) {
        self.wipe();
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DataKey")
            .field("wiped", &self.wiped)
            .finish_non_exhaustive()
    }
}

/// Draws a fresh 32-byte data key from `source`.
pub fn generate_data_key(
    source: &dyn EntropySource,
    tracker: &LiveTracker,
) -> Result<DataKey, CryptoError> {
    let mut bytes = random_bytes::<DATA_KEY_LEN>(source)?;
    let key = DataKey::with_tracker(bytes, tracker);
    bytes.zeroize();
    Ok(key)
}

/// 96-bit AES-GCM nonce.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce([u8; NONCE_LEN]);

impl Nonce {
    pub fn from_bytes(bytes: [u8; NONCE_LEN]) -> Self {
        Nonce(bytes)
    }

    pub fn try_from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        bytes
            .try_into()
            .map(Nonce)
            .map_err(|_| CryptoError::InvalidNonceLength(bytes.len()))
    }

    pub fn generate(source: &dyn EntropySource) -> Result<Self, CryptoError> {
        Ok(Nonce(random_bytes::<NONCE_LEN>(source)?))
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", hex::encode(self.0))
    }
}
