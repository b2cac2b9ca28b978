use std::fmt;

use zeroize::Zeroize;

use super::CryptoError;
use crate::instrument::LiveTracker;

/// Decrypted document bytes.
///
/// Every buffer is taint-marked from construction and the mark cannot be
/// cleared. Sinks that persist or log bytes (blob storage, the audit log)
/// accept input through [`SinkBytes`] and reject anything tainted. The only
/// way information leaves a buffer is through an analyzer, whose result type
/// is a separate, untainted value.
pub struct PlaintextBuffer {
    bytes: Vec<u8>,
    wiped: bool,
    tracker: LiveTracker,
}

impl PlaintextBuffer {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self::with_tracker(bytes, LiveTracker::global())
    }

    pub fn with_tracker(bytes: Vec<u8>, tracker: &LiveTracker) -> Self {
        tracker.buffer_created();
        Self {
            bytes,
            wiped: false,
            tracker: tracker.clone(),
        }
    }

    pub fn is_tainted(&self) -> bool {
        true
    }

    pub fn is_wiped(&self) -> bool {
        self.wiped
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn expose(&self) -> Result<&[u8], CryptoError> {
        if self.wiped {
            Err(CryptoError::BufferWiped)
        } else {
            Ok(&self.bytes)
        }
    }

    /// Zeroes the contents in place (length is kept) and deregisters.
    pub fn wipe(&mut self) {
        if !self.wiped {
            self.bytes.as_mut_slice().zeroize();
            self.wiped = true;
            self.tracker.buffer_wiped();
        }
    }

    #[cfg(any(test, feature = "test-hooks"))]
    pub fn backing_snapshot(&self) -> Vec<u8> {
        self.bytes.clone()
    }
}

impl Drop for PlaintextBuffer {
    fn drop(&mut self) {
        self.wipe();
    }
}

impl fmt::Debug for PlaintextBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlaintextBuffer")
            .field("len", &self.bytes.len())
            .field("wiped", &self.wiped)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaintedInput;

/// Bytes offered to a persistence or logging sink.
pub trait SinkBytes {
    fn sink_bytes(&self) -> Result<&[u8], TaintedInput>;
}

impl SinkBytes for [u8] {
    fn sink_bytes(&self) -> Result<&[u8], TaintedInput> {
        Ok(self)
    }
}

impl SinkBytes for Vec<u8> {
    fn sink_bytes(&self) -> Result<&[u8], TaintedInput> {
        Ok(self)
    }
}

impl<const N: usize> SinkBytes for [u8; N] {
    fn sink_bytes(&self) -> Result<&[u8], TaintedInput> {
        Ok(self)
    }
}

impl SinkBytes for PlaintextBuffer {
    fn sink_bytes(&self) -> Result<&[u8], TaintedInput> {
        Err(TaintedInput)
    }
}
