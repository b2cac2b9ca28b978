//! Injectable randomness.
//!
//! Every draw of key material, nonces and OAEP seeds goes through an
//! [`EntropySource`], so a failing source surfaces as an error instead of a
//! panic deep inside a cipher, and tests can script the bytes they get.

use std::sync::Mutex;

use rand::rngs::{OsRng, StdRng};
use rand::{RngCore, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("entropy source unavailable: {0}")]
pub struct EntropyUnavailable(pub String);

/// A randomness source that is safe to draw from concurrently.
pub trait EntropySource: Send + Sync {
    fn fill(&self, dest: &mut [u8]) -> Result<(), EntropyUnavailable>;
}

/// The operating system CSPRNG.
#[derive(Clone, Copy, Debug, Default)]
pub struct OsEntropy;

impl EntropySource for OsEntropy {
    fn fill(&self, dest: &mut [u8]) -> Result<(), EntropyUnavailable> {
        OsRng
            .try_fill_bytes(dest)
            .map_err(|e| EntropyUnavailable(e.to_string()))
    }
}

/// Emits 0x00, 0x01, 0x02, ... wrapping at 0xFF. Deterministic test source.
#[derive(Debug, Default)]
pub struct CountingEntropy {
    next: Mutex<u8>,
}

impl EntropySource for CountingEntropy {
    fn fill(&self, dest: &mut [u8]) -> Result<(), EntropyUnavailable> {
        let mut next = self.next.lock().expect("counting entropy poisoned");
        for b in dest {
            *b = *next;
            *next = next.wrapping_add(1);
        }
        Ok(())
    }
}

/// Always fails.
#[derive(Clone, Copy, Debug, Default)]
pub struct FailingEntropy;

impl EntropySource for FailingEntropy {
    fn fill(&self, _dest: &mut [u8]) -> Result<(), EntropyUnavailable> {
        Err(EntropyUnavailable("source offline".into()))
    }
}

/// A CSPRNG seeded from `source`, for APIs that want an `RngCore`.
pub(crate) fn seeded_rng(source: &dyn EntropySource) -> Result<StdRng, EntropyUnavailable> {
    let mut seed = <StdRng as SeedableRng>::Seed::default();
    source.fill(&mut seed)?;
    let rng = StdRng::from_seed(seed);
    zeroize::Zeroize::zeroize(&mut seed);
    Ok(rng)
}

pub(crate) fn random_bytes<const N: usize>(
    source: &dyn EntropySource,
) -> Result<[u8; N], EntropyUnavailable> {
    let mut out = [0u8; N];
    source.fill(&mut out)?;
    Ok(out)
}
