use super::{decrypt_document, CryptoError, DataKey, EncryptedPayload};
use crate::par::{self, Mode};

/// Outcome of decrypting every single-bit mutation of a sealed payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlipSweep {
    pub trials: usize,
    pub rejected: usize,
    /// Plaintext bytes returned by mutations that decrypted anyway.
    pub released_bytes: usize,
}

impl FlipSweep {
    pub fn all_rejected(&self) -> bool {
        self.trials > 0 && self.rejected == self.trials && self.released_bytes == 0
    }
}

/// Flips each bit of `nonce || ciphertext || tag` in turn and tries to decrypt.
pub fn bit_flip_sweep(sealed: &[u8], key: &DataKey, mode: Mode) -> FlipSweep {
    let trials = sealed.len() * 8;
    let outcomes = par::map_range(mode, trials, |bit| {
        let mut mutated = sealed.to_vec();
        mutated[bit / 8] ^= 1 << (bit % 8);
        let payload = match EncryptedPayload::from_bytes(&mutated) {
            Ok(p) => p,
            Err(_) => return (true, 0),
        };
        match decrypt_document(&payload, key) {
            Ok(mut buf) => {
                let n = buf.len();
                buf.wipe();
                (false, n)
            }
            Err(CryptoError::AuthenticationFailed) => (true, 0),
            Err(_) => (false, 0),
        }
    });
    outcomes
        .into_iter()
        .fold(FlipSweep { trials, ..Default::default() }, |mut acc, (ok, n)| {
            acc.rejected += ok as usize;
            acc.released_bytes += n;
            acc
        })
}
