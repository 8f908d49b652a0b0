//! Stable seed derivation.
//!
//! Every stochastic component draws from a ChaCha stream keyed by a seed
//! derived from the global seed plus a path of labels (period, role, subject,
//! invocation). Derivation goes through SHA-256 so it is stable across
//! platforms and toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a seed derivation path.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Label(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Label(s)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(n: u64) -> Self {
        SeedPart::Index(n)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(n: usize) -> Self {
        SeedPart::Index(n as u64)
    }
}

pub fn derive_seed(base: u64, parts: &[SeedPart<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        match part {
            SeedPart::Label(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            SeedPart::Index(n) => {
                hasher.update([1u8]);
                hasher.update(n.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(base: u64, parts: &[SeedPart<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
