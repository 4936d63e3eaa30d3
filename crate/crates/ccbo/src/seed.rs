//! Deterministic seed derivation: master seed -> named child streams.
//!
//! Children are derived with FNV-1a over the parent state and a tag, so the
//! scheme is stable across platforms and documented in the README.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree(u64);

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ state.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self(master)
    }

    pub fn child(&self, tag: &str) -> Self {
        Self(fnv1a(self.0, tag.as_bytes()))
    }

    pub fn child_idx(&self, tag: &str, idx: u64) -> Self {
        let base = fnv1a(self.0, tag.as_bytes());
        Self(fnv1a(base, &idx.to_le_bytes()))
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.0)
    }
}
