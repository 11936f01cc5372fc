//! Stable seed derivation.
//!
//! Seeds for per-clip sampling and per-copy augmentation are derived by
//! hashing their identifying fields, so the same (global seed, clip, epoch)
//! always yields the same stream regardless of iteration order or platform.

use sha2::{Digest, Sha256};

#[derive(Clone)]
pub struct SeedHasher(Sha256);

impl SeedHasher {
    pub fn new(domain: &str, global_seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update((domain.len() as u64).to_le_bytes());
        h.update(domain.as_bytes());
        h.update(global_seed.to_le_bytes());
        Self(h)
    }

    pub fn str(mut self, s: &str) -> Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn finish(self) -> u64 {
        let digest = self.0.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}
