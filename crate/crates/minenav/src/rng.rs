//! Deterministic random streams.
//!
//! All randomness in the crate flows from one master seed through named
//! streams, so runs are reproducible bit for bit and adding a consumer of
//! randomness in one place never perturbs draws made elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives independent named RNG streams from a single master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        SeedTree { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// A fresh stream for `name`. The same (master, name) pair always
    /// yields the same stream; distinct names yield unrelated streams.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update([0u8]);
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Convenience for per-instance streams like `env/7`.
    pub fn stream_indexed(&self, name: &str, index: usize) -> ChaCha8Rng {
        self.stream(&format!("{name}/{index}"))
    }
}

/// Snapshot of a ChaCha stream: its seed plus how far it has advanced.
/// Restoring reproduces the exact sequence of future draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> [u8; 48] {
        let mut out = [0u8; 48];
        out[..32].copy_from_slice(&self.seed);
        out[32..].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; 48]) -> Self {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let mut pos = [0u8; 16];
        pos.copy_from_slice(&bytes[32..]);
        RngState {
            seed,
            word_pos: u128::from_le_bytes(pos),
        }
    }
}
