//! Seed derivation. Every random stream in a run is keyed by the global seed
//! plus a label, so results do not depend on which worker draws first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stable 64-bit key for `(seed, label, index)`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}

/// Per-record augmentation stream: hash of global seed, record id and epoch.
pub fn record_stream(seed: u64, record_id: &str, epoch: u64) -> StreamRng {
    stream(seed, &format!("record:{record_id}"), epoch)
}
