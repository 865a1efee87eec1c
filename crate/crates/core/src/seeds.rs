//! Order-independent random streams.
//!
//! Every stream is keyed by `(master seed, label, indices)` through SHA-256,
//! so a trial or mobile draws the same numbers no matter which thread runs
//! it or how many other streams exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

/// First eight bytes of [`derive_seed`], for APIs that take a `u64` seed.
pub fn derive_u64(master: u64, label: &str, indices: &[u64]) -> u64 {
    let b = derive_seed(master, label, indices);
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

pub fn stream(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, label, indices))
}
