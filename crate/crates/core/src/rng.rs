//! Labeled random streams derived from one master seed.
//!
//! Every consumer of randomness (initialization, collection, minibatch
//! shuffling, evaluation, filtering) draws from its own stream so that
//! toggling one stage never shifts the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream labels used by the training loop and the diagnostics.
pub mod labels {
    pub const INIT: &str = "init";
    pub const COLLECT: &str = "collect";
    pub const SHUFFLE: &str = "shuffle";
    pub const EVAL: &str = "eval";
    pub const FILTER: &str = "filter";
}

/// Derive a 32-byte stream seed from `(master, label, index)`.
pub fn stream_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn stream(master: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::from_seed(stream_seed(master, label, index))
}

/// A u64 sub-seed, for APIs that take an integer seed.
pub fn sub_seed(master: u64, label: &str, index: u64) -> u64 {
    let s = stream_seed(master, label, index);
    u64::from_le_bytes(s[..8].try_into().expect("8 bytes"))
}
