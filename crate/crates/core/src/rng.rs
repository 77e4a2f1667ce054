//! Keyed counter-based randomness.
//!
//! Every random quantity in a realization is addressed by a key
//! `(seed, purpose, depth, index)`. The ChaCha key is built from
//! `(seed, purpose, depth)` and the ChaCha stream id is the node index, so
//! the mapping from key to generator is injective and a node's draw never
//! depends on the order in which nodes are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent families of streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Purpose {
    NodeWeights = 1,
    PointSampling = 2,
    MonteCarlo = 3,
    Replica = 4,
}

/// Generator positioned at the start of the stream for `(seed, purpose, depth, index)`.
pub fn keyed_rng(seed: u64, purpose: Purpose, depth: u32, index: u64) -> ChaCha8Rng {
    let mut rng = level_rng(seed, purpose, depth);
    rng.set_stream(index);
    rng
}

/// Generator for a whole level; callers clone it and call `set_stream(index)`
/// per node to avoid rebuilding the key.
pub fn level_rng(seed: u64, purpose: Purpose, depth: u32) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&(purpose as u32).to_le_bytes());
    key[12..16].copy_from_slice(&depth.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Seed of replica `r` of an experiment with master seed `seed`.
pub fn replica_seed(seed: u64, replica: u64) -> u64 {
    use rand::RngCore;
    keyed_rng(seed, Purpose::Replica, 0, replica).next_u64()
}
