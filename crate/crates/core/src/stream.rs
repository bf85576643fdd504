//! Counter-based RNG streams. Every random decision in the crate draws from a
//! ChaCha8 generator keyed by `(seed, domain, a, b)`, so independent
//! consumers (init, shuffling, per-batch noise, k-means restarts, synthesis)
//! never share or race a stream, and any draw can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const DOMAIN_SHUFFLE: u64 = 1;
pub(crate) const DOMAIN_NOISE: u64 = 2;
pub(crate) const DOMAIN_KMEANS: u64 = 3;
pub(crate) const DOMAIN_SYNTH: u64 = 4;
pub(crate) const DOMAIN_EMBED: u64 = 5;

pub(crate) fn keyed_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
