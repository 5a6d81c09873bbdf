//! Counter-based random streams.
//!
//! Every Monte-Carlo draw in the crate comes from a stream keyed by
//! `(seed, domain, a, b)`, typically `(seed, tag, step, sample index)`, so a
//! result never depends on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags that keep independent experiments on disjoint streams.
pub mod domain {
    pub const DATA: u64 = 1;
    pub const SAMPLER_INIT: u64 = 2;
    pub const SCORE_ERROR: u64 = 3;
    pub const KL_TERMINAL: u64 = 4;
    pub const COVARIANCE_SUM: u64 = 5;
    pub const FROBENIUS_SUM: u64 = 6;
    pub const POSTERIOR_MOMENTS: u64 = 7;
    pub const LOCALIZATION: u64 = 8;
    pub const POSTERIOR_MC: u64 = 9;
}

pub fn derived_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, domain, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
