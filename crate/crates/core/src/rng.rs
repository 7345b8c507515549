//! Deterministic random-stream derivation.
//!
//! Everything stochastic in this crate draws from ChaCha streams derived from
//! a base seed plus a list of integer tags (epoch, block, row, ...). Work can
//! therefore be regrouped or parallelised without changing a single draw: the
//! stream belonging to a given (seed, tags) pair is always the same.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates consecutive tag values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse a seed and a tag path into a single 64-bit stream id.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = mix(seed ^ 0xA076_1D64_78BD_642F);
    for (i, &t) in tags.iter().enumerate() {
        state = mix(state ^ mix(t ^ (i as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB)));
    }
    state
}

/// Independent generator for the stream identified by (seed, tags).
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let s = derive_seed(seed, tags);
    let mut key = [0u8; 32];
    let mut word = s;
    for chunk in key.chunks_exact_mut(8) {
        word = mix(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
