//! Deterministic random-stream derivation.
//!
//! Every source of randomness in the simulator is a ChaCha8 stream derived
//! from a master seed plus a tag path (frame id, CAV id, ...). Streams with
//! different tag paths are statistically independent, so frames and per-CAV
//! transmissions can run concurrently without sharing mutable state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse a master seed and tag path into a single derived seed.
pub fn derive_seed(master_seed: u64, tags: &[u64]) -> u64 {
    let mut state = master_seed;
    let _ = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(GOLDEN | 1);
        let _ = splitmix64(&mut state);
    }
    splitmix64(&mut state)
}

/// Derive an independent ChaCha8 stream from a master seed and a tag path.
pub fn derive_rng(master_seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = master_seed;
    let _ = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(GOLDEN | 1);
        let _ = splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
