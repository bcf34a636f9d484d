//! Deterministic RNG stream derivation for parallel ensembles.
//!
//! Streams are keyed by `(master_seed, tags...)` where tags identify the
//! trajectory, site, cell, or restart. Folding is sequential, so
//! `stream(fold_seed(s, a), b)` equals `stream(s, a ++ b)`; ensemble drivers
//! rely on this to hand a folded per-trajectory seed to single-trajectory
//! simulators.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_TRAJECTORY: u64 = 0x7472_6a00;
pub const TAG_SITE: u64 = 0x7369_7400;
pub const TAG_CELL: u64 = 0x6365_6c00;
pub const TAG_GRAPH: u64 = 0x6772_6600;
pub const TAG_RESTART: u64 = 0x7273_7400;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold tags into a master seed.
pub fn fold_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = master;
    for &t in tags {
        let mut st = s ^ t.wrapping_mul(GAMMA);
        s = splitmix64(&mut st);
    }
    s
}

/// Derive an independent ChaCha8 stream for `(master, tags...)`.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = fold_seed(master, tags);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
