//! Counter-based RNG substreams.
//!
//! Every random decision is drawn from a ChaCha stream keyed by a tuple of
//! integers (seed, purpose tag, image id, ...), so results never depend on
//! iteration order over images or annotations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit stream id.
pub fn stream_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| mix64(acc ^ mix64(p)))
}

/// A reproducible generator for the given key tuple.
pub fn substream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(parts))
}

/// Purpose tags keep substreams for different operations disjoint.
pub mod tag {
    pub const MISSING: u64 = 1;
    pub const CLASS_SHIFT: u64 = 2;
    pub const EXTRA: u64 = 3;
    pub const BOX: u64 = 4;
    pub const SCENE: u64 = 10;
    pub const INIT: u64 = 20;
    pub const SHUFFLE: u64 = 21;
}
