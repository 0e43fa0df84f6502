//! Named random sub-streams derived from a single root seed.
//!
//! Every stochastic component draws from `derive(root, label, index)` so a
//! component rerun on its own reproduces exactly what the full pipeline drew.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels used across the crate.
pub mod streams {
    pub const IMPUTATION: &str = "imputation";
    pub const SPLIT: &str = "split";
    pub const BOOTSTRAP: &str = "bootstrap";
    pub const BOOTSTRAP_IMPUTATION: &str = "bootstrap-imputation";
    pub const GENERATOR: &str = "generator";
    pub const LOOCV: &str = "loocv";
    pub const NULL_REFERENCE: &str = "null-reference";
    pub const TREND: &str = "trend";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed for `(label, index)` under `root`.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(label)).wrapping_add(splitmix64(index)))
}

/// Convenience: an RNG seeded from `derive(root, label, index)`.
pub fn rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, index))
}
