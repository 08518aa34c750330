//! Seed expansion.
//!
//! Every random choice in the toolkit is driven by a ChaCha8 stream
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`). Component seeds are derived
//! from one top-level `u64` by hashing a textual label with 64-bit FNV-1a,
//! xoring it into the parent seed and finalizing with the SplitMix64 mixer:
//!
//! ```text
//! derive(parent, label) = splitmix64(parent ^ fnv1a64(label))
//! ```
//!
//! Labels used by the pipeline are `"split"`, `"f"`, `"g"`, `"head"`,
//! `"folds"`, and inside training `"init"` / `"shuffle"`. Derivations chain,
//! so `derive(derive(run, "g"), "init")` seeds the initial weights of g.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ fnv1a64(label))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
