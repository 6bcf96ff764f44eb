//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`stream`] so that a `u64`
//! seed fully determines the output, independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of the `k`-th item of a stream rooted at `base`: `base ^ k`.
pub fn derive(base: u64, k: u64) -> u64 {
    base ^ k
}

/// Mixes a label into a seed so that unrelated streams (training batches,
/// held-out galleries, parameter init) never share a root.
pub fn fork(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded through splitmix64 together with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
