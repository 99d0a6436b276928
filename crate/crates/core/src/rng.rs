//! Splittable seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! `(seed, tag, index)`, so results do not depend on evaluation order or on
//! how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated consumers of one seed apart.
pub mod tag {
    pub const INSTANCES: u64 = 1;
    pub const SAMPLING: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN_BATCH: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const SWEEP: u64 = 7;
    pub const CRITIC_INIT: u64 = 8;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a seed with a tag into a new, well-separated seed.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag))
}

/// Independent stream number `index` under `(seed, tag)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag));
    rng.set_stream(index);
    rng
}
