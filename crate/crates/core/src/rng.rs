//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! plus a tag path (purpose, snapshot, epoch, batch, ...). Streams never
//! share state, so adding or skipping one consumer (for example token
//! initialization in an ablation) does not perturb any other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
pub mod purpose {
    pub const ENTITY_INIT: u64 = 1;
    pub const RELATION_INIT: u64 = 2;
    pub const TOKEN_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const NEGATIVES: u64 = 5;
    pub const STAGE1_SHUFFLE: u64 = 6;
    pub const STAGE1_NEGATIVES: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const GRAD_CHECK: u64 = 9;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `seed` refined by each tag in order.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(state)
}
