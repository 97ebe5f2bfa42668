//! Seeded random streams.
//!
//! One root seed drives an experiment. Every consumer draws from its own
//! ChaCha stream selected by `(component, index)`, so adding a consumer or
//! reordering work never perturbs the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream identifiers. Values are part of the determinism contract; do not renumber.
pub mod component {
    pub const ENV: u32 = 1;
    pub const EXPLORE: u32 = 2;
    pub const BUFFER: u32 = 3;
    pub const ANCHOR: u32 = 4;
    pub const MEMBER_BATCH: u32 = 5;
    pub const THOMPSON: u32 = 6;
    pub const GENERATOR: u32 = 7;
    pub const DATASET: u32 = 8;
    pub const ROLLOUT: u32 = 9;
}

/// Returns the stream for `(component, index)` under `root`.
pub fn stream(root: u64, component: u32, index: u32) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((component as u64) << 32) | index as u64);
    rng
}
