//! Seeded random streams. Every consumer gets its own ChaCha stream so that
//! adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const INIT: u64 = 1;
    pub const GEOMETRY: u64 = 2;
    pub const APPEARANCE: u64 = 3;
    pub const FOLDS: u64 = 4;
    pub const DATA_ORDER: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const AUGMENT: u64 = 7;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream keyed by a purpose and an item index (e.g. one per generated image).
pub fn item_stream(seed: u64, purpose: u64, item: u64) -> Rng {
    stream(seed, (purpose << 40) | item)
}
