//! Seed derivation. Every random decision is drawn from a generator seeded by
//! [`derive_seed`], so no global RNG state exists anywhere in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream tags used when deriving per-purpose seeds.
pub mod stream {
    pub const LABELED_WEAK: u64 = 1;
    pub const UNLABELED_WEAK: u64 = 2;
    pub const UNLABELED_WEAK_2: u64 = 3;
    pub const UNLABELED_STRONG: u64 = 4;
    pub const VAT_DIRECTION: u64 = 5;
    pub const MIXUP: u64 = 6;
    pub const SAMPLER: u64 = 7;
    pub const STEP: u64 = 8;
    pub const INIT: u64 = 9;
    pub const AUGMENT_INSTANCE: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `(base, stream, index)` into an independent 64-bit seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream.rotate_left(17)) ^ index.rotate_left(41))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Serializable position of a [`ChaCha8Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
