//! Seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose key is
//! derived from a root seed and a path of integer tags. ChaCha is a
//! counter-mode generator, so streams for different tags are independent and
//! reproducible regardless of evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with a path of tags into a child seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6D61_656D_6933_6421);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Generator for the stream identified by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let key = derive_seed(seed, tags);
    let mut bytes = [0u8; 32];
    let mut h = key;
    for chunk in bytes.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stream tags, kept in one place so that unrelated draws never collide.
pub(crate) mod tag {
    pub const INIT: u64 = 1;
    pub const EPOCH_ORDER: u64 = 2;
    pub const CROP: u64 = 3;
    pub const FLIP: u64 = 4;
    pub const MASK: u64 = 5;
    pub const INFER: u64 = 6;
    pub const PHANTOM: u64 = 7;
}
