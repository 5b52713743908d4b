//! Seed plumbing. Every random stream is a ChaCha8 generator seeded from a
//! root seed mixed with a stream label, so adding a new consumer never shifts
//! the numbers an existing one sees.
//!
//! Mixing: `derive_seed(root, label) = splitmix64(root ^ splitmix64(fnv1a(label)))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(label)))
}

pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(root, label) ^ splitmix64(index))
}

pub fn rng_for(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label))
}
