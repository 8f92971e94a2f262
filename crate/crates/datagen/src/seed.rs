//! Child-seed derivation for sharded or per-item generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the splitmix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `index` of `seed`: `splitmix64(splitmix64(seed) ^ index·φ)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(GOLDEN))
}

pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

/// Streams reserved for each generator so that they never share randomness.
pub(crate) mod stream {
    pub const SUBSET: u64 = 1;
    pub const DRO: u64 = 2;
    pub const CONCEPT_MNIST: u64 = 3;
    pub const CONCEPT_EMNIST: u64 = 4;
    pub const CMNIST: u64 = 5;
    pub const CMNIST_CONCEPT: u64 = 6;
}
