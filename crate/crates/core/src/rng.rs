//! Reproducible random substreams.
//!
//! Every random quantity in the crate is drawn from a ChaCha generator whose
//! seed is derived from a master seed and a path of integer tags. Derivation
//! is a pure function, so work units can be scheduled on any number of
//! threads and still see the same numbers as a sequential run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a path of tags.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &tag| {
        splitmix64(acc ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

/// Generator for the substream identified by `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}

/// Tags used to separate the independent uses of one seed.
pub(crate) mod tag {
    pub const COVARIATES: u64 = 1;
    pub const RESPONSE: u64 = 2;
    pub const PLAN: u64 = 3;
    pub const SELECTION_CV: u64 = 4;
    pub const ESTIMATION_CV: u64 = 5;
    pub const SIGNALS: u64 = 6;
    pub const REPLICATION: u64 = 7;
}
