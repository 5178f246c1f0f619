//! Seeded random streams.
//!
//! All randomness flows from a 64-bit master seed. Child streams are derived by
//! mixing the master seed with a path of integers (round, client, ...), which
//! keeps parallel execution bit-identical to sequential execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a path such as `[round, client_id]`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(master: u64, path: &[u64]) -> SimRng {
    seeded(derive_seed(master, path))
}

/// Splits an independent child stream off `rng`.
pub fn fork(rng: &mut SimRng) -> SimRng {
    use rand::RngCore;
    seeded(rng.next_u64())
}
