//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from [`SeededRng`], which is
//! ChaCha with 8 rounds. Its output is fixed by the algorithm and the 64-bit
//! seed, so logs replay identically on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a list of
/// discriminators (epoch, rank, ...), using the splitmix64 finalizer.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix(base);
    for &part in parts {
        state = splitmix(state ^ splitmix(part.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
