//! Seeded random streams.
//!
//! Every source of randomness in a simulation owns its own ChaCha stream so
//! that consuming numbers in one place (attack noise, say) never shifts the
//! sequence seen by another (sensor noise). This is what makes a run with the
//! attack layer switched off bit-identical to a clean run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named purposes, each mapped to a distinct ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Imu = 1,
    Attack = 2,
    Fusion = 3,
    Chip = 4,
    Goal = 5,
    Policy = 6,
    Bus = 7,
}

/// SplitMix64 finalizer, used to derive child seeds from a master seed.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, which: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seed of the `index`-th run of a campaign driven by `master`.
pub fn run_seed(master: u64, index: usize) -> u64 {
    mix(master, index as u64 + 1)
}
