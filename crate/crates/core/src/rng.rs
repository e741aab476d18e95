//! Seeded, platform-independent random streams.
//!
//! All randomness (initialisation, dropout masks, snippet sampling, data
//! generation) comes from ChaCha8 streams. Independent consumers get their own
//! stream number under the same seed, so adding a consumer never shifts the
//! draws seen by another one.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as DetRng;

/// Stream ids for the independent consumers of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    SpatialInit = 2,
    TemporalInit = 3,
    GateInit = 4,
    SpatialTrain = 5,
    TemporalTrain = 6,
    GateTrain = 7,
    Misc = 8,
}

pub fn stream(seed: u64, which: Stream) -> DetRng {
    let mut rng = DetRng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Mixes a master seed with an experiment id (SplitMix64 finaliser).
pub fn derive_seed(master: u64, id: u64) -> u64 {
    let mut z = master
        .wrapping_add(id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
