//! Seed derivation.
//!
//! Every random stream in a run descends from one master seed. A child seed
//! is `splitmix64(splitmix64(parent ^ tag) ^ index)`, where `tag` names the
//! purpose (split, candidate, network, restart, ...) and `index` counts
//! siblings. Streams are then driven by `ChaCha8Rng::seed_from_u64`, which is
//! platform independent.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parent: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ tag) ^ index)
}

/// Purpose tags.
pub mod tag {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const CANDIDATE: u64 = 0x4341_4e44;
    pub const NETWORK: u64 = 0x4e45_5457;
    pub const RESTART: u64 = 0x5354_4945;
    pub const REPLICATION: u64 = 0x5245_504c;
    pub const PERMUTATION: u64 = 0x5045_524d;
    pub const MODEL: u64 = 0x4d4f_4445;
}
