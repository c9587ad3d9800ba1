//! Deterministic seed derivation so that every random stream in a run is a
//! pure function of the run seed.

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for sub-stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix64(base ^ mix64(stream.wrapping_add(0x2545_F491_4F6C_DD1D)))
}

/// Named sub-streams so that unrelated components never share randomness.
pub mod stream {
    pub const BUFFER: u64 = 1;
    pub const ENCODER_INIT: u64 = 2;
    pub const ENCODER_TRAIN: u64 = 3;
    pub const POLICY_INIT: u64 = 4;
    pub const ROLLOUT: u64 = 5;
    pub const PPO: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const DATASET: u64 = 8;
    pub const PROBE: u64 = 9;
}
