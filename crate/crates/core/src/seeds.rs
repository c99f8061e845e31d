//! Seed expansion for independent, reproducible runs.

/// SplitMix64 finalizer applied to `master + (index + 1)·γ`.
///
/// Each `(master, index)` pair maps to a well-mixed 64-bit seed, so runs
/// can be scheduled in any order and still draw identical streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags so that init, batching and data draws never share a seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const DATA: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const EVAL: u64 = 5;
}
