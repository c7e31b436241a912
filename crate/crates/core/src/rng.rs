//! Seed derivation for independent random streams.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a tuple of identifiers into one seed. Distinct tuples give
/// unrelated streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Stream tags so that subsystems never share a seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const VIEWS: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const DATA: u64 = 5;
}
