//! Seed derivation for independent, reproducible random streams.

/// Derives a child seed from a master seed and a stream index
/// (SplitMix64-style finalizer). Distinct `(seed, stream)` pairs give
/// well-separated ChaCha streams, and the mapping is stable across runs
/// and platforms.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
