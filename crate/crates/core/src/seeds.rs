/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Order-sensitive hash of several seed components.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_0000_0000_0001, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}
