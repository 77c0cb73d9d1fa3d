//! Deterministic derivation of independent RNG streams.
//!
//! Every randomized stage derives its own stream from a base seed plus a set
//! of integer tags (run index, frame index, copy index, ...). Derivation is a
//! pure integer mix, so results are independent of scheduling, thread count,
//! and platform.

/// SplitMix64 finalizer. Bijective on u64; good avalanche behavior.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and an ordered list of tags.
///
/// Tag order matters: `derive_seed(s, &[1, 2]) != derive_seed(s, &[2, 1])`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(base ^ 0xd1a3_0d5e_ed5e_ed00);
    for (i, &t) in tags.iter().enumerate() {
        acc = splitmix64(acc ^ t.wrapping_add(0x100 * (i as u64 + 1)));
    }
    acc
}

/// FNV-1a hash of a string, for folding sample ids into seed tags.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
