//! Content digests and the frozen hash-seeded generator used wherever a run
//! must be reproducible bit-for-bit.
//!
//! Seed material is folded with 64-bit FNV-1a and expanded with SplitMix64.
//! Both are fixed here; changing either invalidates every recorded run.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Incremental 64-bit FNV-1a over length-delimited parts.
#[derive(Debug, Clone)]
pub struct SeedHasher {
    state: u64,
}

impl Default for SeedHasher {
    fn default() -> Self {
        Self { state: FNV_OFFSET }
    }
}

impl SeedHasher {
    pub fn new() -> Self {
        Self::default()
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.state ^= u64::from(*b);
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    /// Each part is prefixed with its length so ("ab", "c") and ("a", "bc")
    /// fold differently.
    pub fn part(mut self, bytes: impl AsRef<[u8]>) -> Self {
        let bytes = bytes.as_ref();
        self.write(&(bytes.len() as u64).to_le_bytes());
        self.write(bytes);
        self
    }

    pub fn u64(self, value: u64) -> Self {
        self.part(value.to_le_bytes())
    }

    pub fn finish(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> SplitMix64 {
        SplitMix64::new(self.state)
    }
}

/// SplitMix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..bound`. `bound` must be non-zero.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vector() {
        // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c; the length prefix is part of
        // our framing, so check the raw fold directly.
        let mut h = SeedHasher::new();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn splitmix_reference_sequence() {
        // Reference values for seed 0 from the published SplitMix64 algorithm.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn parts_are_length_delimited() {
        let a = SeedHasher::new().part("ab").part("c").finish();
        let b = SeedHasher::new().part("a").part("bc").finish();
        assert_ne!(a, b);
    }

    #[test]
    fn unit_draws_stay_in_range() {
        let mut r = SplitMix64::new(42);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }
}
