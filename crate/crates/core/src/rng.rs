//! Counter-based random streams.
//!
//! Every random draw in the crate is addressed by a `(seed, purpose, index)`
//! key instead of coming from a shared mutable generator. A key is turned into
//! a 64-bit state by SplitMix64 finalisation, so any element of any stream can
//! be produced in isolation and in any order. This is what makes dropout masks,
//! weight initialisation and Monte-Carlo runs independent of scheduling.
//!
//! The mixing function is the SplitMix64 finaliser:
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//! z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//! z =  z ^ (z >> 31)
//! ```
//!
//! A key is folded as `mix(mix(mix(seed) ^ purpose) ^ index)`, each step adding
//! the golden-ratio increment first.

use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stream purposes. Distinct purposes never share a key.
pub mod purpose {
    pub const WEIGHT_INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PHANTOM_NOISE: u64 = 5;
    pub const PHANTOM_LAYOUT: u64 = 6;
    pub const MC_RUN: u64 = 7;
    pub const FOLDS: u64 = 8;
    pub const TEST_DATA: u64 = 99;
}

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child key.
#[inline]
pub fn derive(seed: u64, purpose: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ purpose) ^ index)
}

/// Stable 64-bit hash of a string (FNV-1a), for keying streams by subject id.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Uniform in `[0, 1)` from a 64-bit word (53 mantissa bits).
#[inline]
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw for element `index` of stream `key`.
#[inline]
pub fn uniform_at(key: u64, index: u64) -> f64 {
    unit_f64(mix(key ^ mix(index)))
}

/// Sequential view over a keyed stream: the n-th call returns element n.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, purpose: u64, index: u64) -> Self {
        Self {
            key: derive(seed, purpose, index),
            counter: 0,
        }
    }

    pub fn from_key(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Split off an independent child stream.
    pub fn child(&self, purpose: u64, index: u64) -> Stream {
        Stream::new(self.key, purpose, index)
    }

    pub fn uniform(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, self)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = mix(self.key ^ mix(self.counter));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
