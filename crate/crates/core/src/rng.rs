//! Counter-based random streams.
//!
//! Every random quantity is addressed by `(seed, stream, entry)`. The generator
//! is ChaCha8 keyed by `seed` with `stream` selecting the ChaCha stream and
//! `entry` selecting the word position, so any entry can be produced without
//! generating the ones before it. Standard normals come from Box–Muller on
//! consecutive uniform pairs: entries `2k` and `2k+1` are the cosine and sine
//! branches of pair `k`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids reserved for non-network randomness.
pub mod streams {
    pub const DATASET: u64 = 1 << 40;
    pub const MONTE_CARLO: u64 = 2 << 40;
    pub const TEST_POINTS: u64 = 3 << 40;
}

/// Derives a child seed from a root seed, a label and an index (SplitMix64 finalizer).
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = root ^ 0x9e37_79b9_7f4a_7c15;
    for b in label.bytes().chain(index.to_le_bytes()) {
        h = splitmix(h ^ u64::from(b));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn to_unit_open(x: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm in Box–Muller is finite.
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A stream of uniforms and standard normals addressed by entry index.
#[derive(Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
    pending: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream { rng, pending: None }
    }

    /// Positions the stream so the next normal drawn is entry `entry`.
    pub fn seek_normal(&mut self, entry: u64) {
        let pair = entry / 2;
        self.rng.set_word_pos(u128::from(pair) * 4);
        self.pending = None;
        if entry % 2 == 1 {
            self.next_normal();
        }
    }

    /// Uniform on (0, 1].
    pub fn next_uniform(&mut self) -> f64 {
        to_unit_open(self.rng.next_u64())
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.pending.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.pending = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.next_normal();
        }
    }
}

/// Standard normal at a single address.
pub fn normal_at(seed: u64, stream: u64, entry: u64) -> f64 {
    let mut s = Stream::new(seed, stream);
    s.seek_normal(entry);
    s.next_normal()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let mut s = Stream::new(42, 3);
        let seq: Vec<f64> = (0..9).map(|_| s.next_normal()).collect();
        for (i, &z) in seq.iter().enumerate() {
            assert_eq!(normal_at(42, 3, i as u64), z);
        }
    }

    #[test]
    fn streams_differ() {
        assert_ne!(normal_at(1, 0, 0), normal_at(1, 1, 0));
        assert_ne!(normal_at(1, 0, 0), normal_at(2, 0, 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(7, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }
}
