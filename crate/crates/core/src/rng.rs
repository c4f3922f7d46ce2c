//! Deterministic random streams keyed by `(seed, name)`.
//!
//! Each stream is a ChaCha8 generator whose key is derived from the seed and a
//! label, so a parameter's initial values depend only on the seed and its
//! name, never on construction order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// FNV-1a, used only to turn stream labels into key material.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub struct Stream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
        key[16..24].copy_from_slice(&(label.len() as u64).to_le_bytes());
        Self {
            rng: ChaCha8Rng::from_seed(key),
            spare: None,
        }
    }

    /// Stream for item `index` of a labelled family (samples, batches).
    pub fn indexed(seed: u64, label: &str, index: u64) -> Self {
        let mut s = Self::new(seed, label);
        s.rng.set_stream(index);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.rng.next_u64() % (hi - lo + 1) as u64) as usize
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Normal with standard deviation `std`, redrawn until inside `±2·std`.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_depend_on_seed_and_label() {
        let mut s1 = Stream::new(0, "stem.conv.weight");
        let mut s2 = Stream::new(0, "stem.conv.weight");
        let mut s3 = Stream::new(1, "stem.conv.weight");
        let mut s4 = Stream::new(0, "stem.conv.bias");
        let x1 = s1.next_u64();
        assert_eq!(x1, s2.next_u64());
        assert_ne!(x1, s3.next_u64());
        assert_ne!(x1, s4.next_u64());
    }

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let mut s = Stream::new(7, "t");
        for _ in 0..10_000 {
            let v = s.truncated_normal(0.02);
            assert!(v.abs() <= 0.04);
        }
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(3, "n");
        let n = 200_000;
        let xs: alloc::vec::Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }
}
