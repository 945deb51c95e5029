//! Counter-based, splittable random streams.
//!
//! Every stochastic operation takes an explicit [`Rng`]. Child streams are
//! derived by name or index without advancing the parent, so the values a
//! consumer sees depend only on the path of splits that produced its stream,
//! never on scheduling order.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { key: mix(seed ^ 0x5EED_0F_B01D), counter: 0 }
    }

    /// Child stream identified by `name`.
    pub fn split(&self, name: &str) -> Self {
        Self { key: mix(self.key ^ mix(fnv1a(name.as_bytes()))), counter: 0 }
    }

    /// Child stream identified by an integer (step index, item index, ...).
    pub fn split_index(&self, index: u64) -> Self {
        Self { key: mix(self.key.wrapping_add(mix(index.wrapping_add(GOLDEN)))), counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        out
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller (one value per two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`, `n > 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
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
    fn splitting_is_order_independent() {
        let root = Rng::new(3);
        let mut a = root.split("a");
        let _ = a.next_u64();
        let b1 = root.split("b").next_u64();
        let b2 = Rng::new(3).split("b").next_u64();
        assert_eq!(b1, b2);
        assert_ne!(root.split("a").next_u64(), b1);
        assert_ne!(root.split_index(0).next_u64(), root.split_index(1).next_u64());
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut r = Rng::new(11);
        let n = 200_000;
        let u: f64 = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        assert!((u - 0.5).abs() < 0.005);
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.01 && (v - 1.0).abs() < 0.01, "{m} {v}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::new(5);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            seen[r.below(3)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 900));
    }
}
