//! Splittable counter-based pseudo-random generator.
//!
//! Every random decision in the crate flows from one of these, seeded once.
//! Outputs are a keyed mix of a 64-bit counter, so a generator is a pure
//! function of `(key, counter)`: cloning or re-deriving a stream from the
//! same seed and tags reproduces it bit for bit, which is what makes
//! checkpoint resume and repeated runs byte-identical.

/// SplitMix64 finalizer (Stafford mix 13). Full-period bijective mixer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator with a derivation key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    key: u64,
    counter: u64,
}

// Domain-separation constant so a zero seed does not collide with a zero tag.
const SEED_TAG: u64 = 0x534f_5243_454e_0001;

impl Prng {
    pub fn seeded(seed: u64) -> Self {
        Prng { key: mix(seed ^ SEED_TAG), counter: 0 }
    }

    /// Derive an independent child stream. Pure in `(self.key, tag)`:
    /// the parent is not advanced, so derivation trees are reproducible.
    pub fn split(&self, tag: u64) -> Prng {
        Prng { key: mix(self.key ^ mix(tag ^ 0xa076_1d64_78bd_642f)), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key ^ mix(self.counter));
        self.counter += 1;
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Rejection keeps it exactly uniform.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller (one value per call, deterministic).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from `[0, n)`, returned sorted.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_indices: k={k} > n={n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }

    /// Sample an index from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0 && total.is_finite());
        let mut dart = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Serialize as `(key, counter)` for checkpointing.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        Prng { key, counter }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = Prng::seeded(7).split(3);
        let mut b = Prng::seeded(7).split(3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_differ() {
        let root = Prng::seeded(7);
        let mut a = root.split(0);
        let mut b = root.split(1);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Prng::seeded(1);
        for _ in 0..10_000 {
            let x = rng.uniform();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut rng = Prng::seeded(2);
        let mut counts = [0usize; 5];
        let n = 50_000;
        for _ in 0..n {
            counts[rng.below(5) as usize] += 1;
        }
        for &c in &counts {
            // 5 sigma around n/5 for a binomial(n, 1/5)
            let mean = n as f64 / 5.0;
            let sd = (n as f64 * 0.2 * 0.8).sqrt();
            assert!((c as f64 - mean).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Prng::seeded(3);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn sample_indices_distinct_sorted() {
        let mut rng = Prng::seeded(4);
        for _ in 0..100 {
            let v = rng.sample_indices(50, 20);
            assert_eq!(v.len(), 20);
            assert!(v.windows(2).all(|w| w[0] < w[1]));
            assert!(v.iter().all(|&i| i < 50));
        }
    }

    #[test]
    fn state_roundtrip() {
        let mut a = Prng::seeded(9);
        a.next_u64();
        let (k, c) = a.state();
        let mut b = Prng::from_state(k, c);
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
