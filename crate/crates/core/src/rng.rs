//! Counter-based random number generation.
//!
//! Draws are a pure function of (seed, stream, counter), so adding a new
//! consumer never perturbs the draws of existing ones: every consumer derives
//! its own stream from a label and, where relevant, a step index. Identical
//! (seed, stream) always reproduces identical draws.

const GAMMA: u64 = 0x9E3779B97F4A7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a, folded through the finalizer for avalanche.
    let mut h: u64 = 0xCBF29CE484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001B3);
    }
    mix64(h)
}

/// Deterministic RNG stream identified by (seed, stream id).
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
    /// Cached second Box-Muller output.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Rng {
        Rng {
            key: mix64(mix64(seed).wrapping_add(GAMMA) ^ mix64(stream ^ 0x5851F42D4C957F2D)),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Independent stream derived from a purpose label.
    pub fn stream(&self, label: &str) -> Rng {
        Rng {
            key: mix64(self.key ^ hash_label(label)),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Independent stream derived from an integer, e.g. a step or retry index.
    pub fn substream(&self, index: u64) -> Rng {
        Rng {
            key: mix64(self.key.wrapping_add(GAMMA.wrapping_mul(index.wrapping_add(1)))),
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = c.wrapping_add(1);
        mix64(self.key.wrapping_add(GAMMA.wrapping_mul(c)))
    }

    /// Uniform in [0, 1), 53-bit mantissa.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Reject u1 == 0 so the log is finite.
        let mut u1 = self.uniform();
        while u1 <= 0.0 {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Standard Gumbel draw, used for categorical relaxations.
    pub fn gumbel(&mut self) -> f64 {
        let mut u = self.uniform();
        while u <= 0.0 {
            u = self.uniform();
        }
        -(-u.ln()).ln()
    }

    /// Fills a buffer with standard normals.
    pub fn fill_normal<S: crate::scalar::Scalar>(&mut self, out: &mut [S]) {
        for v in out {
            *v = S::from_f64(self.normal());
        }
    }

    /// Uniform in [-bound, bound], the fan-in initialization range.
    pub fn uniform_symmetric(&mut self, bound: f64) -> f64 {
        (self.uniform() * 2.0 - 1.0) * bound
    }

    /// Random permutation of 0..n (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_reproduces_draws() {
        let mut a = Rng::new(42, 3);
        let mut b = Rng::new(42, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let root = Rng::new(42, 0);
        let mut a = root.stream("targets");
        let mut b = root.stream("values");
        let same = (0..32).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_mean_and_range() {
        let mut rng = Rng::new(1, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.005);
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(2, 0);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = Rng::new(5, 0);
        let mut p = rng.permutation(17);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }
}
