//! Deterministic, seedable random streams.
//!
//! A stream is keyed by `(seed, label)`: the ChaCha8 key is the SHA-256
//! digest of the little-endian seed followed by the label bytes, so the
//! byte stream is identical on every platform and streams with different
//! labels are independent.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

pub struct RandomStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

/// Derive the stream for `(seed, label)`. `label` must be nonempty.
pub fn derive_stream(seed: u64, label: &str) -> RandomStream {
    assert!(!label.is_empty(), "stream label must be nonempty");
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    RandomStream {
        seed,
        label: label.to_string(),
        rng: ChaCha8Rng::from_seed(key),
    }
}

impl RandomStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Independent child stream `label/child` under the same seed.
    pub fn substream(&self, child: &str) -> RandomStream {
        derive_stream(self.seed, &format!("{}/{}", self.label, child))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn fill_bytes(&mut self, buf: &mut [u8]) {
        self.rng.fill_bytes(buf)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n > 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire's multiply-shift with rejection keeps the draw unbiased.
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller, one variate per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson draw with mean `mu >= 0`.
    ///
    /// Sequential-search inversion below 10, Hörmann's transformed
    /// rejection (PTRS) at or above.
    pub fn poisson(&mut self, mu: f64) -> u64 {
        debug_assert!(mu >= 0.0 && mu.is_finite());
        if mu <= 0.0 {
            return 0;
        }
        if mu < 10.0 {
            self.poisson_inversion(mu)
        } else {
            self.poisson_ptrs(mu)
        }
    }

    fn poisson_inversion(&mut self, mu: f64) -> u64 {
        let u = self.uniform();
        let mut k = 0u64;
        let mut p = (-mu).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= mu / k as f64;
            cdf += p;
            // cdf can stall just below 1 in floating point
            if p < 1e-300 && k as f64 > mu {
                break;
            }
        }
        k
    }

    fn poisson_ptrs(&mut self, mu: f64) -> u64 {
        use statrs::function::gamma::ln_gamma;
        let smu = mu.sqrt();
        let b = 0.931 + 2.53 * smu;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let vr = 0.9277 - 3.6224 / (b - 2.0);
        let log_mu = mu.ln();
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + mu + 0.43).floor();
            if us >= 0.07 && v <= vr {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
            let rhs = -mu + k * log_mu - ln_gamma(k + 1.0);
            if lhs <= rhs {
                return k as u64;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
