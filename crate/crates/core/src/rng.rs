//! Seeded randomness with independent named streams.
//!
//! Each stream is a ChaCha8 generator keyed by the run seed and addressed by a
//! fixed stream id, so drawing more numbers from one stream never shifts
//! another. Gaussian variates use Box–Muller on the uniform stream, which
//! keeps every draw reproducible from `(seed, stream)` alone.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Init,
    Data,
    TestData,
    Batching,
    Noise,
    Other(u64),
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::TestData => 3,
            Stream::Batching => 4,
            Stream::Noise => 5,
            Stream::Other(k) => 1_000 + k,
        }
    }

    pub fn name(self) -> String {
        match self {
            Stream::Init => "init".into(),
            Stream::Data => "data".into(),
            Stream::TestData => "test_data".into(),
            Stream::Batching => "batching".into(),
            Stream::Noise => "noise".into(),
            Stream::Other(k) => format!("other_{k}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.id());
        Self { inner, spare: None }
    }

    /// Derives a child generator from the next output of this one.
    pub fn fork(&mut self, stream: Stream) -> Self {
        Self::new(self.next_u64(), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection, free of modulo bias.
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

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            p.swap(i, j);
        }
        p.truncate(k);
        p
    }
}

/// One draw from `N(mean, diag(var))`.
pub fn gaussian_sample(rng: &mut SeededRng, mean: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != var.len() {
        return crate::error::dim(format!("mean has {} entries, variance {}", mean.len(), var.len()));
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return domain(format!("variance must be positive and finite, got {v}"));
    }
    Ok(mean.iter().zip(var).map(|(m, v)| rng.normal(*m, v.sqrt())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_repeats() {
        let mut a = SeededRng::new(7, Stream::Data);
        let mut b = SeededRng::new(7, Stream::Data);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = SeededRng::new(7, Stream::Data);
        let mut b = SeededRng::new(7, Stream::Batching);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn normal_moments() {
        let mut r = SeededRng::new(3, Stream::Noise);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn gaussian_sample_validates_and_collapses() {
        let mut r = SeededRng::new(1, Stream::Noise);
        assert!(gaussian_sample(&mut r, &[0.0], &[0.0]).is_err());
        assert!(gaussian_sample(&mut r, &[0.0], &[-1.0]).is_err());
        assert!(gaussian_sample(&mut r, &[0.0, 1.0], &[1.0]).is_err());
        let x = gaussian_sample(&mut r, &[2.0, -3.0], &[1e-300, 1e-300]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-100 && (x[1] + 3.0).abs() < 1e-100);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = SeededRng::new(11, Stream::Batching);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
        let s = r.sample_indices(10, 4);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|&i| i < 10));
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut r = SeededRng::new(5, Stream::Other(0));
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[r.below(3)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }
}
