use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::special::ln_gamma;
use crate::error::{PedError, Result};

/// Seeded random stream. Independent streams come from [`RngStream::split`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh stream seeded with `seed ^ index`.
    pub fn split(&self, index: u64) -> RngStream {
        RngStream::new(self.seed ^ index)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn bernoulli(&mut self, p: f64) -> f64 {
        if self.uniform() < p {
            1.0
        } else {
            0.0
        }
    }

    pub fn binomial(&mut self, trials: u32, p: f64) -> f64 {
        (0..trials).map(|_| self.bernoulli(p)).sum()
    }

    pub fn poisson(&mut self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return 0.0;
        }
        if rate < 30.0 {
            self.poisson_inversion(rate)
        } else {
            self.poisson_ptrs(rate)
        }
    }

    fn poisson_inversion(&mut self, rate: f64) -> f64 {
        let u = self.uniform();
        let mut p = (-rate).exp();
        let mut cdf = p;
        let mut k = 0u32;
        while u > cdf && k < 1000 {
            k += 1;
            p *= rate / k as f64;
            cdf += p;
        }
        k as f64
    }

    // transformed rejection with squeeze (Hormann 1993)
    fn poisson_ptrs(&mut self, rate: f64) -> f64 {
        let slam = rate.sqrt();
        let loglam = rate.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let invalpha = 1.1239 + 1.1328 / (b - 3.4);
        let vr = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
            if us >= 0.07 && v <= vr {
                return k;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            if v.ln() + invalpha.ln() - (a / (us * us) + b).ln() <= -rate + k * loglam - ln_gamma(k + 1.0) {
                return k;
            }
        }
    }
}

/// Scalar distributions used to emit observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    Gaussian { mean: f64, std: f64 },
    Bernoulli { p: f64 },
    Binomial { trials: u32, p: f64 },
    Poisson { rate: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Gaussian { mean, std } => mean.is_finite() && std > 0.0 && std.is_finite(),
            Distribution::Bernoulli { p } => (0.0..=1.0).contains(&p),
            Distribution::Binomial { trials, p } => trials >= 1 && (0.0..=1.0).contains(&p),
            Distribution::Poisson { rate } => rate > 0.0 && rate.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(PedError::Validation(format!("invalid distribution parameters {self:?}")))
        }
    }
}

pub fn sample(dist: Distribution, rng: &mut RngStream) -> Result<f64> {
    dist.validate()?;
    Ok(match dist {
        Distribution::Gaussian { mean, std } => rng.gaussian(mean, std),
        Distribution::Bernoulli { p } => rng.bernoulli(p),
        Distribution::Binomial { trials, p } => rng.binomial(trials, p),
        Distribution::Poisson { rate } => rng.poisson(rate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, v)
    }

    #[test]
    fn degenerate_bernoulli() {
        let mut rng = RngStream::new(1);
        for _ in 0..1000 {
            assert_eq!(sample(Distribution::Bernoulli { p: 1.0 }, &mut rng).unwrap(), 1.0);
        }
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(2);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample(Distribution::Gaussian { mean: 0.0, std: 1.0 }, &mut rng).unwrap())
            .collect();
        let (m, v) = moments(&xs);
        assert!(m.abs() <= 0.02 && (v - 1.0).abs() <= 0.03);
    }

    #[test]
    fn poisson_moments_both_branches() {
        for &(rate, seed) in &[(3.0, 3u64), (45.0, 4), (250.0, 5)] {
            let mut rng = RngStream::new(seed);
            let xs: Vec<f64> = (0..100_000)
                .map(|_| sample(Distribution::Poisson { rate }, &mut rng).unwrap())
                .collect();
            let (m, v) = moments(&xs);
            let se = (rate / 1e5_f64).sqrt();
            assert!((m - rate).abs() <= 4.0 * se, "rate {rate}: mean {m}");
            assert!((v / rate - 1.0).abs() < 0.03, "rate {rate}: var {v}");
            assert!(xs.iter().all(|x| x.fract() == 0.0 && *x >= 0.0));
        }
        let mut rng = RngStream::new(3);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.poisson(3.0)).collect();
        assert!((moments(&xs).0 - 3.0).abs() <= 0.05);
    }

    #[test]
    fn binomial_support_and_mean() {
        let mut rng = RngStream::new(6);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| sample(Distribution::Binomial { trials: 10, p: 0.3 }, &mut rng).unwrap())
            .collect();
        assert!(xs.iter().all(|&x| (0.0..=10.0).contains(&x) && x.fract() == 0.0));
        assert!((moments(&xs).0 - 3.0).abs() < 4.0 * (2.1_f64 / 2e4).sqrt());
    }

    #[test]
    fn invalid_parameters() {
        let mut rng = RngStream::new(0);
        assert!(sample(Distribution::Gaussian { mean: 0.0, std: 0.0 }, &mut rng).is_err());
        assert!(sample(Distribution::Bernoulli { p: 1.5 }, &mut rng).is_err());
        assert!(sample(Distribution::Binomial { trials: 0, p: 0.5 }, &mut rng).is_err());
        assert!(sample(Distribution::Poisson { rate: 0.0 }, &mut rng).is_err());
    }

    #[test]
    fn identical_seeds_identical_streams() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..1000 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
            assert_eq!(a.poisson(40.0).to_bits(), b.poisson(40.0).to_bits());
        }
        let mut c = a.split(1);
        let mut d = b.split(1);
        assert_eq!(c.uniform().to_bits(), d.uniform().to_bits());
        assert_ne!(RngStream::new(42).split(1).uniform(), RngStream::new(42).split(2).uniform());
    }
}
