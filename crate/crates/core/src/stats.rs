//! Small sample-statistics helpers shared by the Monte Carlo checks.

use serde::{Deserialize, Serialize};

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanAccumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut acc = Self::new();
        xs.iter().for_each(|&x| acc.push(x));
        acc
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Sample variance with a delta-method standard error,
/// SE² ≈ (m4 − s⁴)/N.
pub fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let acc = MeanAccumulator::from_slice(xs);
    let m = acc.mean();
    let var = acc.variance();
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (var, ((m4 - var * var).max(0.0) / n).sqrt())
}

/// Sample covariance with the standard error of the product mean.
pub fn covariance_with_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let mx = MeanAccumulator::from_slice(xs).mean();
    let my = MeanAccumulator::from_slice(ys).mean();
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let acc = MeanAccumulator::from_slice(&prods);
    let n = xs.len() as f64;
    (acc.mean() * n / (n - 1.0), acc.std_error())
}

/// Two-sample Kolmogorov–Smirnov statistic sup |F_a − F_b|.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value, c(α)·√((n+m)/(nm)) with
/// c(α) = √(−ln(α/2)/2).
pub fn ks_critical_value(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let (n, m) = (n as f64, m as f64);
    c * ((n + m) / (n * m)).sqrt()
}

/// Standard error of an empirical proportion.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let acc = MeanAccumulator::from_slice(&xs);
        let m = xs.iter().sum::<f64>() / 100.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 99.0;
        assert!((acc.mean() - m).abs() < 1e-13);
        assert!((acc.variance() - v).abs() < 1e-12);
    }

    #[test]
    fn ks_statistic_extremes() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&a, &[10.0, 11.0]), 1.0);
        // 1% level, textbook c = 1.628
        let crit = ks_critical_value(10_000, 10_000, 0.01);
        assert!((crit - 1.6276 * (2.0f64 / 10_000.0).sqrt()).abs() < 1e-4);
    }
}
