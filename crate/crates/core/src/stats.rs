//! Running moments and the standard-error tolerance policy.

/// Tolerance, in standard errors, used by every Monte Carlo comparison.
pub const SE_TOLERANCE: f64 = 5.0;

/// Tolerance, in standard errors of a seed-ensemble mean, for trajectory comparisons.
pub const ENSEMBLE_SE_TOLERANCE: f64 = 3.0;

/// Streaming mean and unbiased variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combine two accumulators (Chan et al. parallel update).
    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            return f64::INFINITY;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

impl FromIterator<f64> for Welford {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut w = Welford::new();
        for x in iter {
            w.push(x);
        }
        w
    }
}

/// Mean and standard error of a slice.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let w: Welford = xs.iter().copied().collect();
    (w.mean(), w.std_error())
}

/// `|estimate - expected| <= k * se`, with `se == 0` demanding exact agreement.
pub fn within_se(estimate: f64, expected: f64, se: f64, k: f64) -> bool {
    (estimate - expected).abs() <= k * se
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 8.0, 0.25];
        let w: Welford = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((w.mean() - mean).abs() < 1e-14);
        assert!((w.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn merge_equals_sequential() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let whole: Welford = xs.iter().copied().collect();
        let mut left: Welford = xs[..17].iter().copied().collect();
        let right: Welford = xs[17..].iter().copied().collect();
        left.merge(&right);
        assert_eq!(left.count(), whole.count());
        assert!((left.mean() - whole.mean()).abs() < 1e-13);
        assert!((left.variance() - whole.variance()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_has_infinite_se() {
        let w: Welford = [3.0].into_iter().collect();
        assert!(w.std_error().is_infinite());
    }
}
