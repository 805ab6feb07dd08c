//! Small summary-statistics helpers with a fixed reduction order.

use serde::Serialize;

/// Pairwise (cascade) summation. The split points depend only on the slice
/// length, so the result is independent of how the values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = pairwise_sum(values) / n as f64;
        let stderr = if n > 1 {
            let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
            (pairwise_sum(&sq) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }
}

/// Exact running moments of non-negative integer observations.
///
/// Sums are kept as integers so merging partial accumulators in any order
/// yields identical results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntMoments {
    pub n: u64,
    pub sum: u128,
    pub sum_sq: u128,
}

impl IntMoments {
    pub fn push(&mut self, x: u64) {
        self.n += 1;
        self.sum += u128::from(x);
        self.sum_sq += u128::from(x) * u128::from(x);
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self
    }

    pub fn mean(&self) -> f64 {
        self.sum as f64 / self.n as f64
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = u128::from(self.n);
        // n*Σx² - (Σx)² is exact and non-negative (Cauchy-Schwarz).
        let numer = n * self.sum_sq - self.sum * self.sum;
        let var = numer as f64 / (n * (n - 1)) as f64;
        (var / self.n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
    }

    #[test]
    fn mean_stderr() {
        let m = MeanStderr::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        // sample variance 5/3, stderr sqrt(5/12)
        assert!((m.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStderr::of(&[7.0]).stderr, 0.0);
    }

    #[test]
    fn int_moments_agree_with_float() {
        let xs = [3u64, 9, 4, 4, 12, 0, 7];
        let mut acc = IntMoments::default();
        xs.iter().for_each(|&x| acc.push(x));
        let f: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
        let m = MeanStderr::of(&f);
        assert!((acc.mean() - m.mean).abs() < 1e-12);
        assert!((acc.stderr() - m.stderr).abs() < 1e-12);

        let (a, b) = xs.split_at(3);
        let mut left = IntMoments::default();
        a.iter().for_each(|&x| left.push(x));
        let mut right = IntMoments::default();
        b.iter().for_each(|&x| right.push(x));
        assert_eq!(left.merge(right), acc);
        assert_eq!(right.merge(left), acc);
    }
}
