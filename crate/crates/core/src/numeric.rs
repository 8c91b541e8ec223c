//! Small numeric helpers shared by the estimators.
//!
//! All reductions over sample arrays go through [`NeumaierSum`] in index
//! order, so a result never depends on how the samples were produced.

/// Compensated (Kahan–Babuška–Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<NeumaierSum>().total()
}

/// Mean, population-free sample variance and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub standard_error: f64,
}

/// Two-pass moments with compensated sums. `variance` uses the `n - 1`
/// denominator and is zero for a single value.
pub fn moments(values: &[f64]) -> Moments {
    let n = values.len();
    if n == 0 {
        return Moments {
            count: 0,
            mean: f64::NAN,
            variance: f64::NAN,
            standard_error: f64::NAN,
        };
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    let variance = if n > 1 {
        compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64
    } else {
        0.0
    };
    Moments {
        count: n,
        mean,
        variance,
        standard_error: (variance / n as f64).sqrt(),
    }
}

/// Binomial coefficient as an exact integer; panics on overflow past `u128`.
pub fn binomial(n: u32, k: u32) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, j| acc * (n - j) as u128 / (j + 1) as u128)
}

pub fn factorial(n: u32) -> u128 {
    (1..=n as u128).product()
}

/// Rank `ceil(alpha * n)` clamped to `1..=n`, tolerant of the last-ulp
/// error in `alpha * n` (so `0.6 * 5` is rank 3, not 4).
pub fn quantile_rank(alpha: f64, n: usize) -> usize {
    let t = alpha * n as f64;
    let k = (t - 1e-12 * t.abs().max(1.0)).ceil();
    (k.max(1.0) as usize).min(n)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect()
}
