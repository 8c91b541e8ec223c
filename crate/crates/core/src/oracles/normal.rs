//! Standard normal density, distribution and quantile functions.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::standard()
}

pub fn pdf(x: f64) -> f64 {
    standard().pdf(x)
}

pub fn cdf(x: f64) -> f64 {
    standard().cdf(x)
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from an independent double-precision implementation.
    const CHECKPOINTS: [(&str, f64, f64); 5] = [
        ("quantile", 0.90, 1.2815515655446004),
        ("quantile", 0.95, 1.6448536269514722),
        ("quantile", 0.99, 2.3263478740408408),
        ("cdf", 1.0, 0.8413447460685429),
        ("pdf", 1.6448536269514722, 0.10313564037537139),
    ];

    #[test]
    fn reference_table() {
        for (f, x, want) in CHECKPOINTS {
            let got = match f {
                "quantile" => quantile(x),
                "cdf" => cdf(x),
                _ => pdf(x),
            };
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{f}({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [1e-8, 0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((cdf(quantile(p)) - p).abs() <= 1e-10 * p);
        }
    }
}
