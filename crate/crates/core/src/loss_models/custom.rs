//! User-supplied loss functions and the named formulas available from JSON.

use serde::{Deserialize, Serialize};
use std::fmt::Debug;

/// A loss `L(x, ω)` supplied by the caller.
///
/// `pathwise` returns `None` when no closed form is available; the model
/// then differentiates `loss` numerically on the fixed factor draw.
pub trait LossFunction: Debug + Send + Sync {
    fn loss(&self, x: &[f64], factors: &[f64]) -> f64;

    fn pathwise(&self, _x: &[f64], _factors: &[f64], _axis: usize, _order: u32) -> Option<f64> {
        None
    }

    /// Highest derivative order that exists; `None` means smooth.
    fn max_order(&self) -> Option<u32> {
        None
    }

    /// Parameters to write back into a model document, if the function has a
    /// JSON form.
    fn params(&self) -> Option<serde_json::Value> {
        None
    }
}

/// `H(x, W) = min(x₁ − W, 0)²`. Continuously differentiable once; the
/// second derivative `2·1{x₁ < W}` takes its right limit (zero) at the kink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinShortfallSquared;

impl LossFunction for MinShortfallSquared {
    fn loss(&self, x: &[f64], factors: &[f64]) -> f64 {
        let t = (x[0] - factors[0]).min(0.0);
        t * t
    }

    fn pathwise(&self, x: &[f64], factors: &[f64], axis: usize, order: u32) -> Option<f64> {
        if axis != 0 {
            return Some(0.0);
        }
        let t = x[0] - factors[0];
        Some(match order {
            1 => 2.0 * t.min(0.0),
            2 => {
                if t < 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
            _ => return None,
        })
    }

    fn max_order(&self) -> Option<u32> {
        Some(2)
    }
}

/// `H(x, W) = W · exp(x₁)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomScaledExp;

impl LossFunction for AtomScaledExp {
    fn loss(&self, x: &[f64], factors: &[f64]) -> f64 {
        factors[0] * x[0].exp()
    }

    fn pathwise(&self, x: &[f64], factors: &[f64], axis: usize, _order: u32) -> Option<f64> {
        Some(if axis == 0 { factors[0] * x[0].exp() } else { 0.0 })
    }
}

/// `L(x) = c'x` with no randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicLinear {
    pub coefficients: Vec<f64>,
}

impl LossFunction for DeterministicLinear {
    fn loss(&self, x: &[f64], _factors: &[f64]) -> f64 {
        crate::numeric::dot(&self.coefficients, x)
    }

    fn pathwise(&self, _x: &[f64], _factors: &[f64], axis: usize, order: u32) -> Option<f64> {
        Some(if order == 1 { self.coefficients[axis] } else { 0.0 })
    }

    fn params(&self) -> Option<serde_json::Value> {
        Some(serde_json::json!({ "coefficients": self.coefficients }))
    }
}
