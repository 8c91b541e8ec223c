//! Loss models `L: Ω × ℝ^d → ℝ` with pathwise partial derivatives in the
//! weights.
//!
//! Five built-in kinds cover the test fixtures: a linear Gaussian portfolio,
//! an additive smooth loss, a delta–gamma style quadratic form, a call-option
//! basket and a discrete outcome table. Anything else goes through
//! [`ModelKind::Custom`] with a [`LossFunction`].
//!
//! Built-in models are polynomial or piecewise-linear in `x`, so their
//! pathwise derivatives are exact. For option baskets the payoff kink
//! `Y_i = k_i` lives in the factors, not the weights; on it the right
//! derivative is used, an event of probability zero under Gaussian factors.
//!
//! The envelope condition (an integrable bound on `|∂ⁿL/∂x_iⁿ|` over a box of
//! weights) is a declared flag. The built-ins satisfy it on bounded boxes:
//! their derivatives are polynomials in Gaussian factors, or bounded.

mod custom;
mod factors;
mod spec;

use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub use custom::{AtomScaledExp, DeterministicLinear, LossFunction, MinShortfallSquared};
pub use factors::{DiscreteLaw, FactorLaw, GaussianFactors, PrimitiveSample};
pub use spec::ModelSpec;

use crate::divided_diff;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Declared law type of `L(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Continuity {
    AbsolutelyContinuous,
    Discrete,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    GaussianLinear,
    AdditiveSmooth,
    QuadraticGamma,
    OptionBasket,
    DiscreteTable,
    Custom,
}

impl KindName {
    pub fn as_str(self) -> &'static str {
        match self {
            KindName::GaussianLinear => "gaussian_linear",
            KindName::AdditiveSmooth => "additive_smooth",
            KindName::QuadraticGamma => "quadratic_gamma",
            KindName::OptionBasket => "option_basket",
            KindName::DiscreteTable => "discrete_table",
            KindName::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    /// `L = x'Y`, `Y ~ N(μ, Σ)`.
    GaussianLinear,
    /// `L = Σ x_i² + W`, `W ~ N(noise_mean, noise_sd²)`.
    AdditiveSmooth { noise_mean: f64, noise_sd: f64 },
    /// `L = γ·(x'AY)² + δ·x'AY`, `Y ~ N(0, I_k)`, `A` is `d × k`.
    QuadraticGamma {
        loadings: Vec<Vec<f64>>,
        gamma: f64,
        delta: f64,
    },
    /// `L = Σ x_i · max(Y_i − k_i, 0)`, `Y ~ N(μ, Σ)`.
    OptionBasket { strikes: Vec<f64> },
    /// `L = W` drawn from the outcome table; the weights are ignored.
    DiscreteTable,
    Custom {
        name: String,
        function: Arc<dyn LossFunction>,
    },
}

impl ModelKind {
    pub fn name(&self) -> KindName {
        match self {
            ModelKind::GaussianLinear => KindName::GaussianLinear,
            ModelKind::AdditiveSmooth { .. } => KindName::AdditiveSmooth,
            ModelKind::QuadraticGamma { .. } => KindName::QuadraticGamma,
            ModelKind::OptionBasket { .. } => KindName::OptionBasket,
            ModelKind::DiscreteTable => KindName::DiscreteTable,
            ModelKind::Custom { .. } => KindName::Custom,
        }
    }
}

/// Immutable loss model. Cloning is cheap enough to share across workers.
#[derive(Debug, Clone)]
pub struct LossModel {
    pub id: String,
    pub dim: usize,
    pub kind: ModelKind,
    pub law: FactorLaw,
    pub homogeneity_degree: Option<f64>,
    pub continuity: Continuity,
    pub derivative_bound_integrable: bool,
}

impl LossModel {
    fn build(dim: usize, kind: ModelKind, law: FactorLaw, degree: Option<f64>, continuity: Continuity) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("model dimension must be at least 1"));
        }
        Ok(Self {
            id: kind.name().as_str().to_string(),
            dim,
            kind,
            law,
            homogeneity_degree: degree,
            continuity,
            derivative_bound_integrable: true,
        })
    }

    pub fn gaussian_linear(mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> Result<Self> {
        let g = GaussianFactors::new(mu, sigma)?;
        let d = g.dim();
        Self::build(d, ModelKind::GaussianLinear, FactorLaw::Gaussian(g), Some(1.0), Continuity::AbsolutelyContinuous)
    }

    /// Independent standard normal factors in `dim` dimensions.
    pub fn standard_gaussian_linear(dim: usize) -> Result<Self> {
        let g = GaussianFactors::standard(dim)?;
        Self::gaussian_linear(g.mean.clone(), g.covariance.clone())
    }

    pub fn additive_smooth(dim: usize, noise_mean: f64, noise_sd: f64) -> Result<Self> {
        if !noise_mean.is_finite() || !noise_sd.is_finite() || noise_sd < 0.0 {
            return Err(Error::Domain(format!("invalid noise parameters ({noise_mean}, {noise_sd})")));
        }
        let law = FactorLaw::Gaussian(GaussianFactors::new(vec![noise_mean], vec![vec![noise_sd * noise_sd]])?);
        Self::build(dim, ModelKind::AdditiveSmooth { noise_mean, noise_sd }, law, None, Continuity::AbsolutelyContinuous)
    }

    pub fn quadratic_gamma(loadings: Vec<Vec<f64>>, gamma: f64, delta: f64) -> Result<Self> {
        let d = loadings.len();
        let k = loadings.first().map_or(0, Vec::len);
        if d == 0 || k == 0 || loadings.iter().any(|r| r.len() != k) {
            return Err(Error::arg("loadings must be a non-empty d x k matrix"));
        }
        if loadings.iter().flatten().chain([&gamma, &delta]).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite quadratic_gamma parameter".into()));
        }
        let degree = (delta == 0.0).then_some(2.0);
        let law = FactorLaw::Gaussian(GaussianFactors::standard(k)?);
        Self::build(d, ModelKind::QuadraticGamma { loadings, gamma, delta }, law, degree, Continuity::AbsolutelyContinuous)
    }

    pub fn option_basket(mu: Vec<f64>, sigma: Vec<Vec<f64>>, strikes: Vec<f64>) -> Result<Self> {
        let g = GaussianFactors::new(mu, sigma)?;
        if strikes.len() != g.dim() {
            return Err(Error::arg(format!("{} strikes for {} factors", strikes.len(), g.dim())));
        }
        if strikes.iter().any(|k| !k.is_finite()) {
            return Err(Error::Domain("non-finite strike".into()));
        }
        let d = g.dim();
        Self::build(d, ModelKind::OptionBasket { strikes }, FactorLaw::Gaussian(g), Some(1.0), Continuity::AbsolutelyContinuous)
    }

    pub fn discrete_table(dim: usize, outcomes: Vec<f64>, probabilities: Option<Vec<f64>>) -> Result<Self> {
        let law = FactorLaw::Discrete(DiscreteLaw::new(outcomes, probabilities)?);
        Self::build(dim, ModelKind::DiscreteTable, law, None, Continuity::Discrete)
    }

    pub fn custom(
        name: impl Into<String>,
        dim: usize,
        law: FactorLaw,
        function: Arc<dyn LossFunction>,
        continuity: Continuity,
    ) -> Result<Self> {
        let name = name.into();
        let mut m = Self::build(dim, ModelKind::Custom { name: name.clone(), function }, law, None, continuity)?;
        m.id = name;
        Ok(m)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_homogeneity(mut self, degree: Option<f64>) -> Self {
        self.homogeneity_degree = degree;
        self
    }

    pub fn with_continuity(mut self, continuity: Continuity) -> Self {
        self.continuity = continuity;
        self
    }

    pub fn with_envelope(mut self, integrable: bool) -> Self {
        self.derivative_bound_integrable = integrable;
        self
    }

    pub fn factor_dim(&self) -> usize {
        self.law.dim()
    }

    /// Factor draw for sample `index`; identical for every `x` (common random numbers).
    pub fn draw_factors(&self, rng: &CounterRng, index: u64) -> PrimitiveSample {
        let mut stream = rng.stream(index);
        PrimitiveSample::new(index, self.law.draw(&mut stream))
    }

    /// Highest derivative order in the weights, `None` when unbounded.
    pub fn max_order(&self) -> Option<u32> {
        match &self.kind {
            ModelKind::Custom { function, .. } => function.max_order(),
            _ => None,
        }
    }

    fn check_inputs(&self, x: &[f64], sample: &PrimitiveSample) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::arg(format!("weight vector has length {}, model dim is {}", x.len(), self.dim)));
        }
        if sample.values.len() != self.factor_dim() {
            return Err(Error::arg(format!(
                "sample has {} factor values, model expects {}",
                sample.values.len(),
                self.factor_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64], sample: &PrimitiveSample) -> Result<f64> {
        self.check_inputs(x, sample)?;
        Ok(self.loss_unchecked(x, &sample.values))
    }

    pub(crate) fn loss_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::GaussianLinear => crate::numeric::dot(x, y),
            ModelKind::AdditiveSmooth { .. } => x.iter().map(|v| v * v).sum::<f64>() + y[0],
            ModelKind::QuadraticGamma { loadings, gamma, delta } => {
                let s = exposure(loadings, x, y);
                gamma * s * s + delta * s
            }
            ModelKind::OptionBasket { strikes } => x
                .iter()
                .zip(y)
                .zip(strikes)
                .map(|((w, y), k)| w * (y - k).max(0.0))
                .sum(),
            ModelKind::DiscreteTable => y[0],
            ModelKind::Custom { function, .. } => function.loss(x, y),
        }
    }

    /// `∂ⁿL/∂x_iⁿ` at a fixed factor draw. `axis` is zero-based.
    pub fn pathwise_derivative(&self, x: &[f64], sample: &PrimitiveSample, axis: usize, order: u32) -> Result<f64> {
        self.check_inputs(x, sample)?;
        self.check_derivative(axis, order)?;
        self.pathwise_unchecked(x, &sample.values, axis, order)
    }

    pub(crate) fn check_derivative(&self, axis: usize, order: u32) -> Result<()> {
        if axis >= self.dim {
            return Err(Error::arg(format!("axis {} out of range 1..={}", axis + 1, self.dim)));
        }
        if order == 0 {
            return Err(Error::arg("derivative order must be at least 1"));
        }
        if let Some(max) = self.max_order() {
            if order > max {
                return Err(Error::UnsupportedOrder { order, max });
            }
        }
        Ok(())
    }

    pub(crate) fn pathwise_unchecked(&self, x: &[f64], y: &[f64], axis: usize, order: u32) -> Result<f64> {
        let i = axis;
        Ok(match &self.kind {
            ModelKind::GaussianLinear => {
                if order == 1 {
                    y[i]
                } else {
                    0.0
                }
            }
            ModelKind::AdditiveSmooth { .. } => match order {
                1 => 2.0 * x[i],
                2 => 2.0,
                _ => 0.0,
            },
            ModelKind::QuadraticGamma { loadings, gamma, delta } => {
                let v_i: f64 = loadings[i].iter().zip(y).map(|(a, y)| a * y).sum();
                match order {
                    1 => (2.0 * gamma * exposure(loadings, x, y) + delta) * v_i,
                    2 => 2.0 * gamma * v_i * v_i,
                    _ => 0.0,
                }
            }
            ModelKind::OptionBasket { strikes } => {
                if order == 1 {
                    (y[i] - strikes[i]).max(0.0)
                } else {
                    0.0
                }
            }
            ModelKind::DiscreteTable => 0.0,
            ModelKind::Custom { function, .. } => match function.pathwise(x, y, i, order) {
                Some(v) => v,
                None => numeric_pathwise(|z| function.loss(z, y), x, i, order)?,
            },
        })
    }

    /// Checks `L(λx) = λ^k L(x)` on `sample_count` factor draws.
    pub fn homogeneity_check(&self, x: &[f64], scales: &[f64], sample_count: usize, seed: u64) -> Result<HomogeneityReport> {
        let degree = self
            .homogeneity_degree
            .ok_or_else(|| Error::NotApplicable(format!("model '{}' declares no homogeneity degree", self.id)))?;
        if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::arg("scales must be positive and finite"));
        }
        let rng = CounterRng::new(seed);
        let scaled: Vec<Vec<f64>> = scales.iter().map(|l| x.iter().map(|v| l * v).collect()).collect();
        let mut worst = 0.0f64;
        for j in 0..sample_count.max(1) as u64 {
            let s = self.draw_factors(&rng, j);
            let base = self.evaluate(x, &s)?;
            for (lambda, xs) in scales.iter().zip(&scaled) {
                let r = (self.evaluate(xs, &s)? - lambda.powf(degree) * base).abs() / (1.0 + base.abs());
                worst = worst.max(r);
            }
        }
        Ok(HomogeneityReport {
            degree,
            max_relative_residual: worst,
            pass: worst <= HOMOGENEITY_TOLERANCE,
        })
    }
}

pub const HOMOGENEITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomogeneityReport {
    pub degree: f64,
    pub max_relative_residual: f64,
    pub pass: bool,
}

/// `x'AY` for a `d × k` loading matrix.
fn exposure(loadings: &[Vec<f64>], x: &[f64], y: &[f64]) -> f64 {
    loadings
        .iter()
        .zip(x)
        .map(|(row, w)| w * row.iter().zip(y).map(|(a, y)| a * y).sum::<f64>())
        .sum()
}

/// Forward divided difference with one Richardson step. The base step
/// `1/m` shrinks with the order so that `n·log10(2m)` stays near 4.
fn numeric_pathwise<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], axis: usize, order: u32) -> Result<f64> {
    let m = 10f64.powf(4.0 / order as f64).round().max(2.0) as u64;
    divided_diff::richardson_divided_difference(f, x, axis, order, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss2() -> LossModel {
        LossModel::standard_gaussian_linear(2).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let s = PrimitiveSample::new(0, vec![1.0, -1.0]);
        assert_eq!(gauss2().evaluate(&[3.0, 4.0], &s).unwrap(), -1.0);

        let add = LossModel::additive_smooth(2, 0.0, 1.0).unwrap();
        assert_eq!(add.evaluate(&[1.0, 2.0], &PrimitiveSample::new(0, vec![0.5])).unwrap(), 5.5);

        let table = LossModel::discrete_table(1, vec![1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap();
        assert_eq!(table.evaluate(&[7.0], &PrimitiveSample::new(2, vec![3.0])).unwrap(), 3.0);
    }

    #[test]
    fn evaluate_errors() {
        let s = PrimitiveSample::new(0, vec![1.0, -1.0]);
        assert!(matches!(gauss2().evaluate(&[1.0], &s), Err(Error::Argument(_))));
        assert!(matches!(gauss2().evaluate(&[1.0, 2.0], &PrimitiveSample::new(0, vec![1.0])), Err(Error::Argument(_))));
        assert!(matches!(
            LossModel::gaussian_linear(vec![f64::NAN], vec![vec![1.0]]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(LossModel::additive_smooth(0, 0.0, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn pathwise_examples() {
        let s = PrimitiveSample::new(0, vec![1.0, -1.0]);
        let g = gauss2();
        assert_eq!(g.pathwise_derivative(&[5.0, -2.0], &s, 0, 1).unwrap(), 1.0);
        assert_eq!(g.pathwise_derivative(&[5.0, -2.0], &s, 0, 2).unwrap(), 0.0);
        let add = LossModel::additive_smooth(2, 0.0, 1.0).unwrap();
        let w = PrimitiveSample::new(0, vec![0.3]);
        assert_eq!(add.pathwise_derivative(&[1.0, 2.0], &w, 0, 2).unwrap(), 2.0);
        assert_eq!(add.pathwise_derivative(&[1.0, 2.0], &w, 1, 1).unwrap(), 4.0);
        assert!(matches!(g.pathwise_derivative(&[1.0, 1.0], &s, 2, 1), Err(Error::Argument(_))));
        assert!(matches!(g.pathwise_derivative(&[1.0, 1.0], &s, 0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn unsupported_order_for_kinked_custom() {
        let law = FactorLaw::Discrete(DiscreteLaw::new(vec![0.0, 1.0, 2.0], None).unwrap());
        let m = LossModel::custom("minsq", 1, law, Arc::new(MinShortfallSquared), Continuity::Discrete).unwrap();
        let s = PrimitiveSample::new(0, vec![2.0]);
        assert_eq!(m.pathwise_derivative(&[1.0], &s, 0, 1).unwrap(), -2.0);
        assert_eq!(m.pathwise_derivative(&[1.0], &s, 0, 2).unwrap(), 2.0);
        assert!(matches!(
            m.pathwise_derivative(&[1.0], &s, 0, 3),
            Err(Error::UnsupportedOrder { order: 3, max: 2 })
        ));
    }

    #[derive(Debug)]
    struct CubicNoDerivs;
    impl LossFunction for CubicNoDerivs {
        fn loss(&self, x: &[f64], y: &[f64]) -> f64 {
            y[0] * x[0].powi(3) + x[1]
        }
    }

    #[test]
    fn custom_without_closed_form_is_differentiated_numerically() {
        let law = FactorLaw::Gaussian(GaussianFactors::standard(1).unwrap());
        let m = LossModel::custom("cubic", 2, law, Arc::new(CubicNoDerivs), Continuity::AbsolutelyContinuous).unwrap();
        let s = PrimitiveSample::new(0, vec![0.7]);
        let d1 = m.pathwise_derivative(&[1.5, 0.0], &s, 0, 1).unwrap();
        assert!((d1 - 0.7 * 3.0 * 2.25).abs() < 1e-6, "{d1}");
        let d2 = m.pathwise_derivative(&[1.5, 0.0], &s, 0, 2).unwrap();
        assert!((d2 - 0.7 * 6.0 * 1.5).abs() < 1e-5, "{d2}");
    }

    #[test]
    fn homogeneity_examples() {
        let r = gauss2().homogeneity_check(&[3.0, 4.0], &[0.5, 2.0], 1000, 1).unwrap();
        assert!(r.pass && r.max_relative_residual <= 1e-12, "{r:?}");

        let add = LossModel::additive_smooth(2, 0.0, 1.0).unwrap().with_homogeneity(Some(1.0));
        let r = add.homogeneity_check(&[3.0, 4.0], &[0.5, 2.0], 100, 1).unwrap();
        assert!(!r.pass && r.max_relative_residual > 1e-3);

        let quad = LossModel::quadratic_gamma(vec![vec![1.0, 0.5], vec![-0.3, 2.0]], 1.0, 0.0).unwrap();
        assert_eq!(quad.homogeneity_degree, Some(2.0));
        assert!(quad.homogeneity_check(&[1.0, 1.0], &[2.0], 1000, 3).unwrap().pass);

        let none = LossModel::additive_smooth(1, 0.0, 1.0).unwrap();
        assert!(matches!(none.homogeneity_check(&[1.0], &[2.0], 10, 0), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn gaussian_linear_is_additive_in_weights() {
        let g = LossModel::gaussian_linear(vec![0.1, -0.2], vec![vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let rng = CounterRng::new(9);
        for j in 0..1000 {
            let s = g.draw_factors(&rng, j);
            let (x, y) = ([0.7, -1.3], [2.1, 0.4]);
            let sum = g.evaluate(&[x[0] + y[0], x[1] + y[1]], &s).unwrap();
            let parts = g.evaluate(&x, &s).unwrap() + g.evaluate(&y, &s).unwrap();
            assert!((sum - parts).abs() <= 1e-12 * (1.0 + sum.abs()));
        }
    }
}
