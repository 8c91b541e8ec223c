//! JSON model documents:
//! `{"kind": "...", "dim": d, "params": {...}, "homogeneity_degree": k|null, "continuity": "..."}`.
//!
//! A missing `homogeneity_degree` or `continuity` falls back to the kind's
//! default; an explicit `null` degree means "not homogeneous".

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;

use super::{
    AtomScaledExp, Continuity, DeterministicLinear, DiscreteLaw, FactorLaw, KindName, LossModel,
    MinShortfallSquared, ModelKind,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: KindName,
    pub dim: usize,
    #[serde(default)]
    pub params: Value,
    #[serde(default, deserialize_with = "present_or_null", skip_serializing_if = "Option::is_none")]
    pub homogeneity_degree: Option<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuity: Option<Continuity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivative_bound_integrable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

fn present_or_null<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianParams {
    mu: Option<Vec<f64>>,
    sigma: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdditiveParams {
    #[serde(default)]
    noise_mean: f64,
    #[serde(default = "one")]
    noise_sd: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticParams {
    loadings: Option<Vec<Vec<f64>>>,
    #[serde(default = "one")]
    gamma: f64,
    #[serde(default)]
    delta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionBasketParams {
    mu: Option<Vec<f64>>,
    sigma: Option<Vec<Vec<f64>>>,
    strikes: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscreteParams {
    outcomes: Vec<f64>,
    probabilities: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomParams {
    formula: String,
    atoms: Option<Vec<f64>>,
    probabilities: Option<Vec<f64>>,
    coefficients: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

fn params<T: for<'de> Deserialize<'de>>(value: &Value) -> Result<T> {
    let v = if value.is_null() { json!({}) } else { value.clone() };
    serde_json::from_value(v).map_err(|e| Error::Parse {
        line: None,
        message: format!("params: {e}"),
    })
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

fn gaussian_parts(dim: usize, mu: Option<Vec<f64>>, sigma: Option<Vec<Vec<f64>>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    (mu.unwrap_or_else(|| vec![0.0; dim]), sigma.unwrap_or_else(|| identity(dim)))
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: Some(e.line() as u64),
            message: e.to_string(),
        })
    }

    pub fn build(&self) -> Result<LossModel> {
        let d = self.dim;
        let mut model = match self.kind {
            KindName::GaussianLinear => {
                let p: GaussianParams = params(&self.params)?;
                let (mu, sigma) = gaussian_parts(d, p.mu, p.sigma);
                LossModel::gaussian_linear(mu, sigma)?
            }
            KindName::AdditiveSmooth => {
                let p: AdditiveParams = params(&self.params)?;
                LossModel::additive_smooth(d, p.noise_mean, p.noise_sd)?
            }
            KindName::QuadraticGamma => {
                let p: QuadraticParams = params(&self.params)?;
                LossModel::quadratic_gamma(p.loadings.unwrap_or_else(|| identity(d)), p.gamma, p.delta)?
            }
            KindName::OptionBasket => {
                let p: OptionBasketParams = params(&self.params)?;
                let (mu, sigma) = gaussian_parts(d, p.mu, p.sigma);
                LossModel::option_basket(mu, sigma, p.strikes)?
            }
            KindName::DiscreteTable => {
                let p: DiscreteParams = params(&self.params)?;
                LossModel::discrete_table(d, p.outcomes, p.probabilities)?
            }
            KindName::Custom => build_custom(d, params(&self.params)?)?,
        };
        if model.dim != d {
            return Err(Error::arg(format!(
                "dim is {d} but params describe a {}-dimensional model",
                model.dim
            )));
        }
        if let Some(degree) = self.homogeneity_degree {
            if degree.is_some_and(|k| !k.is_finite()) {
                return Err(Error::Domain("homogeneity_degree must be finite".into()));
            }
            model.homogeneity_degree = degree;
        }
        if let Some(c) = self.continuity {
            model.continuity = c;
        }
        if let Some(b) = self.derivative_bound_integrable {
            model.derivative_bound_integrable = b;
        }
        if let Some(id) = &self.id {
            model.id = id.clone();
        }
        Ok(model)
    }
}

fn build_custom(dim: usize, p: CustomParams) -> Result<LossModel> {
    let atoms = |p: &CustomParams| -> Result<FactorLaw> {
        let outcomes = p
            .atoms
            .clone()
            .ok_or_else(|| Error::arg(format!("params.atoms is required for formula '{}'", p.formula)))?;
        Ok(FactorLaw::Discrete(DiscreteLaw::new(outcomes, p.probabilities.clone())?))
    };
    match p.formula.as_str() {
        "min_shortfall_squared" => {
            LossModel::custom("min_shortfall_squared", dim, atoms(&p)?, Arc::new(MinShortfallSquared), Continuity::Discrete)
        }
        "atom_scaled_exp" => LossModel::custom("atom_scaled_exp", dim, atoms(&p)?, Arc::new(AtomScaledExp), Continuity::Discrete),
        "deterministic_linear" => {
            let coefficients = p
                .coefficients
                .ok_or_else(|| Error::arg("params.coefficients is required for formula 'deterministic_linear'"))?;
            if coefficients.len() != dim {
                return Err(Error::arg(format!("{} coefficients for dim {dim}", coefficients.len())));
            }
            let m = LossModel::custom(
                "deterministic_linear",
                dim,
                FactorLaw::Degenerate,
                Arc::new(DeterministicLinear { coefficients }),
                Continuity::Discrete,
            )?;
            Ok(m.with_homogeneity(Some(1.0)))
        }
        other => Err(Error::arg(format!(
            "params.formula: unknown custom formula '{other}' (expected min_shortfall_squared, atom_scaled_exp or deterministic_linear)"
        ))),
    }
}

impl LossModel {
    pub fn from_json(text: &str) -> Result<Self> {
        ModelSpec::from_json(text)?.build()
    }

    /// Document form of the model, fully resolved (all defaults written out).
    pub fn to_spec(&self) -> ModelSpec {
        let params = match (&self.kind, &self.law) {
            (ModelKind::GaussianLinear, FactorLaw::Gaussian(g)) => json!({"mu": g.mean, "sigma": g.covariance}),
            (ModelKind::AdditiveSmooth { noise_mean, noise_sd }, _) => {
                json!({"noise_mean": noise_mean, "noise_sd": noise_sd})
            }
            (ModelKind::QuadraticGamma { loadings, gamma, delta }, _) => {
                json!({"loadings": loadings, "gamma": gamma, "delta": delta})
            }
            (ModelKind::OptionBasket { strikes }, FactorLaw::Gaussian(g)) => {
                json!({"mu": g.mean, "sigma": g.covariance, "strikes": strikes})
            }
            (ModelKind::DiscreteTable, FactorLaw::Discrete(t)) => {
                json!({"outcomes": t.outcomes, "probabilities": t.probabilities})
            }
            (ModelKind::Custom { name, function }, law) => {
                let mut v = function.params().unwrap_or_else(|| json!({}));
                v["formula"] = json!(name);
                if let FactorLaw::Discrete(t) = law {
                    v["atoms"] = json!(t.outcomes);
                    v["probabilities"] = json!(t.probabilities);
                }
                v
            }
            _ => Value::Null,
        };
        ModelSpec {
            kind: self.kind.name(),
            dim: self.dim,
            params,
            homogeneity_degree: Some(self.homogeneity_degree),
            continuity: Some(self.continuity),
            derivative_bound_integrable: Some(self.derivative_bound_integrable),
            id: Some(self.id.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_gaussian_document() {
        let m = LossModel::from_json(
            r#"{"kind": "gaussian_linear", "dim": 2, "params": {"mu": [0, 0], "sigma": [[1, 0], [0, 1]]},
                "homogeneity_degree": 1, "continuity": "absolutely_continuous"}"#,
        )
        .unwrap();
        assert_eq!(m.dim, 2);
        assert_eq!(m.homogeneity_degree, Some(1.0));
        assert_eq!(m.continuity, Continuity::AbsolutelyContinuous);
    }

    #[test]
    fn explicit_null_degree_overrides_default() {
        let m = LossModel::from_json(r#"{"kind": "gaussian_linear", "dim": 1, "homogeneity_degree": null}"#).unwrap();
        assert_eq!(m.homogeneity_degree, None);
        let m = LossModel::from_json(r#"{"kind": "gaussian_linear", "dim": 1}"#).unwrap();
        assert_eq!(m.homogeneity_degree, Some(1.0));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let e = LossModel::from_json(r#"{"kind": "option_basket", "dim": 1, "params": {}}"#).unwrap_err();
        assert!(e.to_string().contains("strikes"), "{e}");
        let e = LossModel::from_json(r#"{"kind": "gaussian_linear", "dim": 1, "params": {"mean": [0]}}"#).unwrap_err();
        assert!(e.to_string().contains("mean"), "{e}");
        let e = LossModel::from_json(r#"{"kind": "warp_drive", "dim": 1}"#).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let e = LossModel::from_json(r#"{"kind": "gaussian_linear", "params": {}}"#).unwrap_err();
        assert!(e.to_string().contains("dim"), "{e}");
        let e = LossModel::from_json(r#"{"kind": "gaussian_linear", "dim": 3, "params": {"mu": [0, 0]}}"#).unwrap_err();
        assert!(matches!(e, Error::Argument(_)), "{e}");
    }

    #[test]
    fn custom_formulas() {
        let m = LossModel::from_json(
            r#"{"kind": "custom", "dim": 1, "params": {"formula": "min_shortfall_squared", "atoms": [0, 1, 2]}}"#,
        )
        .unwrap();
        assert_eq!(m.continuity, Continuity::Discrete);
        assert_eq!(m.law.atoms().unwrap().len(), 3);
        let e = LossModel::from_json(r#"{"kind": "custom", "dim": 1, "params": {"formula": "nope"}}"#).unwrap_err();
        assert!(e.to_string().contains("formula"));
    }

    #[test]
    fn spec_round_trip() {
        for text in [
            r#"{"kind": "gaussian_linear", "dim": 2, "params": {"mu": [0.5, 0], "sigma": [[2, 0.1], [0.1, 1]]}}"#,
            r#"{"kind": "additive_smooth", "dim": 3, "params": {"noise_sd": 2}}"#,
            r#"{"kind": "quadratic_gamma", "dim": 2, "params": {"loadings": [[1, 0, 2], [0, 1, 0]]}}"#,
            r#"{"kind": "option_basket", "dim": 2, "params": {"strikes": [0.5, 1]}}"#,
            r#"{"kind": "discrete_table", "dim": 1, "params": {"outcomes": [1, 2], "probabilities": [0.25, 0.75]}}"#,
            r#"{"kind": "custom", "dim": 2, "params": {"formula": "deterministic_linear", "coefficients": [1, 2]}}"#,
        ] {
            let spec = LossModel::from_json(text).unwrap().to_spec();
            let again = spec.build().unwrap().to_spec();
            assert_eq!(spec, again, "{text}");
        }
    }
}
