//! Empirical checks of the level-set propositions for a model used as `H`.
//!
//! `H` is either the loss itself or, with [`VerifyConfig::centered_alpha`],
//! the centered loss `L − q_α(x)`. Discrete laws are enumerated atom by atom;
//! everything else goes through the banded estimator under common random numbers.

use serde::{Deserialize, Serialize};

use super::{
    conditional_expectation_banded, conditional_expectation_discrete, default_bands, BandMode, LevelSetQuery,
    LevelSetReport, Tolerances, Verdict, ZERO_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::loss_models::{Continuity, HomogeneityReport, LossModel};
use crate::risk_measures::{quantile_divided_difference, var, weighted_quantile, QUANTILE_STEP};
use crate::sampling::{draw, draw_with_derivs, DerivKey, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Monte Carlo sample count for the banded route.
    pub count: usize,
    pub seed: u64,
    /// Use `H = L − q_α(x)` instead of `H = L`.
    pub centered_alpha: Option<f64>,
    /// Band half-widths; empty selects the default schedule.
    pub bands: Vec<f64>,
    pub band_mode: BandMode,
    /// Probe steps `δ = 1/m` for the monotonicity premise.
    pub probe_ms: Vec<u64>,
    pub premise_threshold: f64,
    /// Share of samples nearest the level set that the premise probe visits.
    pub near_fraction: f64,
    /// Step denominator of the symmetry matrix divided difference.
    pub derivative_step: u64,
    pub symmetry_tolerance: f64,
    pub tolerances: Option<Tolerances>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            count: 1_000_000,
            seed: 0,
            centered_alpha: None,
            bands: Vec::new(),
            band_mode: BandMode::OneSided,
            probe_ms: vec![8, 16, 32, 64],
            premise_threshold: 0.01,
            near_fraction: 0.05,
            derivative_step: 16,
            symmetry_tolerance: 1e-6,
            tolerances: None,
        }
    }
}

fn shifted(x: &[f64], axis: usize, delta: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[axis] += delta;
    y
}

fn is_discrete(model: &LossModel) -> bool {
    model.continuity == Continuity::Discrete
}

fn atoms(model: &LossModel) -> Result<Vec<(Vec<f64>, f64)>> {
    model
        .law
        .atoms()
        .ok_or_else(|| Error::NotApplicable(format!("model '{}' is declared discrete but its factor law has no finite atom list", model.id)))
}

/// `D(δ) = H(x+δe_i) − H(x)` for ascending `δ` must be flat or non-increasing.
fn violates(increments: &[f64], scale: f64) -> bool {
    let tol = ZERO_TOLERANCE * (1.0 + scale.abs());
    let flat = increments.iter().all(|d| d.abs() <= tol);
    let mut prev = 0.0;
    let decreasing = increments.iter().all(|&d| {
        let ok = d <= prev + tol;
        prev = d;
        ok
    });
    !(flat || decreasing)
}

/// Probe steps in ascending `δ`.
fn probe_deltas(config: &VerifyConfig) -> Result<Vec<f64>> {
    if config.probe_ms.is_empty() || config.probe_ms.iter().any(|&m| m == 0) {
        return Err(Error::arg("probe steps must be a non-empty list of positive integers"));
    }
    let mut ms = config.probe_ms.clone();
    ms.sort_unstable_by(|a, b| b.cmp(a));
    Ok(ms.into_iter().map(|m| 1.0 / m as f64).collect())
}

/// Exact enumeration of `H` and its derivative over a finite law.
struct Enumerated<'a> {
    model: &'a LossModel,
    atoms: Vec<(Vec<f64>, f64)>,
    alpha: Option<f64>,
}

impl Enumerated<'_> {
    fn losses(&self, x: &[f64]) -> Vec<f64> {
        self.atoms.iter().map(|(y, _)| self.model.loss_unchecked(x, y)).collect()
    }

    fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|(_, p)| *p).collect()
    }

    fn centre(&self, x: &[f64]) -> Result<f64> {
        match self.alpha {
            Some(a) => weighted_quantile(&self.losses(x), &self.weights(), a),
            None => Ok(0.0),
        }
    }

    fn h(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.centre(x)?;
        Ok(self.losses(x).into_iter().map(|l| l - c).collect())
    }

    fn centre_derivative(&self, x: &[f64], axis: usize, order: u32) -> Result<f64> {
        if self.alpha.is_none() {
            return Ok(0.0);
        }
        let st = crate::divided_diff::Stencil::new(order).along(axis, QUANTILE_STEP);
        let values = st
            .offsets()
            .map(|d| self.centre(&shifted(x, axis, d)))
            .collect::<Result<Vec<_>>>()?;
        Ok(st.apply(&values))
    }

    fn g(&self, x: &[f64], axis: usize, order: u32) -> Result<Vec<f64>> {
        let dc = self.centre_derivative(x, axis, order)?;
        self.atoms
            .iter()
            .map(|(y, _)| Ok(self.model.pathwise_unchecked(x, y, axis, order)? - dc))
            .collect()
    }

    fn report(&self, x: &[f64], axis: usize, order: u32, tol: Tolerances) -> Result<LevelSetReport> {
        let q = LevelSetQuery::discrete(self.h(x)?, self.g(x, axis, order)?, Some(self.weights())).with_tolerances(tol);
        conditional_expectation_discrete(&q)
    }

    /// Probability-weighted share of level-set atoms failing the probe.
    fn premise(&self, x: &[f64], axis: usize, deltas: &[f64]) -> Result<f64> {
        let h0 = self.h(x)?;
        let probes = deltas
            .iter()
            .map(|&d| self.h(&shifted(x, axis, d)))
            .collect::<Result<Vec<_>>>()?;
        let (mut mass, mut bad) = (0.0, 0.0);
        for (j, (_, p)) in self.atoms.iter().enumerate() {
            if h0[j].abs() > ZERO_TOLERANCE {
                continue;
            }
            mass += p;
            let inc: Vec<f64> = probes.iter().map(|h| h[j] - h0[j]).collect();
            if violates(&inc, h0[j]) {
                bad += p;
            }
        }
        Ok(if mass > 0.0 { bad / mass } else { 0.0 })
    }
}

/// Monte Carlo view of `H` under common random numbers.
struct Sampled<'a> {
    model: &'a LossModel,
    alpha: Option<f64>,
    count: usize,
    seed: u64,
}

impl Sampled<'_> {
    fn draw(&self, x: &[f64], keys: &[DerivKey]) -> Result<SampleSet> {
        draw_with_derivs(self.model, x, self.count, self.seed, keys)
    }

    fn h(&self, set: &SampleSet) -> Result<Vec<f64>> {
        let c = match self.alpha {
            Some(a) => var(set, a)?,
            None => 0.0,
        };
        Ok(set.losses.iter().map(|l| l - c).collect())
    }

    fn g(&self, set: &SampleSet, axis: usize, order: u32) -> Result<Vec<f64>> {
        let col = set
            .deriv(axis, order)
            .ok_or_else(|| Error::arg("missing derivative column"))?;
        let dc = match self.alpha {
            Some(a) => quantile_divided_difference(self.model, &set.x, a, axis, order, QUANTILE_STEP, self.count, self.seed)?,
            None => 0.0,
        };
        Ok(col.iter().map(|g| g - dc).collect())
    }

    /// Share of the samples nearest the level set whose `H` increments fail the probe.
    fn premise(&self, x: &[f64], h0: &[f64], axis: usize, deltas: &[f64], near_fraction: f64) -> Result<f64> {
        let mut order: Vec<usize> = (0..h0.len()).collect();
        order.sort_by(|&a, &b| h0[a].abs().total_cmp(&h0[b].abs()).then(a.cmp(&b)));
        let take = ((near_fraction * h0.len() as f64).ceil() as usize).clamp(1, h0.len());
        let near = &order[..take];
        let probes = deltas
            .iter()
            .map(|&d| self.h(&draw(self.model, &shifted(x, axis, d), self.count, self.seed)?))
            .collect::<Result<Vec<_>>>()?;
        let bad = near
            .iter()
            .filter(|&&j| {
                let inc: Vec<f64> = probes.iter().map(|h| h[j] - h0[j]).collect();
                violates(&inc, h0[j])
            })
            .count();
        Ok(bad as f64 / take as f64)
    }
}

fn check_common(model: &LossModel, x: &[f64], config: &VerifyConfig) -> Result<()> {
    if x.len() != model.dim {
        return Err(Error::arg(format!("weight vector has length {}, model dim is {}", x.len(), model.dim)));
    }
    if let Some(a) = config.centered_alpha {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::arg(format!("alpha must lie in (0, 1), got {a}")));
        }
    }
    if !(0.0..=1.0).contains(&config.near_fraction) || config.near_fraction == 0.0 {
        return Err(Error::arg("near_fraction must lie in (0, 1]"));
    }
    Ok(())
}

/// Checks `E[|∂ⁿH| ; H=0] = 0`, `P[∂ⁿH = 0 | H=0] = 1` and `E[∂ⁿH ; H=0] = 0`
/// at `x` along `axis` (zero-based), together with the monotonicity premise.
pub fn verify_proposition1(
    model: &LossModel,
    x: &[f64],
    axis: usize,
    order: u32,
    config: &VerifyConfig,
) -> Result<LevelSetReport> {
    check_common(model, x, config)?;
    model.check_derivative(axis, order)?;
    let deltas = probe_deltas(config)?;

    if is_discrete(model) {
        let e = Enumerated {
            model,
            atoms: atoms(model)?,
            alpha: config.centered_alpha,
        };
        let mut report = e.report(x, axis, order, config.tolerances.unwrap_or(Tolerances::EXACT))?;
        report.apply_premise(e.premise(x, axis, &deltas)?, config.premise_threshold);
        return Ok(report);
    }

    let s = Sampled {
        model,
        alpha: config.centered_alpha,
        count: config.count,
        seed: config.seed,
    };
    let set = s.draw(x, &[DerivKey::new(axis, order)])?;
    let h = s.h(&set)?;
    let g = s.g(&set, axis, order)?;
    let premise = s.premise(x, &h, axis, &deltas, config.near_fraction)?;
    let query = LevelSetQuery::banded(h, g, config.bands.clone())
        .with_mode(config.band_mode)
        .with_tolerances(config.tolerances.unwrap_or(Tolerances::SAMPLED));
    let mut report = conditional_expectation_banded(&query)?;
    report.apply_premise(premise, config.premise_threshold);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop2Report {
    pub homogeneity: HomogeneityReport,
    pub euler_residual: f64,
    pub euler_pass: bool,
    /// `Ê[∂H/∂x_i | H = 0]` for each axis.
    pub conditional_gradient: Vec<f64>,
    pub gradient_standard_errors: Vec<f64>,
    pub conclusion_pass: bool,
    /// `D_ij`: divided difference in `x_i` of `Ê[∂H/∂x_j | H = 0]`.
    pub symmetry_matrix: Vec<Vec<Option<f64>>>,
    pub symmetry_residual: f64,
    pub symmetry_tolerance: f64,
    pub symmetry_pass: bool,
    pub verdict: Verdict,
}

/// Largest per-sample relative Euler residual `|H − Σ x_i ∂H/∂x_i| / (1 + |H|)`,
/// evaluated on the loss itself.
fn euler_residual(model: &LossModel, x: &[f64], count: usize, seed: u64) -> Result<f64> {
    let draws: Vec<(Vec<f64>, f64)> = match model.law.atoms() {
        Some(a) => a,
        None => {
            let rng = crate::rng::CounterRng::new(seed);
            (0..count.clamp(1, 10_000) as u64)
                .map(|j| (model.draw_factors(&rng, j).values, 1.0))
                .collect()
        }
    };
    let mut worst = 0.0f64;
    for (y, _) in &draws {
        let l = model.loss_unchecked(x, y);
        let mut s = 0.0;
        for (i, w) in x.iter().enumerate() {
            s += w * model.pathwise_unchecked(x, y, i, 1)?;
        }
        worst = worst.max((l - s).abs() / (1.0 + l.abs()));
    }
    Ok(worst)
}

/// Conditional gradient at `y` with standard errors; `None` per axis when
/// the level set carries no mass there.
fn conditional_gradient(
    model: &LossModel,
    y: &[f64],
    config: &VerifyConfig,
    bands: &[f64],
) -> Result<Vec<Option<(f64, f64)>>> {
    let keep = |r: Result<LevelSetReport>| match r {
        Ok(r) => Ok(Some((r.estimate, r.standard_error))),
        Err(Error::ConditioningMass(_)) | Err(Error::InsufficientData { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    if is_discrete(model) {
        let e = Enumerated {
            model,
            atoms: atoms(model)?,
            alpha: config.centered_alpha,
        };
        return (0..model.dim).map(|j| keep(e.report(y, j, 1, Tolerances::EXACT))).collect();
    }
    let s = Sampled {
        model,
        alpha: config.centered_alpha,
        count: config.count,
        seed: config.seed,
    };
    let keys: Vec<DerivKey> = (0..model.dim).map(|j| DerivKey::new(j, 1)).collect();
    let set = s.draw(y, &keys)?;
    let h = s.h(&set)?;
    (0..model.dim)
        .map(|j| {
            let q = LevelSetQuery::banded(h.clone(), s.g(&set, j, 1)?, bands.to_vec()).with_mode(config.band_mode);
            keep(conditional_expectation_banded(&q))
        })
        .collect()
}

/// Euler identity, symmetry of the conditional-gradient Jacobian, and the
/// vanishing conditional gradient, for a model of homogeneity degree 1.
pub fn verify_proposition2(model: &LossModel, x: &[f64], config: &VerifyConfig) -> Result<Prop2Report> {
    check_common(model, x, config)?;
    if model.homogeneity_degree != Some(1.0) {
        return Err(Error::NotApplicable(format!(
            "model '{}' is not declared positively homogeneous of degree 1",
            model.id
        )));
    }
    let euler = euler_residual(model, x, config.count, config.seed)?;
    let homogeneity = model.homogeneity_check(x, &[0.5, 2.0, 3.0], 1000, config.seed)?;
    if !homogeneity.pass {
        return Err(Error::NotApplicable(format!(
            "homogeneity check failed (max relative residual {:e}; Euler residual {:e})",
            homogeneity.max_relative_residual, euler
        )));
    }
    if config.derivative_step == 0 {
        return Err(Error::arg("derivative_step must be positive"));
    }

    let bands = if is_discrete(model) || !config.bands.is_empty() {
        config.bands.clone()
    } else {
        let s = Sampled {
            model,
            alpha: config.centered_alpha,
            count: config.count,
            seed: config.seed,
        };
        default_bands(&s.h(&draw(model, x, config.count, config.seed)?)?)
    };

    let base = conditional_gradient(model, x, config, &bands)?;
    if base.iter().any(Option::is_none) {
        return Err(Error::ConditioningMass(format!(
            "the level set of '{}' at x carries no mass",
            model.id
        )));
    }
    let base: Vec<(f64, f64)> = base.into_iter().flatten().collect();
    let tol = config.tolerances.unwrap_or(if is_discrete(model) {
        Tolerances::EXACT
    } else {
        Tolerances::SAMPLED
    });
    let conclusion_pass = base
        .iter()
        .all(|(e, se)| e.abs() <= tol.absolute.max(tol.standard_errors * se));

    let m = config.derivative_step as f64;
    let d = model.dim;
    let mut matrix = vec![vec![None; d]; d];
    for (i, row) in matrix.iter_mut().enumerate() {
        let moved = conditional_gradient(model, &shifted(x, i, 1.0 / m), config, &bands)?;
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = moved[j].map(|(e, _)| m * (e - base[j].0));
        }
    }
    let mut residual = 0.0f64;
    let mut sym_tol = config.symmetry_tolerance;
    let mut complete = true;
    for i in 0..d {
        for j in i + 1..d {
            match (matrix[i][j], matrix[j][i]) {
                (Some(a), Some(b)) => {
                    residual = residual.max((a - b).abs());
                    sym_tol = sym_tol.max(tol.standard_errors * m * (base[i].1 + base[j].1));
                }
                _ => complete = false,
            }
        }
    }
    let symmetry_pass = complete && residual <= sym_tol;
    let euler_pass = euler <= crate::loss_models::HOMOGENEITY_TOLERANCE;
    let verdict = if euler_pass && symmetry_pass && conclusion_pass {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(Prop2Report {
        homogeneity,
        euler_residual: euler,
        euler_pass,
        conditional_gradient: base.iter().map(|b| b.0).collect(),
        gradient_standard_errors: base.iter().map(|b| b.1).collect(),
        conclusion_pass,
        symmetry_matrix: matrix,
        symmetry_residual: residual,
        symmetry_tolerance: sym_tol,
        symmetry_pass,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_models::ModelSpec;

    fn model(json: &str) -> LossModel {
        ModelSpec::from_json(json).unwrap().build().unwrap()
    }

    fn minsq() -> LossModel {
        model(r#"{"kind": "custom", "dim": 1, "params": {"formula": "min_shortfall_squared", "atoms": [0, 1, 2]}}"#)
    }

    #[test]
    fn prop1_min_shortfall_fixture() {
        let r = verify_proposition1(&minsq(), &[1.0], 0, 1, &VerifyConfig::default()).unwrap();
        assert_eq!((r.estimate, r.abs_estimate, r.prob_zero_deriv), (0.0, 0.0, 1.0));
        assert_eq!(r.premise_violation_fraction, Some(0.0));
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn prop1_two_atom_exponential() {
        let m = model(r#"{"kind": "custom", "dim": 1, "params": {"formula": "atom_scaled_exp", "atoms": [0, 1]}}"#);
        let r = verify_proposition1(&m, &[0.3], 0, 1, &VerifyConfig::default()).unwrap();
        assert_eq!((r.estimate, r.abs_estimate), (0.0, 0.0));
        assert_eq!(r.conditioning_mass, 0.5);
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn prop1_centered_gaussian_premise_fails() {
        let m = LossModel::standard_gaussian_linear(2).unwrap();
        let cfg = VerifyConfig {
            count: 200_000,
            seed: 42,
            centered_alpha: Some(0.95),
            ..VerifyConfig::default()
        };
        let r = verify_proposition1(&m, &[3.0, 4.0], 0, 1, &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::PremiseFailed);
        assert!(r.premise_violation_fraction.unwrap() > 0.0);
    }

    #[test]
    fn violation_rule() {
        assert!(!violates(&[0.0, 0.0], 0.0));
        assert!(!violates(&[-0.1, -0.2, -0.2], 0.0));
        assert!(violates(&[0.1, 0.2], 0.0));
        assert!(violates(&[-0.1, 0.0], 0.0));
    }

    #[test]
    fn prop2_centered_gaussian() {
        let m = LossModel::standard_gaussian_linear(2).unwrap();
        let cfg = VerifyConfig {
            count: 1_000_000,
            seed: 42,
            centered_alpha: Some(0.95),
            ..VerifyConfig::default()
        };
        let r = verify_proposition2(&m, &[3.0, 4.0], &cfg).unwrap();
        assert!(r.euler_pass && r.conclusion_pass && r.symmetry_pass, "{r:?}");
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn prop2_deterministic_linear() {
        let m = model(r#"{"kind": "custom", "dim": 2, "params": {"formula": "deterministic_linear", "coefficients": [1, 2]}}"#);
        let e = verify_proposition2(&m, &[1.0, 1.0], &VerifyConfig::default());
        assert!(matches!(e, Err(Error::ConditioningMass(_))), "{e:?}");
        let r = verify_proposition2(&m, &[2.0, -1.0], &VerifyConfig::default()).unwrap();
        assert_eq!(r.euler_residual, 0.0);
        assert_eq!(r.conditional_gradient, vec![1.0, 2.0]);
        assert_eq!(r.verdict, Verdict::Fail);
    }

    #[test]
    fn prop2_additive_declared_homogeneous_is_not_applicable() {
        let m = LossModel::additive_smooth(2, 0.0, 1.0).unwrap().with_homogeneity(Some(1.0));
        let e = verify_proposition2(&m, &[1.0, 2.0], &VerifyConfig::default()).unwrap_err();
        match e {
            Error::NotApplicable(msg) => assert!(msg.contains("Euler residual")),
            other => panic!("{other:?}"),
        }
        assert!(euler_residual(&m, &[1.0, 2.0], 100, 0).unwrap() > 1e-3);
    }
}
