//! Empirical VaR and Expected Shortfall, with derivatives of ES in the
//! weights and a banded estimator for the VaR gradient.
//!
//! The tail is closed (`L ≥ q̂`), and `q̂` is the lower order statistic at
//! rank `⌈αN⌉`. ES is reported through the atom-corrected tail sum; a second
//! implementation integrates the empirical quantile function directly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::conditional::{conditional_expectation_banded, BandMode, BandStat, LevelSetQuery, Tolerances};
use crate::divided_diff::{ConvergenceRow, ConvergenceTable, Stencil};
use crate::error::{Error, Result};
use crate::loss_models::{Continuity, LossModel};
use crate::numeric::{moments, quantile_rank, NeumaierSum};
use crate::sampling::{draw, DerivKey, SampleSet};

/// Step denominator of the quantile divided difference in general mode.
pub const QUANTILE_STEP: u64 = 64;
/// Schedule over which the quantile divided difference is checked for stability.
pub const QUANTILE_SCHEDULE: [u64; 3] = [16, 32, 64];
/// Probe steps `δ = 1/m` of the tail monotonicity diagnostic.
pub const DEFAULT_PROBE_MS: [u64; 4] = [8, 16, 32, 64];
pub const DEFAULT_MONOTONICITY_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsMode {
    /// Tail average of the pathwise derivative; valid when `L(x)` has a density.
    Continuous,
    /// Subtracts the quantile-derivative times the atom at `q̂`.
    General,
}

impl EsMode {
    pub fn for_model(model: &LossModel) -> Self {
        match model.continuity {
            Continuity::AbsolutelyContinuous => EsMode::Continuous,
            Continuity::Discrete | Continuity::Mixed => EsMode::General,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeValue {
    /// One-based axis.
    pub i: usize,
    pub n: u32,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub alpha: f64,
    pub var: f64,
    pub es: f64,
    pub atom: f64,
    pub derivative: Option<DerivativeValue>,
    pub standard_error: f64,
    pub mode: EsMode,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

pub fn var(samples: &SampleSet, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if samples.is_empty() {
        return Err(Error::arg("empty sample set"));
    }
    Ok(samples.order_statistic(quantile_rank(alpha, samples.len())))
}

/// Tail bookkeeping shared by the estimators. `first` is the first position in
/// sorted order with `L ≥ q̂`; `k = N − αN` is the tail size in sample units.
struct Tail {
    q: f64,
    first: usize,
    k: f64,
    n: f64,
}

impl Tail {
    fn new(samples: &SampleSet, alpha: f64) -> Result<Self> {
        let q = var(samples, alpha)?;
        let rank = quantile_rank(alpha, samples.len());
        // Ties below rank ⌈αN⌉ still belong to the closed tail.
        let mut first = rank - 1;
        while first > 0 && samples.order_statistic(first) >= q {
            first -= 1;
        }
        let n = samples.len() as f64;
        Ok(Self {
            q,
            first,
            k: n - alpha * n,
            n,
        })
    }

    fn count(&self, samples: &SampleSet) -> usize {
        samples.len() - self.first
    }

    fn indices<'a>(&self, samples: &'a SampleSet) -> impl Iterator<Item = usize> + 'a {
        samples.sorted_index[self.first..].iter().copied()
    }

    /// `c − k` in sample units: the mass at `q̂` in excess of `1 − α`.
    fn excess(&self, samples: &SampleSet) -> f64 {
        self.count(samples) as f64 - self.k
    }
}

/// ES through the atom-corrected tail sum.
pub fn es(samples: &SampleSet, alpha: f64) -> Result<TailEstimate> {
    let tail = Tail::new(samples, alpha)?;
    // (Σ_tail L − q̂·excess)/k, written around q̂ so constant laws come out exact.
    let above: NeumaierSum = tail.indices(samples).map(|j| samples.losses[j] - tail.q).collect();
    let excess = tail.excess(samples);
    let es = tail.q + above.total() / tail.k;

    let sq: NeumaierSum = tail
        .indices(samples)
        .map(|j| (samples.losses[j] - es).powi(2))
        .collect();
    let se = (sq.total() / tail.n).sqrt() / (tail.k / tail.n * tail.n.sqrt());

    Ok(TailEstimate {
        alpha,
        var: tail.q,
        es,
        atom: excess / tail.n,
        derivative: None,
        standard_error: se,
        mode: EsMode::General,
        flags: Vec::new(),
    })
}

/// ES as the integral of the empirical quantile function over `(α, 1]`.
pub fn es_quantile_integral(samples: &SampleSet, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if samples.is_empty() {
        return Err(Error::arg("empty sample set"));
    }
    let n = samples.len() as f64;
    let an = alpha * n;
    let rank = quantile_rank(alpha, samples.len());
    let q = samples.order_statistic(rank);
    // Sorted value j covers (j−1, j] of the quantile axis in sample units.
    let mut sum = NeumaierSum::new();
    for (pos, &j) in samples.sorted_index.iter().enumerate().skip(rank - 1) {
        let upper = (pos + 1) as f64;
        let w = (upper - (upper - 1.0).max(an)).clamp(0.0, 1.0);
        sum.add((samples.losses[j] - q) * w);
    }
    Ok(q + sum.total() / (n - an))
}

/// Smallest atom value whose cumulative probability reaches `alpha`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::arg("values and weights must be non-empty and of equal length"));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let total: f64 = weights.iter().sum();
    let mut cum = 0.0;
    for (pos, &j) in idx.iter().enumerate() {
        cum += weights[j];
        let last_of_value = idx.get(pos + 1).is_none_or(|&next| values[next] != values[j]);
        if last_of_value && cum / total >= alpha - 1e-12 {
            return Ok(values[j]);
        }
    }
    Ok(values[idx[idx.len() - 1]])
}

fn check_samples(model: &LossModel, samples: &SampleSet) -> Result<()> {
    if samples.x.len() != model.dim {
        return Err(Error::arg(format!(
            "sample set was drawn at a {}-dimensional weight vector, model dim is {}",
            samples.x.len(),
            model.dim
        )));
    }
    if samples.model_id != model.id {
        return Err(Error::arg(format!(
            "sample set belongs to model '{}', not '{}'",
            samples.model_id, model.id
        )));
    }
    Ok(())
}

fn shifted(x: &[f64], axis: usize, delta: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[axis] += delta;
    y
}

/// Quantile estimates at `x + (j/m)e_i` under common random numbers, cached
/// by the reduced fraction `j/m` so nested schedules share draws.
struct QuantileGrid<'a> {
    model: &'a LossModel,
    x: &'a [f64],
    alpha: f64,
    axis: usize,
    count: usize,
    seed: u64,
    cache: HashMap<(u64, u64), f64>,
}

impl<'a> QuantileGrid<'a> {
    fn at(&mut self, j: u64, m: u64) -> Result<f64> {
        let g = gcd(j, m);
        let key = if j == 0 { (0, 1) } else { (j / g, m / g) };
        if let Some(&q) = self.cache.get(&key) {
            return Ok(q);
        }
        let y = shifted(self.x, self.axis, key.0 as f64 / key.1 as f64);
        let q = var(&draw(self.model, &y, self.count, self.seed)?, self.alpha)?;
        self.cache.insert(key, q);
        Ok(q)
    }

    fn divided_difference(&mut self, order: u32, m: u64) -> Result<f64> {
        let st = Stencil::new(order).along(self.axis, m);
        let values = (0..=u64::from(order)).map(|j| self.at(j, m)).collect::<Result<Vec<_>>>()?;
        Ok(st.apply(&values))
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Forward divided difference `m^n Δ q̂` of the empirical quantile under CRN.
#[allow(clippy::too_many_arguments)]
pub fn quantile_divided_difference(
    model: &LossModel,
    x: &[f64],
    alpha: f64,
    axis: usize,
    order: u32,
    m: u64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    quantile_derivative_table(model, x, alpha, axis, order, &[m], count, seed).map(|rows| rows[0].estimate)
}

#[allow(clippy::too_many_arguments)]
fn quantile_derivative_table(
    model: &LossModel,
    x: &[f64],
    alpha: f64,
    axis: usize,
    order: u32,
    schedule: &[u64],
    count: usize,
    seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    check_alpha(alpha)?;
    if axis >= model.dim || x.len() != model.dim {
        return Err(Error::arg(format!("axis {} out of range for dimension {}", axis + 1, model.dim)));
    }
    if order == 0 || schedule.iter().any(|&m| m == 0) {
        return Err(Error::arg("order and step denominators must be positive"));
    }
    let mut grid = QuantileGrid {
        model,
        x,
        alpha,
        axis,
        count,
        seed,
        cache: HashMap::new(),
    };
    schedule
        .iter()
        .map(|&m| Ok(ConvergenceRow { m, estimate: grid.divided_difference(order, m)? }))
        .collect()
}

/// Convergence of the quantile divided difference over `schedule` (at least three entries).
#[allow(clippy::too_many_arguments)]
pub fn quantile_convergence(
    model: &LossModel,
    x: &[f64],
    alpha: f64,
    axis: usize,
    order: u32,
    schedule: &[u64],
    count: usize,
    seed: u64,
) -> Result<ConvergenceTable> {
    let rows = quantile_derivative_table(model, x, alpha, axis, order, schedule, count, seed)?;
    ConvergenceTable::from_rows(order, rows)
}

/// `∂ⁿES/∂x_iⁿ`, in the mode implied by `model.continuity`.
pub fn es_derivative(model: &LossModel, alpha: f64, key: DerivKey, samples: &SampleSet) -> Result<TailEstimate> {
    es_derivative_with_mode(model, alpha, key, samples, EsMode::for_model(model))
}

pub fn es_derivative_with_mode(
    model: &LossModel,
    alpha: f64,
    key: DerivKey,
    samples: &SampleSet,
    mode: EsMode,
) -> Result<TailEstimate> {
    check_samples(model, samples)?;
    let g = samples.deriv(key.axis, key.order).ok_or_else(|| {
        Error::arg(format!("sample set lacks derivative column {}", key.column_name()))
    })?;
    let mut est = es(samples, alpha)?;
    est.mode = mode;
    let tail = Tail::new(samples, alpha)?;

    let tail_g: Vec<f64> = tail.indices(samples).map(|j| g[j]).collect();
    let sum: NeumaierSum = tail_g.iter().copied().collect();
    let mut value = sum.total() / tail.k;
    let tm = moments(&tail_g);
    let ss = tm.variance * (tail_g.len().saturating_sub(1)) as f64;
    let stderr = (ss / tail.n).sqrt() / (tail.k / tail.n * tail.n.sqrt());

    let excess = tail.excess(samples);
    if mode == EsMode::General && excess != 0.0 {
        let table = quantile_derivative_table(
            model,
            &samples.x,
            alpha,
            key.axis,
            key.order,
            &QUANTILE_SCHEDULE,
            samples.len(),
            samples.seed,
        )?;
        let dq = table.iter().find(|r| r.m == QUANTILE_STEP).map_or(f64::NAN, |r| r.estimate);
        if !ConvergenceTable::from_rows(key.order, table)?.stable {
            est.flags.push("unstable_quantile_divided_difference".into());
        }
        value -= dq * excess / tail.k;
    }
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("ES derivative evaluated to {value}")));
    }
    est.derivative = Some(DerivativeValue {
        i: key.axis + 1,
        n: key.order,
        value,
        stderr,
    });
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarDerivative {
    /// One-based axis.
    pub i: usize,
    pub var: f64,
    pub value: f64,
    pub standard_error: f64,
    pub bands: Vec<BandStat>,
}

/// Default half-width `σ̂_L · N^(-1/5)` of the VaR-derivative band.
pub fn default_var_band(samples: &SampleSet) -> f64 {
    let sd = samples.summary().variance.sqrt();
    sd * (samples.len() as f64).powf(-0.2)
}

/// `∂q_α/∂x_i` as the banded mean of `∂L/∂x_i` over `{|L − q̂| ≤ ε}`.
pub fn var_derivative(
    model: &LossModel,
    alpha: f64,
    axis: usize,
    samples: &SampleSet,
    bands: Option<&[f64]>,
) -> Result<VarDerivative> {
    check_samples(model, samples)?;
    if model.continuity != Continuity::AbsolutelyContinuous {
        return Err(Error::NotApplicable("VaR derivative needs an absolutely continuous loss".into()));
    }
    let g = samples
        .deriv(axis, 1)
        .ok_or_else(|| Error::arg(format!("sample set lacks derivative column {}", DerivKey::new(axis, 1).column_name())))?;
    let q = var(samples, alpha)?;
    let bands = match bands {
        Some(b) => b.to_vec(),
        None => vec![default_var_band(samples)],
    };
    let h: Vec<f64> = samples.losses.iter().map(|l| l - q).collect();
    let query = LevelSetQuery::banded(h, g.to_vec(), bands)
        .with_mode(BandMode::Symmetric)
        .with_tolerances(Tolerances::SAMPLED);
    let report = conditional_expectation_banded(&query)?;
    Ok(VarDerivative {
        i: axis + 1,
        var: q,
        value: report.estimate,
        standard_error: report.standard_error,
        bands: report.bands,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityDiagnostic {
    /// One-based axis.
    pub i: usize,
    pub epsilon: f64,
    pub band_count: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Fraction of samples near `q̂` for which `H = L − q̂` decreases under a
/// forward probe step along axis `i`.
pub fn tail_monotonicity_diagnostic(
    model: &LossModel,
    alpha: f64,
    axis: usize,
    samples: &SampleSet,
    probe_ms: &[u64],
    threshold: f64,
) -> Result<MonotonicityDiagnostic> {
    check_samples(model, samples)?;
    if axis >= model.dim {
        return Err(Error::arg(format!("axis {} out of range 1..={}", axis + 1, model.dim)));
    }
    if probe_ms.is_empty() || probe_ms.iter().any(|&m| m == 0) {
        return Err(Error::arg("probe steps must be a non-empty list of positive integers"));
    }
    let q = var(samples, alpha)?;
    let sd = samples.summary().variance.sqrt();
    let epsilon = sd * (samples.len() as f64).powf(-1.0 / 3.0) / 8.0;
    let band: Vec<usize> = (0..samples.len())
        .filter(|&j| (samples.losses[j] - q).abs() <= epsilon)
        .collect();
    if band.is_empty() {
        return Err(Error::insufficient(
            format!("no sample within {epsilon:e} of the quantile"),
            None,
        ));
    }
    let mut violated = vec![false; band.len()];
    for &m in probe_ms {
        let y = shifted(&samples.x, axis, 1.0 / m as f64);
        let probe = draw(model, &y, samples.len(), samples.seed)?;
        let qp = var(&probe, alpha)?;
        for (flag, &j) in violated.iter_mut().zip(&band) {
            let before = samples.losses[j] - q;
            let after = probe.losses[j] - qp;
            if after < before - 1e-12 {
                *flag = true;
            }
        }
    }
    let violations = violated.iter().filter(|&&v| v).count();
    let violation_fraction = violations as f64 / band.len() as f64;
    Ok(MonotonicityDiagnostic {
        i: axis + 1,
        epsilon,
        band_count: band.len(),
        violations,
        violation_fraction,
        threshold,
        pass: violation_fraction <= threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EulerAllocation {
    pub allocations: Vec<f64>,
    pub total: f64,
    pub es: f64,
    pub residual: f64,
}

/// `a_i = x_i · ∂ES/∂x_i`; needs first-order columns for every axis.
pub fn euler_allocation(model: &LossModel, alpha: f64, samples: &SampleSet) -> Result<EulerAllocation> {
    check_samples(model, samples)?;
    if model.homogeneity_degree != Some(1.0) {
        return Err(Error::NotApplicable(format!(
            "model '{}' is not declared positively homogeneous of degree 1",
            model.id
        )));
    }
    if samples.x.iter().all(|&v| v == 0.0) {
        return Err(Error::arg("Euler allocation is undefined at the zero portfolio"));
    }
    let mut allocations = Vec::with_capacity(model.dim);
    for (axis, &w) in samples.x.iter().enumerate() {
        let d = es_derivative(model, alpha, DerivKey::new(axis, 1), samples)?;
        allocations.push(w * d.derivative.map_or(f64::NAN, |d| d.value));
    }
    let total: f64 = allocations.iter().copied().collect::<NeumaierSum>().total();
    let es = es(samples, alpha)?.es;
    Ok(EulerAllocation {
        residual: (total - es).abs() / es.abs(),
        allocations,
        total,
        es,
    })
}
