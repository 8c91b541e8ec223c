//! Conditional expectations on the level set `{H = 0}`.
//!
//! Two estimators share one report type:
//!
//! - [`conditional_expectation_discrete`] enumerates atoms and conditions on
//!   `|H_j| ≤ 1e-12` exactly.
//! - [`conditional_expectation_banded`] averages `g` over shrinking bands
//!   around the level set and extrapolates the band means to zero width.
//!   The default band is one-sided, `{0 ≤ H ≤ 2ε}`; a symmetric band
//!   `{|H| ≤ ε}` is available through [`BandMode::Symmetric`].
//!
//! The verifiers in [`verify`] and the vanishing-sequence probe in
//! [`lemma`] are built on top of these.

pub mod lemma;
pub mod verify;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{moments, NeumaierSum};

pub use lemma::{lemma1_probe, BuiltinFamily, Lemma1Report, Lemma1Row, VanishingFamily};
pub use verify::{verify_proposition1, verify_proposition2, Prop2Report, VerifyConfig};

/// `|H| ≤ ZERO_TOLERANCE` counts as being on the level set for atoms, and
/// `|g| ≤ ZERO_TOLERANCE` counts as a vanishing derivative.
pub const ZERO_TOLERANCE: f64 = 1e-12;

/// Bands holding fewer samples than this are skipped.
pub const MIN_BAND_COUNT: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    Discrete,
    AbsolutelyContinuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// `{0 ≤ H ≤ 2ε}`, extrapolated linearly in `ε`.
    #[default]
    OneSided,
    /// `{|H| ≤ ε}`, extrapolated linearly in `ε²`.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    PremiseFailed,
}

impl Verdict {
    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

/// Pass thresholds for the three level-set conclusions
/// (`E|g| = 0`, `P[g = 0] = 1`, `E g = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Floor for `|estimate|` and `abs_estimate`.
    pub absolute: f64,
    /// Allowed shortfall of `prob_zero_deriv` below one.
    pub probability: f64,
    /// Multiple of the standard error added to `absolute` for sampled estimates.
    pub standard_errors: f64,
}

impl Tolerances {
    pub const EXACT: Tolerances = Tolerances {
        absolute: 1e-14,
        probability: 1e-14,
        standard_errors: 0.0,
    };

    pub const SAMPLED: Tolerances = Tolerances {
        absolute: 1e-3,
        probability: 0.01,
        standard_errors: 3.0,
    };

    pub fn for_law(law: Law) -> Self {
        match law {
            Law::Discrete => Self::EXACT,
            Law::AbsolutelyContinuous => Self::SAMPLED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetQuery {
    /// Realizations of `H(x)`.
    pub h: Vec<f64>,
    /// Realizations of the integrand, typically `∂ⁿH/∂x_iⁿ`.
    pub g: Vec<f64>,
    /// Atom probabilities; `None` treats every entry as an equally likely sample.
    pub weights: Option<Vec<f64>>,
    pub law: Law,
    /// Strictly decreasing positive half-widths.
    pub bands: Vec<f64>,
    pub band_mode: BandMode,
    pub tolerances: Tolerances,
}

impl LevelSetQuery {
    pub fn discrete(h: Vec<f64>, g: Vec<f64>, weights: Option<Vec<f64>>) -> Self {
        Self {
            h,
            g,
            weights,
            law: Law::Discrete,
            bands: Vec::new(),
            band_mode: BandMode::OneSided,
            tolerances: Tolerances::EXACT,
        }
    }

    /// Banded query; empty `bands` selects [`default_bands`].
    pub fn banded(h: Vec<f64>, g: Vec<f64>, bands: Vec<f64>) -> Self {
        let bands = if bands.is_empty() { default_bands(&h) } else { bands };
        Self {
            h,
            g,
            weights: None,
            law: Law::AbsolutelyContinuous,
            bands,
            band_mode: BandMode::OneSided,
            tolerances: Tolerances::SAMPLED,
        }
    }

    pub fn with_mode(mut self, mode: BandMode) -> Self {
        self.band_mode = mode;
        self
    }

    pub fn with_tolerances(mut self, tolerances: Tolerances) -> Self {
        self.tolerances = tolerances;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.h.is_empty() || self.h.len() != self.g.len() {
            return Err(Error::arg(format!(
                "H and g must be non-empty and of equal length ({} vs {})",
                self.h.len(),
                self.g.len()
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.h.len() || w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::arg("weights must be nonnegative and match H in length"));
            }
        }
        if self.law == Law::AbsolutelyContinuous {
            if self.bands.is_empty() || self.bands.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
                return Err(Error::arg("band half-widths must be positive and finite"));
            }
            if self.bands.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::arg("band schedule must be strictly decreasing"));
            }
        }
        Ok(())
    }
}

/// `ε_k = sd(H) · N^(-1/3) · 2^(-k)` for `k = 0..4`.
pub fn default_bands(h: &[f64]) -> Vec<f64> {
    let c = moments(h).variance.sqrt();
    let c = if c > 0.0 && c.is_finite() { c } else { 1.0 };
    let base = c * (h.len() as f64).powf(-1.0 / 3.0);
    (0..4).map(|k| base / f64::from(1u32 << k)).collect()
}

/// Per-band summary; serialized as `{epsilon, count, mean}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandStat {
    pub epsilon: f64,
    pub count: usize,
    pub mean: f64,
    #[serde(skip)]
    pub abs_mean: f64,
    #[serde(skip)]
    pub standard_error: f64,
    #[serde(skip)]
    pub zero_fraction: f64,
    #[serde(skip)]
    pub usable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSetReport {
    pub estimate: f64,
    pub abs_estimate: f64,
    pub prob_zero_deriv: f64,
    pub conditioning_mass: f64,
    pub standard_error: f64,
    pub verdict: Verdict,
    pub premise_violation_fraction: Option<f64>,
    pub bands: Vec<BandStat>,
    #[serde(skip)]
    pub abs_standard_error: f64,
}

impl LevelSetReport {
    fn judge(&mut self, tol: &Tolerances) {
        let bound = |se: f64| tol.absolute.max(tol.standard_errors * se);
        let ok = self.estimate.abs() <= bound(self.standard_error)
            && self.abs_estimate <= bound(self.abs_standard_error)
            && 1.0 - self.prob_zero_deriv <= tol.probability;
        self.verdict = if ok { Verdict::Pass } else { Verdict::Fail };
    }

    /// Marks the report as resting on a failed premise when `fraction` exceeds `threshold`.
    pub fn apply_premise(&mut self, fraction: f64, threshold: f64) {
        self.premise_violation_fraction = Some(fraction);
        if fraction > threshold {
            self.verdict = Verdict::PremiseFailed;
        }
    }
}

/// Exact conditional expectation over atoms with `|H_j| ≤ 1e-12`.
pub fn conditional_expectation_discrete(query: &LevelSetQuery) -> Result<LevelSetReport> {
    query.validate()?;
    let n = query.h.len();
    let uniform = 1.0 / n as f64;
    let weight = |j: usize| query.weights.as_ref().map_or(uniform, |w| w[j]);

    let mut total = 0.0;
    let mut mass = 0.0;
    let mut wg = 0.0;
    let mut wabs = 0.0;
    let mut wzero = 0.0;
    let mut level_g = Vec::new();
    for j in 0..n {
        let w = weight(j);
        total += w;
        if query.h[j].abs() <= ZERO_TOLERANCE {
            let g = query.g[j];
            mass += w;
            wg += w * g;
            wabs += w * g.abs();
            if g.abs() <= ZERO_TOLERANCE {
                wzero += w;
            }
            level_g.push(g);
        }
    }
    if !(mass > 0.0) {
        return Err(Error::ConditioningMass(format!("no atom with |H| ≤ {ZERO_TOLERANCE:e}")));
    }
    // Exact enumeration has no sampling error; equally weighted samples do.
    let (se, abs_se) = if query.weights.is_some() {
        (0.0, 0.0)
    } else {
        let abs: Vec<f64> = level_g.iter().map(|g| g.abs()).collect();
        (moments(&level_g).standard_error, moments(&abs).standard_error)
    };
    let estimate = wg / mass;
    let mut report = LevelSetReport {
        estimate,
        abs_estimate: (wabs / mass).max(estimate.abs()),
        prob_zero_deriv: (wzero / mass).clamp(0.0, 1.0),
        conditioning_mass: mass / total,
        standard_error: se,
        verdict: Verdict::Fail,
        premise_violation_fraction: None,
        bands: Vec::new(),
        abs_standard_error: abs_se,
    };
    report.judge(&query.tolerances);
    Ok(report)
}

fn in_band(mode: BandMode, h: f64, eps: f64) -> bool {
    match mode {
        BandMode::OneSided => (0.0..=2.0 * eps).contains(&h),
        BandMode::Symmetric => h.abs() <= eps,
    }
}

/// Smallest half-width whose band would hold [`MIN_BAND_COUNT`] samples.
fn smallest_usable_epsilon(mode: BandMode, h: &[f64]) -> Option<f64> {
    let mut dist: Vec<f64> = match mode {
        BandMode::OneSided => h.iter().filter(|&&v| v >= 0.0).map(|v| v / 2.0).collect(),
        BandMode::Symmetric => h.iter().map(|v| v.abs()).collect(),
    };
    if dist.len() < MIN_BAND_COUNT {
        return None;
    }
    dist.sort_by(f64::total_cmp);
    Some(dist[MIN_BAND_COUNT - 1])
}

struct BandSums {
    count: usize,
    sum: NeumaierSum,
    abs: NeumaierSum,
    zeros: usize,
}

impl BandSums {
    fn of<'a>(values: impl Iterator<Item = &'a f64>) -> (Self, Vec<f64>) {
        let mut s = BandSums {
            count: 0,
            sum: NeumaierSum::new(),
            abs: NeumaierSum::new(),
            zeros: 0,
        };
        let mut kept = Vec::new();
        for &g in values {
            s.count += 1;
            s.sum.add(g);
            s.abs.add(g.abs());
            if g.abs() <= ZERO_TOLERANCE {
                s.zeros += 1;
            }
            kept.push(g);
        }
        (s, kept)
    }
}

/// Linear extrapolation of nested band means to zero width, with the
/// variance of the two-point combination computed from the disjoint parts
/// (inner band and the ring between the bands).
fn extrapolate(x1: f64, x2: f64, outer: &[f64], inner: &[f64], ring: &[f64]) -> (f64, f64) {
    let (n1, n2) = (outer.len() as f64, inner.len() as f64);
    let m1 = moments(outer).mean;
    let m2 = moments(inner).mean;
    let a = x1 / (x1 - x2);
    let b = -x2 / (x1 - x2);
    let estimate = a * m2 + b * m1;
    let ci = a + b * n2 / n1;
    let inner_m = moments(inner);
    let mut var = ci * ci * inner_m.variance / n2;
    if !ring.is_empty() {
        let cr = b * ring.len() as f64 / n1;
        var += cr * cr * moments(ring).variance / ring.len() as f64;
    }
    (estimate, var.sqrt())
}

/// Shrinking-band estimate of `E[g | H = 0]` for a density at zero.
pub fn conditional_expectation_banded(query: &LevelSetQuery) -> Result<LevelSetReport> {
    query.validate()?;
    let n = query.h.len();
    let mode = query.band_mode;

    let mut bands = Vec::with_capacity(query.bands.len());
    let mut members: Vec<Vec<f64>> = Vec::with_capacity(query.bands.len());
    for &eps in &query.bands {
        let (sums, kept) = BandSums::of(
            query
                .h
                .iter()
                .zip(&query.g)
                .filter(|(h, _)| in_band(mode, **h, eps))
                .map(|(_, g)| g),
        );
        let usable = sums.count >= MIN_BAND_COUNT;
        let c = sums.count.max(1) as f64;
        bands.push(BandStat {
            epsilon: eps,
            count: sums.count,
            mean: if sums.count > 0 { sums.sum.total() / c } else { f64::NAN },
            abs_mean: if sums.count > 0 { sums.abs.total() / c } else { f64::NAN },
            standard_error: moments(&kept).standard_error,
            zero_fraction: sums.zeros as f64 / c,
            usable,
        });
        members.push(kept);
    }

    let usable: Vec<usize> = (0..bands.len()).filter(|&k| bands[k].usable).collect();
    let Some(&finest) = usable.last() else {
        let smallest = smallest_usable_epsilon(mode, &query.h);
        return Err(Error::insufficient(
            format!(
                "every band holds fewer than {MIN_BAND_COUNT} samples; smallest usable epsilon is {}",
                smallest.map_or("none".to_string(), |e| format!("{e:e}"))
            ),
            smallest,
        ));
    };

    let (estimate, se, abs_est, abs_se) = if usable.len() >= 2 {
        let outer_k = usable[usable.len() - 2];
        let (e1, e2) = (bands[outer_k].epsilon, bands[finest].epsilon);
        let (x1, x2) = match mode {
            BandMode::OneSided => (e1, e2),
            BandMode::Symmetric => (e1 * e1, e2 * e2),
        };
        let ring: Vec<f64> = query
            .h
            .iter()
            .zip(&query.g)
            .filter(|(h, _)| in_band(mode, **h, e1) && !in_band(mode, **h, e2))
            .map(|(_, g)| *g)
            .collect();
        let (est, se) = extrapolate(x1, x2, &members[outer_k], &members[finest], &ring);
        let abs = |v: &[f64]| v.iter().map(|g| g.abs()).collect::<Vec<_>>();
        let (aest, ase) = extrapolate(x1, x2, &abs(&members[outer_k]), &abs(&members[finest]), &abs(&ring));
        (est, se, aest, ase)
    } else {
        let b = &bands[finest];
        let abs: Vec<f64> = members[finest].iter().map(|g| g.abs()).collect();
        (b.mean, b.standard_error, b.abs_mean, moments(&abs).standard_error)
    };

    let mut report = LevelSetReport {
        estimate,
        // The extrapolated |g| mean can dip below |estimate| through noise;
        // E|g| ≥ |E g| always holds, so project onto it.
        abs_estimate: abs_est.max(estimate.abs()),
        prob_zero_deriv: bands[finest].zero_fraction.clamp(0.0, 1.0),
        conditioning_mass: bands[finest].count as f64 / n as f64,
        standard_error: se,
        verdict: Verdict::Fail,
        premise_violation_fraction: None,
        bands,
        abs_standard_error: abs_se,
    };
    report.judge(&query.tolerances);
    Ok(report)
}

/// Routes a query by its declared law.
pub fn conditional_expectation(query: &LevelSetQuery) -> Result<LevelSetReport> {
    match query.law {
        Law::Discrete => conditional_expectation_discrete(query),
        Law::AbsolutelyContinuous => conditional_expectation_banded(query),
    }
}
