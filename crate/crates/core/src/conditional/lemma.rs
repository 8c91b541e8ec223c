//! Probe for the vanishing of `E[H_m · 1_{A_m}]` as `P[A_m] → 0`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::Verdict;
use crate::error::{Error, Result};
use crate::numeric::moments;
use crate::rng::CounterRng;

/// Indexed family `m ↦ (H_m, A_m)` driven by one uniform draw per sample.
pub trait VanishingFamily: Sync {
    /// `(H_m(u), 1_{A_m}(u))`.
    fn sample(&self, m: u64, u: f64) -> (f64, bool);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinFamily {
    /// `H_m ≡ 1`, `A_m = {U ≤ 1/m}`.
    Constant,
    /// `H_m = m`, `A_m = {U ≤ 1/m}`: no integrable envelope.
    Unbounded,
    /// `A_m = ∅`.
    Empty,
    /// `H_m ≡ 1`, `A_m = {U ≤ p}` for every `m`.
    Fixed(f64),
}

impl VanishingFamily for BuiltinFamily {
    fn sample(&self, m: u64, u: f64) -> (f64, bool) {
        let shrinking = u <= 1.0 / m as f64;
        match *self {
            BuiltinFamily::Constant => (1.0, shrinking),
            BuiltinFamily::Unbounded => (m as f64, shrinking),
            BuiltinFamily::Empty => (1.0, false),
            BuiltinFamily::Fixed(p) => (1.0, u <= p),
        }
    }
}

impl FromStr for BuiltinFamily {
    type Err = Error;

    /// `constant`, `unbounded`, `empty`, `fixed` (p = 0.5) or `fixed:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "unbounded" => Ok(Self::Unbounded),
            "empty" => Ok(Self::Empty),
            "fixed" => Ok(Self::Fixed(0.5)),
            other => other
                .strip_prefix("fixed:")
                .and_then(|p| p.parse::<f64>().ok())
                .filter(|p| (0.0..=1.0).contains(p))
                .map(Self::Fixed)
                .ok_or_else(|| {
                    Error::arg(format!(
                        "unknown family '{other}' (expected constant, unbounded, empty, fixed or fixed:<p>)"
                    ))
                }),
        }
    }
}

impl fmt::Display for BuiltinFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant => f.write_str("constant"),
            Self::Unbounded => f.write_str("unbounded"),
            Self::Empty => f.write_str("empty"),
            Self::Fixed(p) => write!(f, "fixed:{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Row {
    pub m: u64,
    pub estimate: f64,
    pub standard_error: f64,
    pub abs_estimate: f64,
    pub abs_standard_error: f64,
    pub event_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub rows: Vec<Lemma1Row>,
    pub verdict: Verdict,
}

/// Passes when the last `|Ê|` is within `1e-3 + 3·SE` of zero and the
/// `|Ê|` sequence never rises by more than two standard errors.
fn sequence_passes(values: &[(f64, f64)]) -> bool {
    let &(last, last_se) = values.last().expect("non-empty schedule");
    let small = last.abs() - 3.0 * last_se <= 1e-3;
    let shrinking = values
        .windows(2)
        .all(|w| w[1].0.abs() <= w[0].0.abs() + 2.0 * w[0].1.max(w[1].1));
    small && shrinking
}

/// Estimates `E[H_m 1_{A_m}]` and `E[|H_m| 1_{A_m}]` along `schedule` with the
/// same uniforms for every `m`.
pub fn lemma1_probe(family: &dyn VanishingFamily, schedule: &[u64], count: usize, seed: u64) -> Result<Lemma1Report> {
    if schedule.len() < 3 {
        return Err(Error::arg(format!("m schedule needs at least 3 entries, got {}", schedule.len())));
    }
    if schedule.contains(&0) {
        return Err(Error::arg("m schedule entries must be positive"));
    }
    if count == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let rng = CounterRng::new(seed);
    let u: Vec<f64> = (0..count as u64).into_par_iter().map(|j| rng.stream(j).uniform()).collect();

    let mut rows = Vec::with_capacity(schedule.len());
    for &m in schedule {
        let (signed, hits): (Vec<f64>, Vec<bool>) = u
            .par_iter()
            .map(|&u| {
                let (h, a) = family.sample(m, u);
                (if a { h } else { 0.0 }, a)
            })
            .unzip();
        let abs: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
        let (s, a) = (moments(&signed), moments(&abs));
        rows.push(Lemma1Row {
            m,
            estimate: s.mean,
            standard_error: s.standard_error,
            abs_estimate: a.mean,
            abs_standard_error: a.standard_error,
            event_probability: hits.iter().filter(|&&h| h).count() as f64 / count as f64,
        });
    }
    let signed: Vec<(f64, f64)> = rows.iter().map(|r| (r.estimate, r.standard_error)).collect();
    let abs: Vec<(f64, f64)> = rows.iter().map(|r| (r.abs_estimate, r.abs_standard_error)).collect();
    let verdict = if sequence_passes(&signed) && sequence_passes(&abs) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(Lemma1Report { rows, verdict })
}
