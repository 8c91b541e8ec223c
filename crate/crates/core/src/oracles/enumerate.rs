use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss_models::LossModel;
use crate::sampling::DerivKey;

pub const MAX_ATOMS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactLevelSet {
    pub mass: f64,
    pub estimate: f64,
    pub abs_estimate: f64,
    pub prob_zero_deriv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteEnumeration {
    pub q: f64,
    /// ES from the quantile integral.
    pub es: f64,
    /// ES from the atom-corrected tail sum.
    pub es_tail: f64,
    pub atom: f64,
    /// Both ES forms are equal as rationals.
    pub forms_agree: bool,
    /// `∂ⁿES/∂x_iⁿ`; `None` when the atoms tied at `q` disagree on the quantile derivative.
    pub es_derivative: Option<f64>,
    /// `E[∂ⁿL | L = 0]`; `None` when `L = 0` has no mass.
    pub level_set: Option<ExactLevelSet>,
}

/// Exact rational of the shortest decimal that round-trips to `v`, so that
/// `0.6` is `3/5` rather than its binary neighbour.
fn decimal(v: f64) -> Result<BigRational> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("cannot enumerate {v}")));
    }
    let text = format!("{v:e}");
    let (mantissa, exp) = text.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits: BigInt = format!("{int}{frac}").parse().expect("decimal digits");
    let shift = exp - frac.len() as i32;
    let ten = BigInt::from(10);
    Ok(if shift >= 0 {
        BigRational::from_integer(digits * num_traits::pow(ten, shift as usize))
    } else {
        BigRational::new(digits, num_traits::pow(ten, (-shift) as usize))
    })
}

fn float(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

fn pos(r: BigRational) -> BigRational {
    if r < BigRational::zero() {
        BigRational::zero()
    } else {
        r
    }
}

/// Brute-force quantile, ES and level-set quantities over every atom of the factor law.
pub fn enumerate_discrete(model: &LossModel, x: &[f64], alpha: f64, key: Option<DerivKey>) -> Result<DiscreteEnumeration> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if x.len() != model.dim {
        return Err(Error::arg(format!("weight vector has length {}, model dim is {}", x.len(), model.dim)));
    }
    let atoms = model
        .law
        .atoms()
        .ok_or_else(|| Error::NotApplicable(format!("model '{}' has no finite atom list", model.id)))?;
    if atoms.len() > MAX_ATOMS {
        return Err(Error::Size(format!("{} atoms exceed the enumeration limit of {MAX_ATOMS}", atoms.len())));
    }
    if let Some(k) = key {
        model.check_derivative(k.axis, k.order)?;
    }

    let one = BigRational::from_integer(1.into());
    let a = decimal(alpha)?;
    let raw: Vec<BigRational> = atoms.iter().map(|(_, p)| decimal(*p)).collect::<Result<_>>()?;
    let total = raw.iter().fold(BigRational::zero(), |s, p| s + p);
    let probs: Vec<BigRational> = raw.into_iter().map(|p| p / &total).collect();

    struct Atom {
        loss: f64,
        exact: BigRational,
        p: BigRational,
        g: Option<BigRational>,
        g_float: f64,
    }
    let mut table = Vec::with_capacity(atoms.len());
    for ((y, _), p) in atoms.iter().zip(probs) {
        let loss = model.loss_unchecked(x, y);
        let (g, g_float) = match key {
            Some(k) => {
                let v = model.pathwise_unchecked(x, y, k.axis, k.order)?;
                (Some(decimal(v)?), v)
            }
            None => (None, 0.0),
        };
        table.push(Atom {
            loss,
            exact: decimal(loss)?,
            p,
            g,
            g_float,
        });
    }
    table.sort_by(|l, r| l.exact.cmp(&r.exact));

    // Distinct loss values with their probability and cumulative distribution.
    let mut groups: Vec<(usize, usize, BigRational, BigRational)> = Vec::new();
    let mut cum = BigRational::zero();
    let mut start = 0;
    while start < table.len() {
        let mut end = start;
        let mut mass = BigRational::zero();
        while end < table.len() && table[end].exact == table[start].exact {
            mass += &table[end].p;
            end += 1;
        }
        cum += &mass;
        groups.push((start, end, mass, cum.clone()));
        start = end;
    }
    let qg = groups.iter().position(|g| g.3 >= a).unwrap_or(groups.len() - 1);
    let q = table[groups[qg].0].exact.clone();
    let tail_size = &one - &a;
    let prev_cdf = |k: usize| if k == 0 { BigRational::zero() } else { groups[k - 1].3.clone() };

    let mut integral = BigRational::zero();
    let mut tail_sum = BigRational::zero();
    let mut tail_mass = BigRational::zero();
    for (k, (s, _, mass, cdf)) in groups.iter().enumerate() {
        let v = &table[*s].exact;
        let lower = std::cmp::max(prev_cdf(k), a.clone());
        integral += v * pos(cdf - lower);
        if k >= qg {
            tail_sum += v * mass;
            tail_mass += mass;
        }
    }
    let excess = &tail_mass - &tail_size;
    let es_integral = &integral / &tail_size;
    let es_tail = (&tail_sum - &q * &excess) / &tail_size;

    let mut es_derivative = None;
    let mut level_set = None;
    if key.is_some() {
        let (s, e, _, _) = groups[qg];
        let dq = table[s].g.clone().expect("derivative requested");
        if table[s..e].iter().all(|t| t.g.as_ref() == Some(&dq)) {
            let weighted = table[s..]
                .iter()
                .fold(BigRational::zero(), |acc, t| acc + &t.p * t.g.as_ref().expect("derivative requested"));
            es_derivative = Some(float(&((weighted - &dq * &excess) / &tail_size)));
        }

        let (mut mass, mut sum, mut abs, mut zero) =
            (BigRational::zero(), BigRational::zero(), BigRational::zero(), BigRational::zero());
        for t in table.iter().filter(|t| t.loss.abs() <= crate::conditional::ZERO_TOLERANCE) {
            let g = t.g.as_ref().expect("derivative requested");
            mass += &t.p;
            sum += &t.p * g;
            abs += &t.p * num_traits::Signed::abs(g);
            if t.g_float.abs() <= crate::conditional::ZERO_TOLERANCE {
                zero += &t.p;
            }
        }
        if !mass.is_zero() {
            level_set = Some(ExactLevelSet {
                mass: float(&mass),
                estimate: float(&(sum / &mass)),
                abs_estimate: float(&(abs / &mass)),
                prob_zero_deriv: float(&(zero / &mass)),
            });
        }
    }

    Ok(DiscreteEnumeration {
        q: float(&q),
        es: float(&es_integral),
        es_tail: float(&es_tail),
        atom: float(&excess),
        forms_agree: es_integral == es_tail,
        es_derivative,
        level_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_models::ModelSpec;

    #[test]
    fn decimal_conversion() {
        assert_eq!(decimal(0.6).unwrap(), BigRational::new(3.into(), 5.into()));
        assert_eq!(decimal(-1250.0).unwrap(), BigRational::from_integer((-1250).into()));
        assert_eq!(decimal(1e-20).unwrap(), BigRational::new(1.into(), num_traits::pow(BigInt::from(10), 20)));
        assert!(decimal(f64::NAN).is_err());
    }

    #[test]
    fn five_atom_table() {
        let m = LossModel::discrete_table(1, vec![1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap();
        let e = enumerate_discrete(&m, &[1.0], 0.6, None).unwrap();
        assert_eq!((e.q, e.es, e.es_tail), (3.0, 4.5, 4.5));
        assert!(e.forms_agree);
        assert_eq!(e.atom, 0.2);
    }

    #[test]
    fn single_atom() {
        let m = LossModel::discrete_table(1, vec![7.25], None).unwrap();
        for alpha in [0.01, 0.5, 0.99] {
            let e = enumerate_discrete(&m, &[1.0], alpha, None).unwrap();
            assert_eq!((e.q, e.es), (7.25, 7.25));
        }
    }

    #[test]
    fn min_shortfall_level_set() {
        let m = ModelSpec::from_json(r#"{"kind": "custom", "dim": 1, "params": {"formula": "min_shortfall_squared", "atoms": [0, 1, 2]}}"#)
            .unwrap()
            .build()
            .unwrap();
        let e = enumerate_discrete(&m, &[1.0], 0.5, Some(DerivKey::new(0, 1))).unwrap();
        let ls = e.level_set.unwrap();
        assert_eq!((ls.estimate, ls.abs_estimate, ls.prob_zero_deriv), (0.0, 0.0, 1.0));
        assert!((ls.mass - 2.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn weighted_table_derivative() {
        // L = W e^{x}; ES derivative equals ES itself.
        let m = ModelSpec::from_json(
            r#"{"kind": "custom", "dim": 1, "params": {"formula": "atom_scaled_exp", "atoms": [1, 2, 3], "probabilities": [0.5, 0.3, 0.2]}}"#,
        )
        .unwrap()
        .build()
        .unwrap();
        let e = enumerate_discrete(&m, &[0.0], 0.75, Some(DerivKey::new(0, 1))).unwrap();
        assert!(e.forms_agree);
        assert_eq!(e.q, 2.0);
        assert!((e.es - (2.0 * 0.05 + 3.0 * 0.2) / 0.25).abs() < 1e-15);
        assert!((e.es_derivative.unwrap() - e.es).abs() < 1e-15);
    }
}
