use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss_models::LossModel;
use crate::numeric::moments;
use crate::risk_measures::es;
use crate::sampling::{draw, SampleSet};

/// Number of contiguous index blocks behind the standard error.
pub const FD_BLOCKS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdEstimate {
    /// One-based axis.
    pub i: usize,
    pub n: u32,
    pub h: f64,
    pub value: f64,
    pub standard_error: f64,
    /// ES at `x − h e_i`, `x` (second order only) and `x + h e_i`.
    pub es_points: Vec<f64>,
    /// The CRN difference is exactly zero; the step is too small to resolve anything.
    pub degenerate_step: bool,
}

fn stencil(order: u32) -> &'static [f64] {
    match order {
        1 => &[-0.5, 0.5],
        _ => &[1.0, -2.0, 1.0],
    }
}

/// Central difference of Monte Carlo ES in `x_i` with the same seed at every point.
#[allow(clippy::too_many_arguments)]
pub fn fd_of_mc_es(
    model: &LossModel,
    x: &[f64],
    alpha: f64,
    axis: usize,
    order: u32,
    h: f64,
    count: usize,
    seed: u64,
) -> Result<FdEstimate> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::arg(format!("step h must be positive, got {h}")));
    }
    if !(order == 1 || order == 2) {
        return Err(Error::UnsupportedOrder { order, max: 2 });
    }
    if axis >= model.dim || x.len() != model.dim {
        return Err(Error::arg(format!("axis {} out of range for dimension {}", axis + 1, model.dim)));
    }
    let offsets: &[f64] = if order == 1 { &[-h, h] } else { &[-h, 0.0, h] };
    let weights = stencil(order);
    let scale = h.powi(order as i32);

    let sets = offsets
        .iter()
        .map(|d| {
            let mut y = x.to_vec();
            y[axis] += d;
            draw(model, &y, count, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let es_points = sets.iter().map(|s| es(s, alpha).map(|e| e.es)).collect::<Result<Vec<_>>>()?;
    let numerator: f64 = weights.iter().zip(&es_points).map(|(w, v)| w * v).sum();

    let blocks = FD_BLOCKS.min(count);
    let per_block: Vec<f64> = (0..blocks)
        .map(|b| {
            let (lo, hi) = (b * count / blocks, (b + 1) * count / blocks);
            let mut acc = 0.0;
            for (w, s) in weights.iter().zip(&sets) {
                let block = SampleSet::from_losses(model.id.clone(), s.losses[lo..hi].to_vec())?;
                acc += w * es(&block, alpha)?.es;
            }
            Ok(acc / scale)
        })
        .collect::<Result<_>>()?;
    let standard_error = if blocks >= 2 { moments(&per_block).standard_error } else { 0.0 };

    Ok(FdEstimate {
        i: axis + 1,
        n: order,
        h,
        value: numerator / scale,
        standard_error,
        es_points,
        degenerate_step: numerator == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_models::ModelSpec;

    #[test]
    fn deterministic_linear_is_exact() {
        let m = ModelSpec::from_json(r#"{"kind": "custom", "dim": 2, "params": {"formula": "deterministic_linear", "coefficients": [1.5, -2]}}"#)
            .unwrap()
            .build()
            .unwrap();
        for h in [0.5, 0.125] {
            let f = fd_of_mc_es(&m, &[1.0, 3.0], 0.9, 1, 1, h, 1000, 1).unwrap();
            assert_eq!(f.value, -2.0);
            assert_eq!(f.standard_error, 0.0);
            assert!(!f.degenerate_step);
            let f2 = fd_of_mc_es(&m, &[1.0, 3.0], 0.9, 0, 2, h, 1000, 1).unwrap();
            assert_eq!(f2.value, 0.0);
            assert!(f2.degenerate_step);
        }
    }

    #[test]
    fn gaussian_first_order() {
        let m = LossModel::standard_gaussian_linear(2).unwrap();
        let f = fd_of_mc_es(&m, &[3.0, 4.0], 0.95, 0, 1, 1e-3, 1_000_000, 42).unwrap();
        assert!((f.value - 1.2376276845044565).abs() < 0.01, "{f:?}");
        assert!(f.standard_error < 0.01);
    }

    #[test]
    fn bad_inputs() {
        let m = LossModel::standard_gaussian_linear(2).unwrap();
        assert!(matches!(fd_of_mc_es(&m, &[1.0, 1.0], 0.9, 0, 1, 0.0, 10, 1), Err(Error::Argument(_))));
        assert!(matches!(fd_of_mc_es(&m, &[1.0, 1.0], 0.9, 0, 3, 0.1, 10, 1), Err(Error::UnsupportedOrder { .. })));
    }
}
