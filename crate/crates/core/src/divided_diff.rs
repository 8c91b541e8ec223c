//! Scaled forward divided differences `m^n · Δ_m^{i,n} f(x)` and
//! convergence tables for them.
//!
//! The stencil is one-sided: it samples `f` at `x + (j/m)·e_i` for
//! `j = 0..=n`. Its truncation error is first order in `1/m`, which is what
//! the Richardson step in [`convergence_table`] removes.

use serde::Serialize;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numeric::binomial;

/// Default step-denominator schedule for convergence tables.
pub const DEFAULT_M_SCHEDULE: [u64; 4] = [16, 32, 64, 128];

/// Above this value of `n·log10(m)` the stencil is dominated by
/// double-precision cancellation.
pub const CANCELLATION_LIMIT: f64 = 12.0;

/// Signed binomial weights of the forward difference of order `n` along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub order: u32,
    /// `coefficients[j] = (-1)^(n-j) · C(n, j)`.
    pub coefficients: Vec<f64>,
    pub axis: usize,
    pub step_denominator: u64,
}

impl Stencil {
    pub fn new(order: u32) -> Self {
        let coefficients = (0..=order)
            .map(|j| {
                let c = binomial(order, j) as f64;
                if (order - j) % 2 == 0 {
                    c
                } else {
                    -c
                }
            })
            .collect();
        Self {
            order,
            coefficients,
            axis: 0,
            step_denominator: 1,
        }
    }

    pub fn along(mut self, axis: usize, step_denominator: u64) -> Self {
        self.axis = axis;
        self.step_denominator = step_denominator;
        self
    }

    /// Offsets `j/m` at which the stencil samples, in coefficient order.
    pub fn offsets(&self) -> impl Iterator<Item = f64> + '_ {
        let m = self.step_denominator as f64;
        (0..=self.order).map(move |j| j as f64 / m)
    }

    /// `m^n · Σ_j c_j · values[j]` for values already evaluated at [`Stencil::offsets`].
    pub fn apply(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.coefficients.len());
        let raw: f64 = self
            .coefficients
            .iter()
            .zip(values)
            .map(|(c, v)| c * v)
            .sum();
        raw * (self.step_denominator as f64).powi(self.order as i32)
    }

    /// True when `n·log10(m)` exceeds the double-precision noise floor.
    pub fn cancellation_risk(&self) -> bool {
        self.order as f64 * (self.step_denominator as f64).log10() > CANCELLATION_LIMIT
    }
}

/// Signed-order front end: `n = 0` is the identity stencil, negative orders are rejected.
pub fn stencil(order: i64) -> Result<Stencil> {
    if order < 0 {
        return Err(Error::arg(format!("stencil order must be nonnegative, got {order}")));
    }
    let order = u32::try_from(order).map_err(|_| Error::arg("stencil order too large"))?;
    if order > 120 {
        return Err(Error::arg("stencil order too large for exact binomial weights"));
    }
    Ok(Stencil::new(order))
}

/// `m^n · Δ_m^{i,n} f(x)`, the forward divided-difference estimate of `∂ⁿf/∂x_iⁿ`.
pub fn divided_difference<F>(f: F, x: &[f64], axis: usize, order: u32, m: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if axis >= x.len() {
        return Err(Error::arg(format!("axis {axis} out of range for dimension {}", x.len())));
    }
    if m == 0 {
        return Err(Error::arg("step denominator m must be positive"));
    }
    let st = Stencil::new(order).along(axis, m);
    let mut point = x.to_vec();
    let mut values = Vec::with_capacity(order as usize + 1);
    for offset in st.offsets() {
        point[axis] = x[axis] + offset;
        let v = f(&point);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "f evaluated to {v} at offset {offset} along axis {axis}"
            )));
        }
        values.push(v);
    }
    Ok(st.apply(&values))
}

/// Same as [`divided_difference`] with the first-order error removed by one
/// Richardson step between `m` and `2m`.
pub fn richardson_divided_difference<F>(f: F, x: &[f64], axis: usize, order: u32, m: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let coarse = divided_difference(&f, x, axis, order, m)?;
    let fine = divided_difference(&f, x, axis, order, 2 * m)?;
    Ok(richardson_first_order(m, coarse, 2 * m, fine))
}

/// Limit of `e(m) = L + c/m` through two points.
pub fn richardson_first_order(m1: u64, e1: f64, m2: u64, e2: f64) -> f64 {
    let (m1, m2) = (m1 as f64, m2 as f64);
    (m2 * e2 - m1 * e1) / (m2 - m1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub m: u64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Richardson limit from the last two rows.
    pub extrapolated: f64,
    pub stable: bool,
}

impl ConvergenceTable {
    /// Builds a table from precomputed `(m, estimate)` pairs.
    pub fn from_rows(order: u32, rows: Vec<ConvergenceRow>) -> Result<Self> {
        validate_schedule(&rows.iter().map(|r| r.m).collect::<Vec<_>>())?;
        let n = rows.len();
        let (a, b) = (&rows[n - 2], &rows[n - 1]);
        let extrapolated = richardson_first_order(a.m, a.estimate, b.m, b.estimate);

        let first = rows[0].estimate.abs();
        let last = rows[n - 1].estimate.abs();
        let diverging = last > 10.0 * first && last > 1e-12;
        let cancellation = Stencil::new(order).along(0, b.m).cancellation_risk();
        let finite = rows.iter().all(|r| r.estimate.is_finite()) && extrapolated.is_finite();
        Ok(Self {
            rows,
            extrapolated,
            stable: finite && !diverging && !cancellation,
        })
    }

    /// `m,estimate` rows followed by `# extrapolated,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,estimate\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.16e}", r.m, r.estimate);
        }
        let _ = writeln!(out, "# extrapolated,{:.16e}", self.extrapolated);
        out
    }
}

fn validate_schedule(schedule: &[u64]) -> Result<()> {
    if schedule.len() < 3 {
        return Err(Error::arg(format!(
            "m schedule needs at least 3 entries, got {}",
            schedule.len()
        )));
    }
    if schedule[0] == 0 || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("m schedule must be strictly increasing positive integers"));
    }
    Ok(())
}

/// Divided-difference estimates along a schedule of step denominators.
pub fn convergence_table<F>(f: F, x: &[f64], axis: usize, order: u32, schedule: &[u64]) -> Result<ConvergenceTable>
where
    F: Fn(&[f64]) -> f64,
{
    validate_schedule(schedule)?;
    let rows = schedule
        .iter()
        .map(|&m| {
            divided_difference(&f, x, axis, order, m).map(|estimate| ConvergenceRow { m, estimate })
        })
        .collect::<Result<Vec<_>>>()?;
    ConvergenceTable::from_rows(order, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(x: &[f64]) -> f64 {
        x[0] * x[0] * x[0]
    }

    #[test]
    fn low_order_stencils() {
        assert_eq!(stencil(1).unwrap().coefficients, vec![-1.0, 1.0]);
        assert_eq!(stencil(2).unwrap().coefficients, vec![1.0, -2.0, 1.0]);
        assert_eq!(stencil(3).unwrap().coefficients, vec![-1.0, 3.0, -3.0, 1.0]);
        assert_eq!(stencil(0).unwrap().coefficients, vec![1.0]);
        assert!(matches!(stencil(-1), Err(Error::Argument(_))));
    }

    // Direct summation of Σ_j (-1)^(n-j) C(n,j) j^k in integers, independent of Stencil.
    #[test]
    fn moment_identity_by_direct_summation() {
        for n in 1..=8u32 {
            for k in 0..=n {
                let mut acc: i128 = 0;
                for j in 0..=n {
                    let c = binomial(n, j) as i128;
                    let sign = if (n - j) % 2 == 0 { 1 } else { -1 };
                    acc += sign * c * (j as i128).pow(k);
                }
                let expected = if k < n { 0 } else { crate::numeric::factorial(n) as i128 };
                assert_eq!(acc, expected, "n={n} k={k}");
            }
            let st = Stencil::new(n);
            assert_eq!(st.coefficients.iter().sum::<f64>(), 0.0);
            let on_monomial: f64 = st
                .coefficients
                .iter()
                .enumerate()
                .map(|(j, c)| c * (j as f64).powi(n as i32))
                .sum();
            assert_eq!(on_monomial, crate::numeric::factorial(n) as f64);
        }
    }

    // x³ at 1: stencil values 1, 1.331, 1.728 give 100·0.066 = 6.6 = 6 + 6/m.
    #[test]
    fn cube_second_difference() {
        let v = divided_difference(cube, &[1.0], 0, 2, 10).unwrap();
        assert!((v - 6.6).abs() <= 1e-9 * 6.6);
    }

    #[test]
    fn constant_and_quadratic() {
        for n in 1..5 {
            for m in [1, 7, 100] {
                assert_eq!(divided_difference(|_| 3.5, &[0.3], 0, n, m).unwrap(), 0.0);
            }
        }
        for x in [-3.0, 0.0, 2.5] {
            for m in [1u64, 8, 1000] {
                let v = divided_difference(|p: &[f64]| p[0] * p[0], &[x], 0, 2, m).unwrap();
                assert!((v - 2.0).abs() < 1e-9, "x={x} m={m} v={v}");
            }
        }
    }

    #[test]
    fn non_finite_value_is_reported() {
        let r = divided_difference(|p: &[f64]| 1.0 / (p[0] - 0.5), &[0.0], 0, 1, 2);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn cube_table_and_richardson() {
        let t = convergence_table(cube, &[1.0], 0, 2, &[10, 20, 40]).unwrap();
        let expected = [6.6, 6.3, 6.15];
        for (row, e) in t.rows.iter().zip(expected) {
            assert!((row.estimate - e).abs() <= 1e-9 * e);
        }
        assert!((t.extrapolated - 6.0).abs() <= 1e-9);
        assert!(t.stable);
        let csv = t.to_csv();
        assert!(csv.starts_with("m,estimate\n10,"));
        assert!(csv.trim_end().lines().last().unwrap().starts_with("# extrapolated,"));
    }

    #[test]
    fn linear_table_is_flat() {
        let t = convergence_table(|p: &[f64]| 4.0 * p[0] - 1.0, &[2.0], 0, 1, &[16, 32, 64]).unwrap();
        for r in &t.rows {
            assert!((r.estimate - 4.0).abs() < 1e-12);
        }
        assert!((t.extrapolated - 4.0).abs() < 1e-12);
    }

    #[test]
    fn abs_at_kink_is_one_sided() {
        let t = convergence_table(|p: &[f64]| p[0].abs(), &[0.0], 0, 1, &[10, 20, 40]).unwrap();
        assert!(t.rows.iter().all(|r| r.estimate == 1.0));
        assert!(t.stable);
    }

    #[test]
    fn schedule_validation_and_cancellation_guard() {
        assert!(convergence_table(cube, &[1.0], 0, 2, &[10, 20]).is_err());
        assert!(convergence_table(cube, &[1.0], 0, 2, &[10, 10, 20]).is_err());
        let t = convergence_table(cube, &[1.0], 0, 3, &[1000, 10_000, 100_000]).unwrap();
        assert!(!t.stable, "3·log10(1e5) = 15 > 12 must be flagged");
        let growing = ConvergenceTable::from_rows(
            1,
            vec![
                ConvergenceRow { m: 1, estimate: 1.0 },
                ConvergenceRow { m: 2, estimate: 5.0 },
                ConvergenceRow { m: 3, estimate: 20.0 },
            ],
        )
        .unwrap();
        assert!(!growing.stable);
    }

    // On a dyadic grid with small integer coefficients every stencil point and
    // polynomial value is exact in binary floating point, so the result is exact.
    #[test]
    fn exact_on_dyadic_grid() {
        let poly = |p: &[f64]| 2.0 * p[0].powi(4) - 3.0 * p[0].powi(3) + p[0] - 7.0;
        for x in [-10.0, -2.5, 0.0, 3.0, 10.0] {
            for m in [1u64, 4, 16, 64] {
                let v = divided_difference(poly, &[x], 0, 4, m).unwrap();
                assert_eq!(v, 48.0, "x={x} m={m}");
            }
        }
    }

    proptest! {
        // Exactness on polynomials of degree ≤ n.
        #[test]
        fn exact_on_polynomials(
            coeffs in proptest::collection::vec(-3.0f64..3.0, 1..5),
            x in -10.0f64..10.0,
            m in 1u64..10_000,
        ) {
            let n = (coeffs.len() - 1) as u32;
            prop_assume!(n >= 1);
            let poly = |p: &[f64]| coeffs.iter().rev().fold(0.0, |acc, c| acc * p[0] + c);
            let lead = coeffs[n as usize] * crate::numeric::factorial(n) as f64;
            let v = divided_difference(poly, &[x], 0, n, m).unwrap();
            // Roundoff grows like eps·|f|·(2m)^n; the bound below stays inside it.
            let scale: f64 = coeffs.iter().map(|c| c.abs()).sum::<f64>() * (x.abs() + 1.0).powi(n as i32);
            let roundoff = 8.0 * f64::EPSILON * scale * (2.0 * m as f64).powi(n as i32);
            prop_assert!((v - lead).abs() <= 1e-9 * lead.abs().max(1.0) + roundoff,
                "v={} lead={} roundoff={}", v, lead, roundoff);
        }
    }
}
