use serde::Serialize;

use super::normal;
use crate::error::{Error, Result};
use crate::loss_models::{FactorLaw, LossModel, ModelKind};

/// Mean and covariance of the factor vector of a linear Gaussian portfolio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianPortfolio {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianTail {
    pub q: f64,
    pub es: f64,
    pub zero_variance: bool,
}

impl GaussianPortfolio {
    pub fn new(mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
            return Err(Error::arg("mu and sigma dimensions disagree"));
        }
        for i in 0..d {
            for j in 0..i {
                let scale = sigma[i][j].abs().max(sigma[j][i].abs()).max(1.0);
                if (sigma[i][j] - sigma[j][i]).abs() > 1e-12 * scale {
                    return Err(Error::Domain(format!("sigma is not symmetric at ({}, {})", i + 1, j + 1)));
                }
            }
        }
        Ok(Self { mu, sigma })
    }

    /// The factor law of a `gaussian_linear` model.
    pub fn from_model(model: &LossModel) -> Result<Self> {
        match (&model.kind, &model.law) {
            (ModelKind::GaussianLinear, FactorLaw::Gaussian(g)) => Self::new(g.mean.clone(), g.covariance.clone()),
            _ => Err(Error::NotApplicable(format!("no Gaussian closed form for model '{}'", model.id))),
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.mu.len() {
            return Err(Error::arg(format!("weight vector has length {}, portfolio has {}", x.len(), self.mu.len())));
        }
        Ok(())
    }

    fn sigma_x(&self, x: &[f64]) -> Vec<f64> {
        self.sigma.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn mean(&self, x: &[f64]) -> f64 {
        self.mu.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// `(Σx, s)` with `s = √(x'Σx)`.
    fn spread(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let sx = self.sigma_x(x);
        let v: f64 = sx.iter().zip(x).map(|(a, b)| a * b).sum();
        (sx, v.max(0.0).sqrt())
    }
}

fn tail_factor(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = normal::quantile(alpha);
    Ok((z, normal::pdf(z) / (1.0 - alpha)))
}

/// `q = x'μ + s z_α`, `ES = x'μ + s φ(z_α)/(1−α)`.
pub fn gaussian_var_es(p: &GaussianPortfolio, x: &[f64], alpha: f64) -> Result<GaussianTail> {
    p.check(x)?;
    let (z, c) = tail_factor(alpha)?;
    let m = p.mean(x);
    let (_, s) = p.spread(x);
    Ok(GaussianTail {
        q: m + s * z,
        es: m + s * c,
        zero_variance: s == 0.0,
    })
}

/// `∂ES/∂x_i = μ_i + (Σx)_i c / s`; `axis` is zero-based.
pub fn gaussian_es_gradient(p: &GaussianPortfolio, x: &[f64], alpha: f64, axis: usize) -> Result<f64> {
    p.check(x)?;
    let (_, c) = tail_factor(alpha)?;
    let (sx, s) = p.spread(x);
    if axis >= x.len() {
        return Err(Error::arg(format!("axis {} out of range", axis + 1)));
    }
    Ok(if s == 0.0 { p.mu[axis] } else { p.mu[axis] + sx[axis] * c / s })
}

/// `∂²ES/∂x_i² = c (Σ_ii s² − (Σx)_i²) / s³`; `axis` is zero-based.
pub fn gaussian_es_hessian_diag(p: &GaussianPortfolio, x: &[f64], alpha: f64, axis: usize) -> Result<f64> {
    p.check(x)?;
    let (_, c) = tail_factor(alpha)?;
    let (sx, s) = p.spread(x);
    if axis >= x.len() {
        return Err(Error::arg(format!("axis {} out of range", axis + 1)));
    }
    Ok(if s == 0.0 {
        0.0
    } else {
        c * (p.sigma[axis][axis] * s * s - sx[axis] * sx[axis]) / (s * s * s)
    })
}

impl GaussianPortfolio {
    /// `∂q/∂x_i = μ_i + (Σx)_i z_α / s`, the target of the VaR-derivative estimator.
    pub fn var_gradient(&self, x: &[f64], alpha: f64, axis: usize) -> Result<f64> {
        self.check(x)?;
        let (z, _) = tail_factor(alpha)?;
        let (sx, s) = self.spread(x);
        if axis >= x.len() {
            return Err(Error::arg(format!("axis {} out of range", axis + 1)));
        }
        Ok(if s == 0.0 { self.mu[axis] } else { self.mu[axis] + sx[axis] * z / s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(d: usize) -> GaussianPortfolio {
        let sigma = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        GaussianPortfolio::new(vec![0.0; d], sigma).unwrap()
    }

    #[test]
    fn unit_and_scaled_values() {
        let t = gaussian_var_es(&identity(1), &[1.0], 0.95).unwrap();
        assert!((t.q - 1.6448536269514722).abs() < 1e-10);
        assert!((t.es - 2.0627128075074257).abs() < 1e-10);
        let t = gaussian_var_es(&identity(2), &[3.0, 4.0], 0.95).unwrap();
        assert!((t.q - 8.224268134757361).abs() < 1e-9);
        assert!((t.es - 10.313564037537137).abs() < 1e-9);
    }

    #[test]
    fn es_per_sigma_at_other_levels() {
        for (alpha, want) in [(0.9, 1.754983319324869), (0.99, 2.665214220345806)] {
            assert!((gaussian_var_es(&identity(1), &[1.0], alpha).unwrap().es - want).abs() < 1e-10);
        }
    }

    #[test]
    fn derivatives() {
        let p = identity(2);
        assert!((gaussian_es_gradient(&p, &[3.0, 4.0], 0.95, 0).unwrap() - 1.2376276845044565).abs() < 1e-10);
        assert!((gaussian_es_hessian_diag(&p, &[3.0, 4.0], 0.95, 0).unwrap() - 0.26402723936095074).abs() < 1e-10);
        assert!((p.var_gradient(&[3.0, 4.0], 0.95, 0).unwrap() - 0.9869121761708832).abs() < 1e-10);
    }

    #[test]
    fn degenerate_covariance() {
        let p = GaussianPortfolio::new(vec![1.5, -2.0], vec![vec![0.0; 2]; 2]).unwrap();
        let t = gaussian_var_es(&p, &[2.0, 1.0], 0.9).unwrap();
        assert_eq!((t.q, t.es, t.zero_variance), (1.0, 1.0, true));
        assert_eq!(gaussian_es_gradient(&p, &[2.0, 1.0], 0.9, 1).unwrap(), -2.0);
        assert_eq!(gaussian_es_hessian_diag(&p, &[2.0, 1.0], 0.9, 0).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let p = GaussianPortfolio::new(vec![0.1, -0.2], vec![vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let x = [1.0, 2.0];
        let h = 1e-5;
        let es = |x0: f64| gaussian_var_es(&p, &[x0, x[1]], 0.95).unwrap().es;
        let fd = (es(x[0] + h) - es(x[0] - h)) / (2.0 * h);
        assert!((fd - gaussian_es_gradient(&p, &x, 0.95, 0).unwrap()).abs() < 1e-8);
        let fd2 = (es(x[0] + 1e-3) - 2.0 * es(x[0]) + es(x[0] - 1e-3)) / 1e-6;
        assert!((fd2 - gaussian_es_hessian_diag(&p, &x, 0.95, 0).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn asymmetric_sigma_rejected() {
        assert!(GaussianPortfolio::new(vec![0.0; 2], vec![vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
    }
}
