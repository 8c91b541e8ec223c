//! Laws of the underlying risk factors a loss model consumes.

use crate::error::{Error, Result};
use crate::rng::SampleStream;

/// One realization `ω` of the risk factors, tagged with its counter index.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveSample {
    pub index: u64,
    pub values: Vec<f64>,
}

impl PrimitiveSample {
    pub fn new(index: u64, values: Vec<f64>) -> Self {
        Self { index, values }
    }
}

/// Multivariate normal factors `Y = μ + C·Z` with `C` the (pivot-free,
/// semidefinite-tolerant) lower Cholesky factor of `Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFactors {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

impl GaussianFactors {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::arg("gaussian factors need dimension ≥ 1"));
        }
        if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
            return Err(Error::arg(format!("covariance must be {d}x{d}")));
        }
        if mean.iter().chain(covariance.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite mean or covariance entry".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[i][j] - covariance[j][i]).abs() > 1e-12 {
                    return Err(Error::Domain(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let chol = psd_cholesky(&covariance)?;
        Ok(Self {
            mean,
            covariance,
            chol,
        })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        let cov = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(vec![0.0; dim], cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn draw(&self, stream: &mut SampleStream) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| stream.normal()).collect();
        self.chol
            .iter()
            .zip(&self.mean)
            .map(|(row, mu)| mu + row.iter().zip(&z).map(|(c, z)| c * z).sum::<f64>())
            .collect()
    }
}

/// Lower-triangular `C` with `C·Cᵀ = Σ`; zero pivots are allowed for
/// semidefinite matrices as long as the rest of the column vanishes too.
fn psd_cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(1.0f64, f64::max);
    let tol = 1e-12 * scale;
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -tol {
            return Err(Error::Domain("covariance is not positive semidefinite".into()));
        }
        if d <= tol {
            for i in j + 1..n {
                let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if s.abs() > 1e-8 * scale {
                    return Err(Error::Domain("covariance is not positive semidefinite".into()));
                }
            }
            continue;
        }
        let pivot = d.sqrt();
        l[j][j] = pivot;
        for i in j + 1..n {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = s / pivot;
        }
    }
    Ok(l)
}

/// Finite table of outcomes with probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaw {
    pub outcomes: Vec<f64>,
    pub probabilities: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DiscreteLaw {
    pub fn new(outcomes: Vec<f64>, probabilities: Option<Vec<f64>>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::arg("discrete law needs at least one outcome"));
        }
        let probabilities =
            probabilities.unwrap_or_else(|| vec![1.0 / outcomes.len() as f64; outcomes.len()]);
        if probabilities.len() != outcomes.len() {
            return Err(Error::arg(format!(
                "{} outcomes but {} probabilities",
                outcomes.len(),
                probabilities.len()
            )));
        }
        if outcomes.iter().chain(&probabilities).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite outcome or probability".into()));
        }
        if probabilities.iter().any(|&p| p < 0.0) {
            return Err(Error::Domain("negative probability".into()));
        }
        let total: f64 = crate::numeric::compensated_sum(probabilities.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
        }
        let mut acc = crate::numeric::NeumaierSum::new();
        let cumulative = probabilities
            .iter()
            .map(|&p| {
                acc.add(p);
                acc.total() / total
            })
            .collect();
        Ok(Self {
            outcomes,
            probabilities,
            cumulative,
        })
    }

    /// Index of the outcome selected by a uniform draw `u ∈ [0, 1)`.
    pub fn select(&self, u: f64) -> usize {
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.outcomes.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorLaw {
    Gaussian(GaussianFactors),
    /// Single scalar factor drawn from a finite table.
    Discrete(DiscreteLaw),
    /// No randomness: one atom with an empty factor vector.
    Degenerate,
}

impl FactorLaw {
    pub fn dim(&self) -> usize {
        match self {
            FactorLaw::Gaussian(g) => g.dim(),
            FactorLaw::Discrete(_) => 1,
            FactorLaw::Degenerate => 0,
        }
    }

    pub fn draw(&self, stream: &mut SampleStream) -> Vec<f64> {
        match self {
            FactorLaw::Gaussian(g) => g.draw(stream),
            FactorLaw::Discrete(t) => vec![t.outcomes[t.select(stream.uniform())]],
            FactorLaw::Degenerate => Vec::new(),
        }
    }

    /// Every atom with its probability, for laws that have finitely many.
    pub fn atoms(&self) -> Option<Vec<(Vec<f64>, f64)>> {
        match self {
            FactorLaw::Gaussian(_) => None,
            FactorLaw::Discrete(t) => Some(
                t.outcomes
                    .iter()
                    .zip(&t.probabilities)
                    .map(|(&o, &p)| (vec![o], p))
                    .collect(),
            ),
            FactorLaw::Degenerate => Some(vec![(Vec::new(), 1.0)]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reproduces_covariance() {
        let cov = vec![vec![4.0, 2.0, 0.4], vec![2.0, 3.0, 0.5], vec![0.4, 0.5, 1.0]];
        let l = psd_cholesky(&cov).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - cov[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn semidefinite_and_indefinite() {
        let singular = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let l = psd_cholesky(&singular).unwrap();
        assert_eq!(l[1][1], 0.0);
        assert!(psd_cholesky(&[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(GaussianFactors::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        let zero = GaussianFactors::new(vec![1.0], vec![vec![0.0]]).unwrap();
        assert_eq!(zero.chol[0][0], 0.0);
    }

    #[test]
    fn discrete_validation_and_selection() {
        assert!(DiscreteLaw::new(vec![], None).is_err());
        assert!(DiscreteLaw::new(vec![1.0, 2.0], Some(vec![0.5, 0.6])).is_err());
        assert!(DiscreteLaw::new(vec![1.0, 2.0], Some(vec![1.5, -0.5])).is_err());
        let t = DiscreteLaw::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap();
        assert_eq!(t.select(0.0), 0);
        assert_eq!(t.select(0.19), 0);
        assert_eq!(t.select(0.21), 1);
        assert_eq!(t.select(0.999_999), 4);
    }
}
