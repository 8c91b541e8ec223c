//! Ground truth that does not go through the estimators under test:
//! Gaussian closed forms, exact rational enumeration of discrete tables, and
//! central finite differences of Monte Carlo ES under common random numbers.

mod enumerate;
mod fd;
mod gaussian;
pub mod normal;

pub use enumerate::{enumerate_discrete, DiscreteEnumeration, ExactLevelSet, MAX_ATOMS};
pub use fd::{fd_of_mc_es, FdEstimate, FD_BLOCKS};
pub use gaussian::{gaussian_es_gradient, gaussian_es_hessian_diag, gaussian_var_es, GaussianPortfolio, GaussianTail};
