//! Monte Carlo Value-at-Risk and Expected Shortfall sensitivities of any
//! order for nonlinear portfolio losses, together with numerical checks of
//! when a partial derivative passes through a conditional expectation on a
//! level set `{H(x) = 0}`.
//!
//! The crate is organised bottom-up:
//!
//! - [`loss_models`]: losses `L(x, ω)` with exact pathwise derivatives.
//! - [`sampling`]: counter-based, order-independent sample generation under
//!   common random numbers, plus CSV storage.
//! - [`divided_diff`]: the forward divided-difference operator and
//!   convergence tables.
//! - [`conditional`]: level-set conditional expectations (exact for atoms,
//!   shrinking bands for densities) and the verifiers built on them.
//! - [`risk_measures`]: empirical VaR, ES, and their weight derivatives.
//! - [`oracles`]: closed forms and brute-force references the estimators are
//!   tested against.
//! - [`cli`]: the `tailsens` command line.
//!
//! The `book/` directory next to the workspace walks through the ideas with
//! runnable snippets; every snippet is compiled and run as a doctest.
//!
//! ```
//! use tailsens::{loss_models::LossModel, risk_measures, sampling};
//!
//! let model = LossModel::standard_gaussian_linear(2)?;
//! let set = sampling::draw(&model, &[3.0, 4.0], 200_000, 7)?;
//! let tail = risk_measures::es(&set, 0.95)?;
//! assert!((tail.es - 10.3136).abs() < 0.1);
//! # Ok::<(), tailsens::Error>(())
//! ```

pub mod cli;
pub mod conditional;
pub mod divided_diff;
mod error;
pub mod loss_models;
pub mod numeric;
pub mod oracles;
pub mod risk_measures;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/loss-models.md")]
    mod loss_models {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/divided-differences.md")]
    mod divided_differences {}
    #[doc = include_str!("../../../book/src/level-sets.md")]
    mod level_sets {}
    #[doc = include_str!("../../../book/src/expected-shortfall.md")]
    mod expected_shortfall {}
    #[doc = include_str!("../../../book/src/homogeneity.md")]
    mod homogeneity {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}
