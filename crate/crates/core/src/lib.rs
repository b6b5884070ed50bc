//! Style-conditioned behavioral cloning with pointwise mutual information
//! weighting.
//!
//! The pipeline has two training phases. First a Donsker–Varadhan statistics
//! network `T(s, a, z)` is fitted on expert samples and their style labels
//! ([`mine`]). Its centered output estimates `log p(z|s,a)/p(z)`, and the
//! exponential of that value weights the per-sample negative log-likelihood
//! when the style-conditioned policy is cloned ([`trainer`]).
//!
//! Supporting modules:
//!
//! - [`nn`]: dense networks with analytic gradients, Adam, checkpoints.
//! - [`env`]: the Circle 2D environment and its four stylized experts.
//! - [`dataset`]: demonstration storage, samplers, labeling functions.
//! - [`tabular`]: exact counting arithmetic on finite datasets.
//! - [`eval`]: rollouts, DTW / ED / KL metrics, style calibration.
//! - [`cli`]: the `stylebc` command-line pipeline.

pub mod cli;
pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod mine;
pub mod nn;
pub mod seed;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
