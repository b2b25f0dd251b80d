//! Bayesian multilevel bivariate areal regression.
//!
//! Outcomes observed at fine spatial units are linked to a latent field over
//! macro-areas, with intrinsic or proper multivariate CAR priors, Gaussian or
//! skew-normal errors, spatial-confounding corrections, a nested Laplace
//! approximation engine, an MCMC sampler for cross-checking, and
//! model-comparison criteria.

pub mod criteria;
pub mod deconfound;
pub mod error;
pub mod graph;
pub mod io;
pub mod inference;
pub mod likelihood;
pub mod multilevel;
pub mod quadrature;
pub mod simulate;
pub mod spatial_prior;

pub use error::{Error, Result};
