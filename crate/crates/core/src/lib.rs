//! Bayesian tail regression for daily precipitation.
//!
//! A Gamma model for wet-day intensity supplies a spatio-temporal threshold,
//! a Bernoulli model gives the exceedance probability, and a generalized
//! Pareto model in its quantile parametrization describes the excess. All
//! three share the same latent Gaussian structure and are fitted with a
//! nested Laplace approximation.

pub mod artifact;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod laplace;
pub mod latent;
pub mod numeric;
pub mod pipeline;
pub mod priors;
pub mod simulate;

pub use error::{Error, Result, StageTag};
