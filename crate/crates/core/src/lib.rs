//! Shrinkage and Bayesian estimators for the Markov-parameter matrix of
//! subspace identification.
//!
//! The pipeline is: simulate or ingest input/output data, arrange it in
//! Hankel blocks ([`sid::assemble`]), estimate `H_fp` by least squares,
//! then regularize the estimate by singular-value truncation, shrinkage
//! ([`shrinkage`]) or a Gibbs sampler ([`bayes`]). [`bench`] compares the
//! estimators on random systems.

pub mod bayes;
pub mod bench;
pub mod error;
pub mod io;
pub mod linalg;
pub mod lti;
pub mod pipeline;
pub mod shrinkage;
pub mod sid;

pub use error::{Error, Result};
