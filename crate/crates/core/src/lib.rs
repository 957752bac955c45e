//! Simulation of standard max-stable random fields on `[0,1]^k`, their
//! reconstruction from grid observations by generalized max-linear models,
//! and mean-squared-error analysis of the reconstruction.

pub mod accuracy;
pub mod cli;
pub mod copula;
pub mod dnorm;
pub mod fields;
pub mod geometry;
pub mod interp;
pub mod quadrature;
pub mod rng;
pub mod stats;
