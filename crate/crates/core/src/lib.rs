//! Simulation and verification toolkit for systems of quantum particles
//! under continuous indirect measurement with graphon-structured mean-field
//! interaction.
//!
//! The crate simulates the finite-N diffusive and jump conditional-state
//! equations on the full register, solves the limiting graphon-Lindblad
//! system (directly and through its Picard fixed point), and ships
//! experiment drivers that test well-posedness, cut-norm stability, and
//! the empirical approach to the mean-field limit.

pub mod bloch;
pub mod config;
pub mod error;
pub mod graphon;
pub mod limit;
pub mod model;
pub mod nbody;
pub mod qmatrix;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
