//! Targeted maximum likelihood estimation of conditional odds ratios in
//! test-negative designs where the exposure is measured on a two-phase
//! subsample, together with comparison estimators and a Monte Carlo harness.

pub mod comparators;
pub mod data;
pub mod design;
pub mod error;
pub mod simulation;
pub mod solvers;
pub mod tmle;

pub use error::{Error, Result};
