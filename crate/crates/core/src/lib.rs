//! Lee-Carter mortality fitting, stochastic bias-corrected projection of
//! mortality surfaces, annuity liability simulation, and nested Monte Carlo
//! decomposition of liability variance into mutualisable and systematic
//! parts.

pub mod annuity;
pub mod decomposition;
pub mod error;
pub mod leecarter;
pub mod mortality_data;
pub mod normal;
pub mod projection;
pub mod rng;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
