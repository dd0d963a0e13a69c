//! Equilibrium existence, small-signal stability and time-domain simulation
//! of DC microgrids feeding constant power loads.

pub mod error;
pub mod existence;
pub mod matrix;
pub mod network;
pub mod simplex;
pub mod report;
pub mod simulate;
pub mod stability;
pub mod sweep;

pub use error::{Error, Result};
