//! Collaborative-uncertainty modelling for multi-agent regression.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prob;
pub mod selfcheck;
pub mod synthgen;
pub mod trainer;

pub use error::{CuError, Result};
