//! Tools for studying label smoothing on small classifiers: training,
//! calibration, penultimate-layer projections, distillation sweeps and
//! a Monte-Carlo mutual-information estimator.

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod mi;
pub mod network;
pub mod numerics;
pub mod projection;

pub use error::{Error, Result};
