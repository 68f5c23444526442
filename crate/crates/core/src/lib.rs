//! Local polynomial estimation of partial derivatives of the mean function
//! of synchronously sampled functional data, with path simulators, a Monte
//! Carlo harness and a covariance-based smoothness diagnostic.

pub mod basis;
pub mod covdiag;
pub mod design;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod processes;
mod quad;
pub mod weights;

pub use error::{Error, Result};
