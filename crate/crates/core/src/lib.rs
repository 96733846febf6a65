//! Diffusion attention expert model (DAEM) for multiple-instance learning on whole-slide-image
//! feature bags, together with the evaluation, microenvironment statistics and attribution
//! tooling around it.

pub mod attribution;
pub mod dataset;
mod error;
pub mod graphs;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tme;
pub mod trainer;

pub use error::{Error, Result};
