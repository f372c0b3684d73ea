//! Leak detection in water distribution networks from pairwise pressure
//! reconstruction errors.

pub mod cpd;
pub mod demand_net;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod linalg;
pub mod pipeline;
pub mod regression;
pub mod report;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
