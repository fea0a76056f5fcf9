//! Metrics and the experiment grid.

pub mod experiment;
pub mod metrics;

pub use experiment::*;
pub use metrics::*;
