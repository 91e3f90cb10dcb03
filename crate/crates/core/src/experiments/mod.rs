//! Synthetic tasks, metrics and the analysis procedures built on them.

pub mod cdf;
pub mod detect;
pub mod metrics;
pub mod sweep;
pub mod synth;
