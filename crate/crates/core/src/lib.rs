//! Focal-loss family and the dense-detection machinery around it.
//!
//! The crate is organised bottom-up:
//!
//! * [`loss`] - CE, alpha-balanced CE, focal loss, FL* and hinge, with analytic
//!   derivatives and logit-fused evaluation.
//! * [`geometry`] - boxes, IoU, box-regression encode/decode, smooth-L1, NMS.
//! * [`anchors`] - pyramid anchor generation and IoU-band target assignment.
//! * [`model`] - a tiny dense head with manual backprop and a momentum-SGD trainer.
//! * [`sampler`] - online hard example mining baselines.
//! * [`experiments`] - synthetic tasks, loss CDF analysis, sweeps and metrics.
//! * [`cli`] - the command-line front end used by the `densefocus` binary.

pub mod anchors;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod sampler;

pub use error::{Error, Result};
