//! CV@R learning by stochastic gradient descent on the joint `(theta, t)` objective.
//!
//! `no_std` with `alloc`. IO, configuration and the command-line harness
//! live in the `cvar-sgd` crate.

#![no_std]

extern crate alloc;

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod math;
mod minimize;
pub mod objective;
pub mod optimizer;
pub mod types;

pub use error::{Error, Result};
pub use losses::{LossModel, RidgeLoss, SmoothedSurrogate};
pub use types::{
    AugmentedExample, ConfidenceLevel, Example, LossConstants, ParamState, StepSizes, Trace,
    TraceRecord,
};
