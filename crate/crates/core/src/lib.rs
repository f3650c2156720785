//! Quantile regression with ReLU networks trained on convolution-smoothed
//! check losses, and the simulation harness used to benchmark them against
//! networks trained on the raw check loss.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod landscape;
pub mod losses;
pub mod network;
pub mod numerics;
pub mod optimizer;
pub mod scenarios;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{KernelKind, LossSpec, Smoothing};
pub use network::{Architecture, GradientSet, MlpModel, ParamSet};
pub use numerics::{NoiseLaw, Rng};
pub use scenarios::{Dataset, Scenario};
