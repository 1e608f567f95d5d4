//! Flow-matching laboratory built around slowed-interpolation mixture training.

pub mod batch;
pub mod cli;
pub mod error;
pub mod eval;
pub mod net;
pub mod rng;
pub mod sampling;
pub mod schedules;
pub mod slowflow;
pub mod training;

pub use batch::Batch;
pub use error::{Error, Result};
pub use schedules::{Coefficients, Schedule};
