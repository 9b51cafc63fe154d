//! Projected two time-scale TDC for off-policy evaluation with linear
//! function approximation, with Garnet instances, exact operators, the
//! finite-time bound constants, and a multi-run experiment harness.

pub mod bounds;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod operators;
pub mod rng;
pub mod tdc;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use mdp::{GarnetParams, Instance};
pub use operators::ProblemData;
pub use tdc::{RecordGrid, StepSchedule};
