//! Age-stratified SIRDVW epidemic model with two-dose vaccination, adjoint
//! gradients and projected-gradient optimization of weekly dose allocations.

pub mod adjoint;
pub mod analysis;
pub mod calibration;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod integrator;
pub mod model;
pub mod optimizer;
pub mod trajectory;

pub use control::DosingPolicy;
pub use error::{CoreError, Result};
pub use model::{AgeAxis, Compartment, EpiState, ModelParams, PiecewiseConstant};
pub use trajectory::{GridSpec, Trajectory};
