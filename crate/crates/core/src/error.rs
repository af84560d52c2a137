use thiserror::Error;

use crate::model::Compartment;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CoreError {
    #[error("invalid age axis: {0}")]
    InvalidAges(String),

    #[error("invalid model parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("time {t} is outside the horizon [{start}, {end}]")]
    Horizon { t: f64, start: f64, end: f64 },

    #[error("history does not cover t = {t} (available up to {available})")]
    MissingHistory { t: f64, available: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value at step {step} (age {age}, {compartment:?})")]
    NonFinite {
        step: usize,
        age: usize,
        compartment: Compartment,
    },

    #[error("negative state at step {step}: age {age}, {compartment:?} = {value}")]
    NegativeState {
        step: usize,
        age: usize,
        compartment: Compartment,
        value: f64,
    },

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("infeasible budget in week {week}: recovered doses alone need {needed} of {available}")]
    InfeasibleBudget {
        week: usize,
        needed: f64,
        available: f64,
    },

    #[error("negative simplex cap {0}")]
    NegativeCap(f64),

    #[error("contact matrix is identically zero")]
    ZeroContact,

    #[error("empty series: {0}")]
    EmptySeries(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no sufficient decrease after {backtracks} backtracks")]
    ArmijoFailed { backtracks: usize },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),
}
