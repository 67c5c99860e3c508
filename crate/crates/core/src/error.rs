use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::estimation::CircleFitResult;

pub type Result<T, E = DriftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("non-finite vehicle state: {0:?}")]
    NonFiniteState(VehicleState),

    #[error("integrator diverged at t+{dt}s from {state:?}")]
    IntegratorDivergence { state: VehicleState, dt: f64 },

    #[error("integrator step {0} s outside (0, 0.01]")]
    InvalidTimeStep(f64),

    #[error("degenerate load transfer: denominator {0} below threshold")]
    DegenerateLoadTransfer(f64),

    #[error("prediction target {to_time} s precedes estimate time {timestamp} s")]
    OutOfOrder { to_time: f64, timestamp: f64 },

    #[error("measurement at {timestamp} s is older than the replay buffer (anchor {anchor} s)")]
    MeasurementTooOld { timestamp: f64, anchor: f64 },

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("invalid measurement covariance")]
    InvalidCovariance,

    #[error("window too short: need at least {needed} samples, got {got}")]
    WindowTooShort { needed: usize, got: usize },

    #[error("window timestamps must be strictly increasing")]
    NonMonotoneWindow,

    #[error("circle fit did not converge")]
    FitFailure(Box<CircleFitResult>),

    #[error("friction is unidentifiable from this window (no excitation)")]
    Unidentifiable,

    #[error("equilibrium solver converged to the grip branch (beta = {beta})")]
    BranchCapture { beta: f64 },

    #[error("equilibrium solver diverged after {iterations} iterations (residual {residual:e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("equilibrium table has {infeasible} of {total} cells infeasible")]
    TableQuality { infeasible: usize, total: usize },

    #[error("grid must be non-empty and strictly ascending: {0}")]
    InvalidGrid(&'static str),

    #[error("bearing undefined: {0}")]
    UndefinedBearing(&'static str),

    #[error("distance to center reached zero at t = {t} s")]
    SingularKinematics { t: f64 },

    #[error("estimate is stale: age {age} s exceeds bound {bound} s")]
    StaleEstimate { age: f64, bound: f64 },

    #[error("invalid config: {key} = {value}: {reason}")]
    InvalidConfig {
        key: String,
        value: String,
        reason: String,
    },

    #[error("malformed table file: {0}")]
    TableFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DriftError {
    pub fn config(key: impl Into<String>, value: impl ToString, reason: impl Into<String>) -> Self {
        DriftError::InvalidConfig {
            key: key.into(),
            value: value.to_string(),
            reason: reason.into(),
        }
    }
}
