//! Drift simulation and hierarchical drift control for a bicycle model.
//!
//! Layers, bottom-up:
//! - [`dynamics`]: bicycle model with Magic Formula tires and RK4 stepping.
//! - [`equilibria`]: steady drift solver and the `(mu, kappa)` feedforward table.
//! - [`estimation`]: asynchronous Kalman filter, curvature fit, friction fit.
//! - [`inner_control`]: sideslip/curvature PID loops with L1 reference shaping.
//! - [`outer_control`]: bearing-based circumnavigation law.
//! - [`scenarios`]: closed-loop benchmark runs and metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dynamics;
pub mod equilibria;
pub mod error;
pub mod estimation;
pub mod inner_control;
pub mod math;
pub mod outer_control;
pub mod scenarios;

pub use dynamics::{ControlInput, TireParams, VehicleModel, VehicleParams, VehicleState};
pub use error::{DriftError, Result};
