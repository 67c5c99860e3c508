//! Inner drift loop: a sideslip PID on steering, a curvature PID on wheel
//! speed, feedforward from the equilibrium table, and an L1 adaptive block
//! that reshapes the curvature reference.
//!
//! Both PIDs compute `output = feedforward + PID(reference - measurement)`.
//! Loop directions are carried by the gain signs: in the drift regime more
//! steering raises the yaw rate (pushing sideslip negative) and more wheel
//! speed raises the speed (loosening the circle), so both shipped gain sets
//! are negative.

use std::f64::consts::FRAC_PI_3;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, VehicleParams};
use crate::equilibria::{EquilibriumTable, Feedforward};
use crate::error::{DriftError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the integrator state (error x seconds).
    pub integral_limit: f64,
    /// Bounds on the PID contribution (feedforward excluded).
    pub output_min: f64,
    pub output_max: f64,
    /// Tick period (s).
    pub sample_period: f64,
    /// Cutoff of the first-order filter on the derivative term (rad/s).
    pub derivative_cutoff: f64,
}

impl PidConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if !(self.sample_period > 0.0) {
            return Err(DriftError::config(format!("{key}.sample_period"), self.sample_period, "must be > 0"));
        }
        if !(self.output_min <= self.output_max) {
            return Err(DriftError::config(format!("{key}.output_min"), self.output_min, "must be <= output_max"));
        }
        if !(self.integral_limit >= 0.0) {
            return Err(DriftError::config(format!("{key}.integral_limit"), self.integral_limit, "must be >= 0"));
        }
        if !(self.derivative_cutoff > 0.0) {
            return Err(DriftError::config(format!("{key}.derivative_cutoff"), self.derivative_cutoff, "must be > 0"));
        }
        Ok(())
    }
}

/// Discrete PID with a filtered derivative and conditional-integration
/// anti-windup.
#[derive(Debug, Clone)]
pub struct Pid {
    pub cfg: PidConfig,
    integral: f64,
    prev_error: Option<f64>,
    derivative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidOutput {
    pub value: f64,
    pub saturated: bool,
}

impl Pid {
    pub fn new(cfg: PidConfig) -> Self {
        Self {
            cfg,
            integral: 0.0,
            prev_error: None,
            derivative: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
        self.derivative = 0.0;
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    /// One tick: `clamp(feedforward + clamp(PID(error)), lo, hi)`.
    pub fn update(&mut self, error: f64, feedforward: f64, lo: f64, hi: f64) -> PidOutput {
        self.update_with_rate(error, None, feedforward, lo, hi)
    }

    /// As [`Pid::update`], but with the error rate supplied by the caller
    /// instead of differenced from successive errors.
    pub fn update_with_rate(
        &mut self,
        error: f64,
        error_rate: Option<f64>,
        feedforward: f64,
        lo: f64,
        hi: f64,
    ) -> PidOutput {
        let c = &self.cfg;
        let dt = c.sample_period;
        let raw_derivative = error_rate.unwrap_or_else(|| self.prev_error.map_or(0.0, |p| (error - p) / dt));
        self.prev_error = Some(error);
        // Bilinear-free exponential smoothing; alpha = 1 - exp(-wc dt).
        let alpha = 1.0 - (-c.derivative_cutoff * dt).exp();
        self.derivative += alpha * (raw_derivative - self.derivative);

        let candidate = (self.integral + error * dt).clamp(-c.integral_limit, c.integral_limit);
        let terms = |integral: f64| c.kp * error + c.ki * integral + c.kd * self.derivative;
        let unclamped = terms(candidate);
        let pid = unclamped.clamp(c.output_min, c.output_max);
        let total = feedforward + pid;
        let out = total.clamp(lo, hi);
        let saturated = pid != unclamped || out != total;
        // Integrate only when that does not push further into saturation.
        let pushes_out = (out >= hi || pid >= c.output_max) && c.ki * error > 0.0
            || (out <= lo || pid <= c.output_min) && c.ki * error < 0.0;
        if !(saturated && pushes_out) {
            self.integral = candidate;
        }
        PidOutput { value: out, saturated }
    }
}

/// L1 adaptive block on the curvature channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L1Config {
    /// Time constant of the first-order reference model M(s) (s).
    pub model_time_constant: f64,
    /// Cutoff of the low-pass filter C(s) (rad/s).
    pub filter_cutoff: f64,
    /// Adaptation gain.
    pub gain: f64,
    /// Projection bounds on the uncertainty estimate (1/m).
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Adaptation runs only while `|beta_ref - beta|` is below this band
    /// and the launch ramp is finished (rad).
    pub adaptation_band: f64,
    /// The gate must hold this long before adaptation starts (s).
    #[serde(default)]
    pub adaptation_dwell: f64,
    /// Pass the reference straight through C(s); test hook.
    #[serde(default)]
    pub bypass_filter: bool,
}

impl Default for L1Config {
    fn default() -> Self {
        Self {
            model_time_constant: 0.3,
            filter_cutoff: 8.0,
            gain: 0.1,
            sigma_min: -0.005,
            sigma_max: 0.005,
            adaptation_band: 0.15,
            adaptation_dwell: 0.0,
            bypass_filter: false,
        }
    }
}

impl L1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.model_time_constant > 0.0) {
            return Err(DriftError::config("inner.l1.model_time_constant", self.model_time_constant, "must be > 0"));
        }
        if !(self.filter_cutoff > 0.0) {
            return Err(DriftError::config("inner.l1.filter_cutoff", self.filter_cutoff, "must be > 0"));
        }
        if !(self.gain >= 0.0) {
            return Err(DriftError::config("inner.l1.gain", self.gain, "must be >= 0"));
        }
        if !(self.sigma_min <= 0.0 && self.sigma_max >= 0.0) {
            return Err(DriftError::config("inner.l1.sigma_min", self.sigma_min, "bounds must bracket 0"));
        }
        if !(self.adaptation_dwell >= 0.0) {
            return Err(DriftError::config("inner.l1.adaptation_dwell", self.adaptation_dwell, "must be >= 0"));
        }
        Ok(())
    }
}

/// First-order lag `a / (s + a)` discretized with the bilinear transform.
#[derive(Debug, Clone, Copy)]
pub struct FirstOrderLag {
    b: f64,
    a1: f64,
    prev_in: f64,
    prev_out: f64,
}

impl FirstOrderLag {
    pub fn new(pole: f64, dt: f64, initial: f64) -> Self {
        let k = pole * dt;
        Self {
            b: k / (2.0 + k),
            a1: (2.0 - k) / (2.0 + k),
            prev_in: initial,
            prev_out: initial,
        }
    }

    pub fn step(&mut self, input: f64) -> f64 {
        let out = self.b * (input + self.prev_in) + self.a1 * self.prev_out;
        self.prev_in = input;
        self.prev_out = out;
        out
    }

    pub fn output(&self) -> f64 {
        self.prev_out
    }

    /// Moves the filter to a steady state at `value`.
    pub fn reset_to(&mut self, value: f64) {
        self.prev_in = value;
        self.prev_out = value;
    }
}

#[derive(Debug, Clone)]
pub struct L1Adaptive {
    pub cfg: L1Config,
    dt: f64,
    predictor: FirstOrderLag,
    filter: FirstOrderLag,
    sigma: f64,
    initialized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Output {
    pub kappa_ac: f64,
    pub sigma: f64,
    pub predicted: f64,
    pub projected: bool,
}

impl L1Adaptive {
    pub fn new(cfg: L1Config, dt: f64) -> Self {
        Self {
            cfg,
            dt,
            predictor: FirstOrderLag::new(1.0 / cfg.model_time_constant, dt, 0.0),
            filter: FirstOrderLag::new(cfg.filter_cutoff, dt, 0.0),
            sigma: 0.0,
            initialized: false,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// One tick. The first call starts the filter at `kappa_ref`. With
    /// `adapt == false` the estimate is held and the predictor is pinned to
    /// the measurement, so no prediction error builds up outside drift.
    pub fn update(&mut self, kappa_meas: f64, kappa_ref: f64, adapt: bool) -> L1Output {
        if !self.initialized {
            self.filter.reset_to(kappa_ref);
            self.initialized = true;
        }
        if !adapt {
            self.predictor.reset_to(kappa_meas);
        }
        let error = self.predictor.output() - kappa_meas;
        let raw = self.sigma - self.cfg.gain * error * self.dt;
        let sigma = raw.clamp(self.cfg.sigma_min, self.cfg.sigma_max);
        let projected = sigma != raw;
        self.sigma = sigma;

        let command = kappa_ref - self.sigma;
        let kappa_ac = if self.cfg.bypass_filter {
            command
        } else {
            self.filter.step(command)
        };
        let predicted = self.predictor.step(kappa_ac + self.sigma);
        L1Output {
            kappa_ac,
            sigma: self.sigma,
            predicted,
            projected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    /// Sideslip reference for counter-clockwise drift (rad).
    pub beta_ref: f64,
    pub sideslip: PidConfig,
    pub curvature: PidConfig,
    pub l1: L1Config,
    /// Largest accepted estimate age (s).
    pub staleness_bound: f64,
    /// Mirror the loop for clockwise drifting.
    #[serde(default)]
    pub clockwise: bool,
    /// Steering authority ramps as `(v / v_ff)^launch_exponent` below the
    /// feedforward speed; 0 disables the ramp.
    #[serde(default)]
    pub launch_exponent: f64,
    /// Where the sideslip loop's derivative term gets the error rate.
    #[serde(default)]
    pub sideslip_rate: SideslipRate,
}

/// Source of the sideslip error rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideslipRate {
    /// Difference successive sideslip errors.
    #[default]
    Differentiate,
    /// `psidot - v * kappa_ac`: the yaw rate minus the course rate of the
    /// target circle, from the gyro-driven yaw-rate estimate.
    YawRate,
}

impl Default for InnerConfig {
    fn default() -> Self {
        let dt = 0.01;
        Self {
            beta_ref: -FRAC_PI_3,
            sideslip: PidConfig {
                kp: -12.55,
                ki: -0.45,
                kd: -11.33,
                integral_limit: 0.3,
                output_min: -0.5,
                output_max: 0.5,
                sample_period: dt,
                derivative_cutoff: 72.0,
            },
            curvature: PidConfig {
                kp: -2059.0,
                ki: -438.0,
                kd: 0.0,
                integral_limit: 0.05,
                output_min: -21.8,
                output_max: 21.8,
                sample_period: dt,
                derivative_cutoff: 30.0,
            },
            l1: L1Config::default(),
            staleness_bound: 0.1,
            clockwise: false,
            launch_exponent: 1.14,
            sideslip_rate: SideslipRate::YawRate,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.sideslip.validate("inner.sideslip")?;
        self.curvature.validate("inner.curvature")?;
        self.l1.validate()?;
        if !(self.staleness_bound > 0.0) {
            return Err(DriftError::config("inner.staleness_bound", self.staleness_bound, "must be > 0"));
        }
        Ok(())
    }
}

/// Estimator outputs consumed by one inner tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerEstimates {
    pub beta: f64,
    /// Speed over ground (m/s).
    pub speed: f64,
    /// Unsigned curvature (1/m).
    pub kappa: f64,
    pub mu: f64,
    /// Yaw rate (rad/s).
    pub yaw_rate: f64,
    /// Time the estimates refer to (s).
    pub timestamp: f64,
}

pub mod saturation {
    pub const STEERING: u32 = 1;
    pub const WHEEL_SPEED: u32 = 2;
    pub const L1_PROJECTION: u32 = 4;
    pub const FEEDFORWARD_CLAMPED: u32 = 8;
    pub const FEEDFORWARD_DEGRADED: u32 = 16;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOutput {
    pub input: ControlInput,
    pub kappa_ac: f64,
    pub sigma: f64,
    pub feedforward: Feedforward,
    pub beta_error: f64,
    pub kappa_error: f64,
    /// Bitmask of [`saturation`] flags.
    pub flags: u32,
}

/// Steering authority above which the launch counts as finished. The
/// drift speed usually settles a little below the table's `v_ff`, so full
/// authority is not a usable test.
const LAUNCHED_AUTHORITY: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct InnerController {
    pub cfg: InnerConfig,
    limits: VehicleParams,
    sideslip: Pid,
    curvature: Pid,
    l1: L1Adaptive,
    last_authority: f64,
    gate_open_for: f64,
}

impl InnerController {
    pub fn new(cfg: InnerConfig, limits: VehicleParams) -> Self {
        Self {
            cfg,
            limits,
            sideslip: Pid::new(cfg.sideslip),
            curvature: Pid::new(cfg.curvature),
            l1: L1Adaptive::new(cfg.l1, cfg.curvature.sample_period),
            last_authority: 0.0,
            gate_open_for: 0.0,
        }
    }

    /// Steering from the sideslip error.
    pub fn sideslip_loop(
        &mut self,
        beta: f64,
        beta_ref: f64,
        error_rate: Option<f64>,
        delta_ff: f64,
        authority: f64,
    ) -> PidOutput {
        let max = self.limits.delta_max * authority;
        self.sideslip.update_with_rate(beta_ref - beta, error_rate, delta_ff, -max, max)
    }

    /// Wheel speed from the curvature error.
    pub fn curvature_loop(&mut self, kappa: f64, kappa_ac: f64, omega_ff: f64) -> PidOutput {
        self.curvature
            .update(kappa_ac - kappa, omega_ff, 0.0, self.limits.omega_max)
    }

    pub fn l1_update(&mut self, kappa_meas: f64, kappa_ref: f64, adapt: bool) -> L1Output {
        self.l1.update(kappa_meas, kappa_ref, adapt)
    }

    fn steering_authority(&self, speed: f64, v_ff: f64) -> f64 {
        if self.cfg.launch_exponent > 0.0 && v_ff > 0.0 {
            (speed / v_ff).clamp(0.0, 1.0).powf(self.cfg.launch_exponent)
        } else {
            1.0
        }
    }

    /// Full inner tick: L1 reference shaping, table feedforward at the
    /// shaped reference, then both feedback loops.
    pub fn tick(
        &mut self,
        est: &InnerEstimates,
        kappa_ref: f64,
        now: f64,
        table: &EquilibriumTable,
    ) -> Result<InnerOutput> {
        let age = now - est.timestamp;
        if age > self.cfg.staleness_bound {
            return Err(DriftError::StaleEstimate {
                age,
                bound: self.cfg.staleness_bound,
            });
        }
        let mirror = if self.cfg.clockwise { -1.0 } else { 1.0 };
        let beta_ref = self.cfg.beta_ref;
        let beta_error = beta_ref - mirror * est.beta;
        let gate = self.last_authority >= LAUNCHED_AUTHORITY && beta_error.abs() < self.cfg.l1.adaptation_band;
        self.gate_open_for = if gate {
            self.gate_open_for + self.cfg.curvature.sample_period
        } else {
            0.0
        };
        let adapt = gate && self.gate_open_for >= self.cfg.l1.adaptation_dwell;
        let l1 = self.l1_update(est.kappa, kappa_ref, adapt);
        let ff = table.lookup(est.mu, l1.kappa_ac);
        let authority = self.steering_authority(est.speed, ff.v_ff);
        self.last_authority = authority;
        let error_rate = match self.cfg.sideslip_rate {
            SideslipRate::Differentiate => None,
            SideslipRate::YawRate => Some(mirror * est.yaw_rate - est.speed * l1.kappa_ac),
        };
        let steer = self.sideslip_loop(mirror * est.beta, beta_ref, error_rate, ff.delta_ff, authority);
        let wheel = self.curvature_loop(est.kappa, l1.kappa_ac, ff.omega_ff);

        let mut flags = 0;
        if steer.saturated {
            flags |= saturation::STEERING;
        }
        if wheel.saturated {
            flags |= saturation::WHEEL_SPEED;
        }
        if l1.projected {
            flags |= saturation::L1_PROJECTION;
        }
        if ff.clamped {
            flags |= saturation::FEEDFORWARD_CLAMPED;
        }
        if ff.degraded {
            flags |= saturation::FEEDFORWARD_DEGRADED;
        }
        Ok(InnerOutput {
            input: ControlInput::new(mirror * steer.value, wheel.value),
            kappa_ac: l1.kappa_ac,
            sigma: l1.sigma,
            feedforward: ff,
            beta_error,
            kappa_error: l1.kappa_ac - est.kappa,
            flags,
        })
    }
}
