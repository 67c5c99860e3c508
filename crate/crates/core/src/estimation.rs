//! State, curvature and friction estimation.
//!
//! The state estimator is an extended Kalman filter on a constant-turn-rate
//! kinematic model. Measurements may arrive late; the filter keeps a short
//! buffer of processed measurements with their posteriors and replays from
//! the preceding checkpoint when an older one shows up.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, TireModel, VehicleModel, VehicleParams, VehicleState};
use crate::equilibria::{EquilibriumTable, Feedforward};
use crate::error::{DriftError, Result};
use crate::math::{golden_section, wrap_angle};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeasurementKind {
    /// Position and heading `[x, y, psi]`.
    Pose([f64; 3]),
    /// Gyro yaw rate, including the sensor's fixed bias.
    YawRate(f64),
    /// Inertial-frame acceleration `[ax, ay]`.
    Acceleration([f64; 2]),
}

impl MeasurementKind {
    fn rank(&self) -> u8 {
        match self {
            MeasurementKind::Pose(_) => 0,
            MeasurementKind::YawRate(_) => 1,
            MeasurementKind::Acceleration(_) => 2,
        }
    }

    fn dim(&self) -> usize {
        match self {
            MeasurementKind::Pose(_) => 3,
            MeasurementKind::YawRate(_) => 1,
            MeasurementKind::Acceleration(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub timestamp: f64,
    pub kind: MeasurementKind,
    /// Noise covariance, `dim x dim` for the kind.
    pub covariance: DMatrix<f64>,
}

impl Measurement {
    pub fn pose(timestamp: f64, x: f64, y: f64, psi: f64, std_pos: f64, std_heading: f64) -> Self {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
            std_pos * std_pos,
            std_pos * std_pos,
            std_heading * std_heading,
        ]));
        Self {
            timestamp,
            kind: MeasurementKind::Pose([x, y, psi]),
            covariance: cov,
        }
    }

    pub fn yaw_rate(timestamp: f64, rate: f64, std: f64) -> Self {
        Self {
            timestamp,
            kind: MeasurementKind::YawRate(rate),
            covariance: DMatrix::from_element(1, 1, std * std),
        }
    }

    pub fn acceleration(timestamp: f64, ax: f64, ay: f64, std: f64) -> Self {
        Self {
            timestamp,
            kind: MeasurementKind::Acceleration([ax, ay]),
            covariance: DMatrix::from_diagonal_element(2, 2, std * std),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kind.dim();
        let c = &self.covariance;
        if !self.timestamp.is_finite() || c.nrows() != n || c.ncols() != n {
            return Err(DriftError::InvalidCovariance);
        }
        if (c - c.transpose()).abs().max() > 1e-12 * (1.0 + c.abs().max()) {
            return Err(DriftError::InvalidCovariance);
        }
        if c.clone().cholesky().is_none() {
            return Err(DriftError::InvalidCovariance);
        }
        Ok(())
    }

    /// Total order used for replay: time, then kind, then values.
    fn key_cmp(&self, other: &Self) -> std::cmp::Ordering {
        let values = |m: &Self| -> [f64; 3] {
            match m.kind {
                MeasurementKind::Pose(v) => v,
                MeasurementKind::YawRate(r) => [r, 0.0, 0.0],
                MeasurementKind::Acceleration([a, b]) => [a, b, 0.0],
            }
        };
        self.timestamp
            .total_cmp(&other.timestamp)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then_with(|| {
                let (a, b) = (values(self), values(other));
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub mean: VehicleState,
    pub covariance: Matrix6<f64>,
    pub timestamp: f64,
}

impl StateEstimate {
    pub fn new(mean: VehicleState, covariance: Matrix6<f64>, timestamp: f64) -> Self {
        Self {
            mean,
            covariance,
            timestamp,
        }
    }

    pub fn sideslip(&self) -> f64 {
        self.mean.sideslip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfConfig {
    /// White-noise acceleration density on each planar axis (m/s^2).
    pub accel_std: f64,
    /// White-noise yaw acceleration density (rad/s^2).
    pub yaw_accel_std: f64,
    /// How far back late measurements are accepted (s).
    pub replay_horizon: f64,
    /// Gyro bias subtracted from yaw-rate measurements (rad/s).
    pub gyro_bias: f64,
    /// Initial standard deviations for position, heading, velocity, yaw rate.
    pub initial_std: [f64; 4],
}

impl Default for KfConfig {
    fn default() -> Self {
        Self {
            accel_std: 0.1,
            yaw_accel_std: 4.0,
            replay_horizon: 0.2,
            gyro_bias: 0.005,
            initial_std: [0.01, 0.02, 0.05, 0.05],
        }
    }
}

impl KfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.accel_std > 0.0) {
            return Err(DriftError::config("estimation.kf.accel_std", self.accel_std, "must be > 0"));
        }
        if !(self.yaw_accel_std > 0.0) {
            return Err(DriftError::config("estimation.kf.yaw_accel_std", self.yaw_accel_std, "must be > 0"));
        }
        if !(self.replay_horizon >= 0.0) {
            return Err(DriftError::config("estimation.kf.replay_horizon", self.replay_horizon, "must be >= 0"));
        }
        if self.initial_std.iter().any(|s| !(*s > 0.0)) {
            return Err(DriftError::config("estimation.kf.initial_std", format!("{:?}", self.initial_std), "entries must be > 0"));
        }
        Ok(())
    }

    pub fn initial_covariance(&self) -> Matrix6<f64> {
        let [p, h, v, r] = self.initial_std;
        Matrix6::from_diagonal(&Vector6::new(p * p, p * p, h * h, v * v, v * v, r * r))
    }
}

/// `sin(w t) / w` and `(1 - cos(w t)) / w`, smooth through `w = 0`.
fn turn_terms(w: f64, t: f64) -> (f64, f64) {
    let a = w * t;
    if a.abs() < 1e-4 {
        let a2 = a * a;
        (t * (1.0 - a2 / 6.0 + a2 * a2 / 120.0), t * a * (0.5 - a2 / 24.0))
    } else {
        (a.sin() / w, (1.0 - a.cos()) / w)
    }
}

/// Constant-turn-rate motion: speed and yaw rate held, velocity rotating at
/// the yaw rate.
pub fn ct_propagate(x: &Vector6<f64>, dt: f64) -> Vector6<f64> {
    let (vx, vy, w) = (x[3], x[4], x[5]);
    let (s, c1) = turn_terms(w, dt);
    let (sn, cs) = (w * dt).sin_cos();
    Vector6::new(
        x[0] + s * vx - c1 * vy,
        x[1] + c1 * vx + s * vy,
        x[2] + w * dt,
        cs * vx - sn * vy,
        sn * vx + cs * vy,
        w,
    )
}

fn ct_jacobian(x: &Vector6<f64>, dt: f64) -> Matrix6<f64> {
    let mut j = Matrix6::zeros();
    for k in 0..6 {
        let h = 1e-6 * (1.0 + x[k].abs());
        let mut a = *x;
        let mut b = *x;
        a[k] += h;
        b[k] -= h;
        j.set_column(k, &((ct_propagate(&a, dt) - ct_propagate(&b, dt)) / (2.0 * h)));
    }
    j
}

fn process_noise(cfg: &KfConfig, dt: f64) -> Matrix6<f64> {
    let qa = cfg.accel_std * cfg.accel_std;
    let qr = cfg.yaw_accel_std * cfg.yaw_accel_std;
    let (t3, t2) = (dt.powi(3) / 3.0, dt * dt / 2.0);
    let mut q = Matrix6::zeros();
    for (p, v, s) in [(0, 3, qa), (1, 4, qa)] {
        q[(p, p)] = t3 * s;
        q[(p, v)] = t2 * s;
        q[(v, p)] = t2 * s;
        q[(v, v)] = dt * s;
    }
    q[(2, 2)] = t3 * qr;
    q[(2, 5)] = t2 * qr;
    q[(5, 2)] = t2 * qr;
    q[(5, 5)] = dt * qr;
    q
}

/// Propagates an estimate forward to `to_time`.
pub fn kf_predict(est: &StateEstimate, to_time: f64, cfg: &KfConfig) -> Result<StateEstimate> {
    let dt = to_time - est.timestamp;
    if dt < 0.0 {
        return Err(DriftError::OutOfOrder {
            to_time,
            timestamp: est.timestamp,
        });
    }
    if dt == 0.0 {
        return Ok(est.clone());
    }
    let x = Vector6::from(est.mean.to_array());
    let f = ct_jacobian(&x, dt);
    let mean = ct_propagate(&x, dt);
    let p = f * est.covariance * f.transpose() + process_noise(cfg, dt);
    let state = VehicleState::from_array(mean.into());
    if !state.is_finite() {
        return Err(DriftError::NonFiniteState(state));
    }
    Ok(StateEstimate {
        mean: state,
        covariance: 0.5 * (p + p.transpose()),
        timestamp: to_time,
    })
}

/// Measurement update in Joseph form. The estimate must already be at the
/// measurement's timestamp.
pub fn kf_update(est: &StateEstimate, meas: &Measurement, cfg: &KfConfig) -> Result<StateEstimate> {
    meas.validate()?;
    let s = &est.mean;
    let (innovation, h) = match meas.kind {
        MeasurementKind::Pose([x, y, psi]) => {
            let mut h = DMatrix::zeros(3, 6);
            h[(0, 0)] = 1.0;
            h[(1, 1)] = 1.0;
            h[(2, 2)] = 1.0;
            let nu = DVector::from_vec(vec![x - s.x, y - s.y, wrap_angle(psi - s.psi)]);
            (nu, h)
        }
        MeasurementKind::YawRate(r) => {
            let mut h = DMatrix::zeros(1, 6);
            h[(0, 5)] = 1.0;
            (DVector::from_vec(vec![r - cfg.gyro_bias - s.psidot]), h)
        }
        MeasurementKind::Acceleration([ax, ay]) => {
            // a = psidot x v under the turn model
            let mut h = DMatrix::zeros(2, 6);
            h[(0, 4)] = -s.psidot;
            h[(0, 5)] = -s.ydot;
            h[(1, 3)] = s.psidot;
            h[(1, 5)] = s.xdot;
            let nu = DVector::from_vec(vec![ax + s.psidot * s.ydot, ay - s.psidot * s.xdot]);
            (nu, h)
        }
    };
    let p = DMatrix::from_column_slice(6, 6, est.covariance.as_slice());
    let sm = &h * &p * h.transpose() + &meas.covariance;
    let s_inv = sm
        .clone()
        .cholesky()
        .ok_or(DriftError::SingularInnovation)?
        .inverse();
    let k = &p * h.transpose() * s_inv;
    let dx = &k * innovation;
    let i_kh = DMatrix::identity(6, 6) - &k * &h;
    let p_new = &i_kh * &p * i_kh.transpose() + &k * &meas.covariance * k.transpose();
    let mut x = est.mean.to_array();
    for (xi, d) in x.iter_mut().zip(dx.iter()) {
        *xi += d;
    }
    let p6 = Matrix6::from_column_slice(p_new.as_slice());
    Ok(StateEstimate {
        mean: VehicleState::from_array(x),
        covariance: 0.5 * (p6 + p6.transpose()),
        timestamp: est.timestamp,
    })
}

/// Kalman filter that accepts measurements out of order within the replay
/// horizon.
#[derive(Debug, Clone)]
pub struct AsyncKalmanFilter {
    pub cfg: KfConfig,
    anchor: StateEstimate,
    processed: VecDeque<(Measurement, StateEstimate)>,
}

impl AsyncKalmanFilter {
    pub fn new(initial: StateEstimate, cfg: KfConfig) -> Self {
        Self {
            cfg,
            anchor: initial,
            processed: VecDeque::new(),
        }
    }

    /// Posterior after the latest processed measurement.
    pub fn latest(&self) -> &StateEstimate {
        self.processed.back().map_or(&self.anchor, |(_, e)| e)
    }

    /// Oldest time a late measurement may still carry.
    pub fn anchor_time(&self) -> f64 {
        self.anchor.timestamp
    }

    /// Prediction from the latest posterior to `t` (no state change).
    pub fn estimate_at(&self, t: f64) -> Result<StateEstimate> {
        kf_predict(self.latest(), t, &self.cfg)
    }

    fn apply(&self, prior: &StateEstimate, meas: &Measurement) -> Result<StateEstimate> {
        let predicted = kf_predict(prior, meas.timestamp, &self.cfg)?;
        kf_update(&predicted, meas, &self.cfg)
    }

    /// Processes one measurement, replaying later ones if it arrived late.
    pub fn process(&mut self, meas: Measurement) -> Result<()> {
        meas.validate()?;
        if meas.timestamp < self.anchor.timestamp {
            return Err(DriftError::MeasurementTooOld {
                timestamp: meas.timestamp,
                anchor: self.anchor.timestamp,
            });
        }
        let idx = self
            .processed
            .iter()
            .position(|(m, _)| m.key_cmp(&meas).is_gt())
            .unwrap_or(self.processed.len());
        let prior = if idx == 0 {
            self.anchor.clone()
        } else {
            self.processed[idx - 1].1.clone()
        };
        let post = self.apply(&prior, &meas)?;
        let tail: Vec<Measurement> = self.processed.drain(idx..).map(|(m, _)| m).collect();
        self.processed.push_back((meas, post));
        for m in tail {
            let prior = self.latest().clone();
            let post = self.apply(&prior, &m)?;
            self.processed.push_back((m, post));
        }
        self.trim();
        Ok(())
    }

    fn trim(&mut self) {
        let newest = self.latest().timestamp;
        while let Some((m, _)) = self.processed.front() {
            if m.timestamp >= newest - self.cfg.replay_horizon {
                break;
            }
            let (_, post) = self.processed.pop_front().expect("front exists");
            self.anchor = post;
        }
    }
}

/// One entry of the recent trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSample {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
}

/// Fixed-capacity ring buffer of recent samples, strictly increasing in time.
#[derive(Debug, Clone)]
pub struct TrajectoryWindow {
    capacity: usize,
    samples: VecDeque<WindowSample>,
}

impl TrajectoryWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 3 {
            return Err(DriftError::WindowTooShort {
                needed: 3,
                got: capacity,
            });
        }
        Ok(Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, t: f64, state: VehicleState, input: ControlInput) -> Result<()> {
        if let Some(last) = self.samples.back() {
            if !(t > last.t) {
                return Err(DriftError::NonMonotoneWindow);
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(WindowSample { t, state, input });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &WindowSample> + '_ {
        self.samples.iter()
    }

    pub fn from_samples(capacity: usize, samples: impl IntoIterator<Item = WindowSample>) -> Result<Self> {
        let mut w = Self::new(capacity)?;
        for s in samples {
            w.push(s.t, s.state, s.input)?;
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleFitConfig {
    /// Window length in samples.
    pub window: usize,
    /// Samples with smaller |yaw rate| contribute no kinematic radius.
    pub psidot_min: f64,
    /// Fits beyond this radius report zero curvature (m).
    pub r_max: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for CircleFitConfig {
    fn default() -> Self {
        Self {
            window: 50,
            psidot_min: 0.05,
            r_max: 1e3,
            max_iterations: 20,
            step_tolerance: 1e-8,
        }
    }
}

impl CircleFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 {
            return Err(DriftError::config("estimation.circle.window", self.window, "must be >= 3"));
        }
        if !(self.psidot_min > 0.0) {
            return Err(DriftError::config("estimation.circle.psidot_min", self.psidot_min, "must be > 0"));
        }
        if !(self.r_max > 0.0) {
            return Err(DriftError::config("estimation.circle.r_max", self.r_max, "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircleFitResult {
    pub x0: f64,
    pub y0: f64,
    pub r: f64,
    pub kappa: f64,
    /// RMS of all radius residuals (m).
    pub residual: f64,
    pub iterations: usize,
    /// Straight-line or beyond-`r_max` result.
    pub degenerate: bool,
}

impl CircleFitResult {
    fn straight(r_max: f64) -> Self {
        Self {
            x0: f64::NAN,
            y0: f64::NAN,
            r: r_max,
            kappa: 0.0,
            residual: 0.0,
            iterations: 0,
            degenerate: true,
        }
    }
}

/// Algebraic circle fit; `None` when the points are collinear.
pub fn kasa_fit(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let mut a = DMatrix::zeros(points.len(), 3);
    let mut b = DVector::zeros(points.len());
    for (i, &(x, y)) in points.iter().enumerate() {
        let (u, v) = (x - mx, y - my);
        a[(i, 0)] = u;
        a[(i, 1)] = v;
        a[(i, 2)] = 1.0;
        b[i] = -(u * u + v * v);
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if !(svd.singular_values.min() > 1e-10 * smax) {
        return None;
    }
    let sol = svd.solve(&b, 1e-14 * smax).ok()?;
    let (cu, cv) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cu * cu + cv * cv - sol[2];
    (r2 > 0.0).then(|| (cu + mx, cv + my, r2.sqrt()))
}

/// Fits a circle to the window by least squares over both the geometric
/// radii (distances to the center) and the kinematic radii `v / |psidot|`.
pub fn fit_circle(window: &TrajectoryWindow, cfg: &CircleFitConfig) -> Result<CircleFitResult> {
    if window.len() < 3 {
        return Err(DriftError::WindowTooShort {
            needed: 3,
            got: window.len(),
        });
    }
    let pts: Vec<(f64, f64)> = window.samples().map(|s| (s.state.x, s.state.y)).collect();
    let kin: Vec<f64> = window
        .samples()
        .filter(|s| s.state.psidot.abs() > cfg.psidot_min)
        .map(|s| s.state.speed() / s.state.psidot.abs())
        .collect();
    if kin.is_empty() {
        return Ok(CircleFitResult::straight(cfg.r_max));
    }
    let r_kin_mean = kin.iter().sum::<f64>() / kin.len() as f64;

    let start = match kasa_fit(&pts) {
        Some(c) if c.2 < 10.0 * cfg.r_max => c,
        _ => {
            // Offset the last point along its left normal (right when
            // turning clockwise).
            let last = window.samples().last().expect("non-empty").state;
            let v = last.speed().max(1e-9);
            let side = last.psidot.signum();
            let (nx, ny) = (-last.ydot / v * side, last.xdot / v * side);
            (last.x + nx * r_kin_mean, last.y + ny * r_kin_mean, r_kin_mean)
        }
    };

    let n_geo = pts.len();
    let cost = |p: &[f64; 3]| -> f64 {
        let g: f64 = pts
            .iter()
            .map(|&(x, y)| ((x - p[0]).hypot(y - p[1]) - p[2]).powi(2))
            .sum();
        g + kin.iter().map(|k| (k - p[2]).powi(2)).sum::<f64>()
    };

    let mut p = [start.0, start.1, start.2];
    let mut c = cost(&p);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        // Normal equations of the 3-parameter problem.
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = nalgebra::Vector3::<f64>::zeros();
        for &(x, y) in &pts {
            let (dx, dy) = (x - p[0], y - p[1]);
            let g = dx.hypot(dy).max(1e-12);
            let row = nalgebra::Vector3::new(-dx / g, -dy / g, -1.0);
            jtj += row * row.transpose();
            jtr += row * (g - p[2]);
        }
        for k in &kin {
            let row = nalgebra::Vector3::new(0.0, 0.0, -1.0);
            jtj += row * row.transpose();
            jtr += row * (k - p[2]);
        }
        let Some(step) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = [p[0] + scale * step[0], p[1] + scale * step[1], p[2] + scale * step[2]];
            let tc = cost(&trial);
            if tc <= c {
                p = trial;
                c = tc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let moved = scale * step.norm();
        if !accepted || moved < cfg.step_tolerance {
            converged = true;
            break;
        }
    }
    let m = (n_geo + kin.len()) as f64;
    let r = p[2];
    let result = CircleFitResult {
        x0: p[0],
        y0: p[1],
        r,
        kappa: if r <= cfg.r_max && r > 0.0 { 1.0 / r } else { 0.0 },
        residual: (c / m).sqrt(),
        iterations,
        degenerate: !(r <= cfg.r_max && r > 0.0),
    };
    if !converged || !result.r.is_finite() {
        return Err(DriftError::FitFailure(Box::new(result)));
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionConfig {
    /// Window length in samples.
    pub window: usize,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub tolerance: f64,
    /// Controller ticks between re-estimates.
    pub update_every: usize,
    /// Per-component weights of the prediction error, in state order
    /// `(x, y, psi, xdot, ydot, psidot)`.
    #[serde(default = "velocity_weights")]
    pub weights: [f64; 6],
}

/// Velocity components only. Over one tick the position and heading
/// errors carry almost no friction information, and the estimated yaw rate
/// is noisy enough to bias the fit.
pub fn velocity_weights() -> [f64; 6] {
    [0.0, 0.0, 0.0, 1.0, 1.0, 0.0]
}

impl Default for FrictionConfig {
    fn default() -> Self {
        Self {
            window: 50,
            mu_lo: 0.02,
            mu_hi: 1.5,
            tolerance: 1e-4,
            update_every: 10,
            weights: velocity_weights(),
        }
    }
}

impl FrictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(DriftError::config("estimation.friction.window", self.window, "must be >= 2"));
        }
        if !(self.mu_lo > 0.0 && self.mu_lo < self.mu_hi) {
            return Err(DriftError::config("estimation.friction.mu_lo", self.mu_lo, "need 0 < mu_lo < mu_hi"));
        }
        if !(self.tolerance > 0.0) {
            return Err(DriftError::config("estimation.friction.tolerance", self.tolerance, "must be > 0"));
        }
        if self.update_every == 0 {
            return Err(DriftError::config("estimation.friction.update_every", 0, "must be >= 1"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().all(|w| *w == 0.0) {
            return Err(DriftError::config(
                "estimation.friction.weights",
                format!("{:?}", self.weights),
                "need non-negative weights, not all zero",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrictionEstimate {
    pub mu: f64,
    pub loss: f64,
}

/// Weighted sum of squared one-step prediction errors of the
/// constant-friction model.
pub fn friction_loss(window: &TrajectoryWindow, params: &VehicleParams, mu: f64, weights: &[f64; 6]) -> f64 {
    let model = VehicleModel {
        params: *params,
        front: TireModel::Constant(mu),
        rear: TireModel::Constant(mu),
    };
    let s: Vec<&WindowSample> = window.samples().collect();
    s.windows(2)
        .map(|w| {
            let dt = w[1].t - w[0].t;
            match model.step(&w[0].state, &w[0].input, dt) {
                Ok(pred) => {
                    let (a, b) = (pred.to_array(), w[1].state.to_array());
                    let mut e = 0.0;
                    for k in 0..6 {
                        let d = if k == 2 { wrap_angle(a[k] - b[k]) } else { a[k] - b[k] };
                        e += weights[k] * d * d;
                    }
                    e
                }
                Err(_) => f64::INFINITY,
            }
        })
        .sum()
}

/// Best constant friction coefficient for the window.
pub fn estimate_friction(
    window: &TrajectoryWindow,
    params: &VehicleParams,
    cfg: &FrictionConfig,
) -> Result<FrictionEstimate> {
    if window.len() < 2 {
        return Err(DriftError::WindowTooShort {
            needed: 2,
            got: window.len(),
        });
    }
    let moving = window
        .samples()
        .any(|s| s.state.speed() > 1e-3 || s.state.psidot.abs() > 1e-3);
    if !moving {
        return Err(DriftError::Unidentifiable);
    }
    let f = |mu: f64| friction_loss(window, params, mu, &cfg.weights);
    let (lo, hi) = (f(cfg.mu_lo), f(cfg.mu_hi));
    if !((lo - hi).abs() > 1e-12 * (1.0 + lo.abs().max(hi.abs()))) {
        return Err(DriftError::Unidentifiable);
    }
    let (mu, loss) = golden_section(f, cfg.mu_lo, cfg.mu_hi, cfg.tolerance);
    Ok(FrictionEstimate { mu, loss })
}

/// Feedforward inputs for an estimated friction and target curvature.
pub fn lookup_feedforward(mu: &FrictionEstimate, kappa_target: f64, table: &EquilibriumTable) -> Feedforward {
    table.lookup(mu.mu, kappa_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn circle_window(n: usize, cx: f64, cy: f64, r: f64, r_kin: f64, span: f64) -> TrajectoryWindow {
        let v = 2.0;
        let mut win = TrajectoryWindow::new(n).unwrap();
        for i in 0..n {
            let a = span * i as f64 / n as f64;
            let t = a * r / v;
            let s = VehicleState::new(
                cx + r * a.cos(),
                cy + r * a.sin(),
                a,
                -v * a.sin(),
                v * a.cos(),
                v / r_kin,
            );
            win.push(t, s, ControlInput::default()).unwrap();
        }
        win
    }

    #[test]
    fn recovers_noiseless_circle() {
        let win = circle_window(50, 1.0, 1.0, 2.0, 2.0, 0.5);
        let fit = fit_circle(&win, &CircleFitConfig::default()).unwrap();
        assert_abs_diff_eq!(fit.x0, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.y0, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.kappa, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn radius_is_mean_of_both_families() {
        let win = circle_window(50, 0.0, 0.0, 4.0, 2.0, std::f64::consts::TAU);
        let fit = fit_circle(&win, &CircleFitConfig::default()).unwrap();
        assert_abs_diff_eq!(fit.r, 3.0, epsilon = 1e-6);
    }

    #[test]
    fn straight_line_is_degenerate() {
        let mut win = TrajectoryWindow::new(10).unwrap();
        for i in 0..10 {
            let t = i as f64 * 0.01;
            let s = VehicleState::new(t, 0.0, 0.0, 1.0, 0.0, 0.0);
            win.push(t, s, ControlInput::default()).unwrap();
        }
        let fit = fit_circle(&win, &CircleFitConfig::default()).unwrap();
        assert_eq!(fit.kappa, 0.0);
        assert!(fit.degenerate);
    }

    #[test]
    fn window_rejects_non_monotone() {
        let mut win = TrajectoryWindow::new(5).unwrap();
        win.push(1.0, VehicleState::default(), ControlInput::default()).unwrap();
        assert!(win.push(1.0, VehicleState::default(), ControlInput::default()).is_err());
        assert!(TrajectoryWindow::new(2).is_err());
    }

    #[test]
    fn zero_horizon_prediction_is_identity() {
        let est = StateEstimate::new(
            VehicleState::new(1.0, 2.0, 0.3, 1.0, 0.5, 0.2),
            KfConfig::default().initial_covariance(),
            3.0,
        );
        let same = kf_predict(&est, 3.0, &KfConfig::default()).unwrap();
        assert_eq!(same, est);
        assert!(kf_predict(&est, 2.9, &KfConfig::default()).is_err());
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let cfg = KfConfig::default();
        let est = StateEstimate::new(VehicleState::new(1.0, 2.0, 0.3, 1.0, 0.5, 0.2), cfg.initial_covariance(), 0.0);
        let m = Measurement::pose(0.0, 1.0, 2.0, 0.3, 0.01, 0.01);
        let post = kf_update(&est, &m, &cfg).unwrap();
        assert_eq!(post.mean, est.mean);
        assert!(post.covariance.trace() < est.covariance.trace());
    }

    #[test]
    fn precise_pose_pins_position() {
        let cfg = KfConfig::default();
        let est = StateEstimate::new(VehicleState::default(), cfg.initial_covariance(), 0.0);
        let m = Measurement::pose(0.0, 0.5, -0.25, 0.1, 1e-6, 1e-6);
        let post = kf_update(&est, &m, &cfg).unwrap();
        assert_abs_diff_eq!(post.mean.x, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(post.mean.y, -0.25, epsilon = 1e-6);
    }

    #[test]
    fn ct_propagation_is_exact_for_uniform_turn() {
        let (r, v) = (5.0, 2.0);
        let w = v / r;
        let x0 = Vector6::new(r, 0.0, 0.0, 0.0, v, w);
        let x1 = ct_propagate(&x0, 1.0);
        assert_abs_diff_eq!(x1[0], r * w.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(x1[1], r * w.sin(), epsilon = 1e-12);
        let straight = ct_propagate(&Vector6::new(0.0, 0.0, 0.0, 1.0, 2.0, 0.0), 0.5);
        assert_abs_diff_eq!(straight[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(straight[1], 1.0, epsilon = 1e-15);
    }
}
