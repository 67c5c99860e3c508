//! Planar bicycle model with Magic Formula tire friction and quasi-static
//! load transfer.
//!
//! The state is the inertial pose and velocity `[x, y, psi, xdot, ydot,
//! psidot]`; the input is the front steering angle and the common wheel
//! rotational speed (all wheels spin at the same rate). Front tire forces
//! live in the front-wheel frame, rear tire forces in the body frame.

use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::math::wrap_angle;

/// Total slip below which the friction direction is undefined and the
/// coefficients are taken as zero.
pub const SLIP_EPS: f64 = 1e-9;
/// Speed below which the sideslip angle is defined as zero.
pub const STANDSTILL_SPEED: f64 = 1e-6;
/// Smallest admissible load-transfer denominator (m).
pub const LOAD_DENOM_EPS: f64 = 1e-6;
/// Largest admissible integrator step (s).
pub const MAX_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading, unwrapped.
    pub psi: f64,
    pub xdot: f64,
    pub ydot: f64,
    pub psidot: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64, xdot: f64, ydot: f64, psidot: f64) -> Self {
        Self {
            x,
            y,
            psi,
            xdot,
            ydot,
            psidot,
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.psi, self.xdot, self.ydot, self.psidot]
    }

    pub fn speed(&self) -> f64 {
        self.xdot.hypot(self.ydot)
    }

    /// Sideslip angle `atan2(ydot, xdot) - psi`, wrapped to (-pi, pi];
    /// zero at standstill.
    pub fn sideslip(&self) -> f64 {
        if self.speed() < STANDSTILL_SPEED {
            0.0
        } else {
            wrap_angle(self.ydot.atan2(self.xdot) - self.psi)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rigid motion of the plane: rotate by `angle` about the origin, then
    /// translate by `(tx, ty)`.
    pub fn transformed(&self, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            x: c * self.x - s * self.y + tx,
            y: s * self.x + c * self.y + ty,
            psi: self.psi + angle,
            xdot: c * self.xdot - s * self.ydot,
            ydot: s * self.xdot + c * self.ydot,
            psidot: self.psidot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Front steering angle (rad).
    pub delta: f64,
    /// Wheel rotational speed (rad/s).
    pub omega: f64,
}

impl ControlInput {
    pub fn new(delta: f64, omega: f64) -> Self {
        Self { delta, omega }
    }

    /// Clamp to the actuator limits of `params`.
    pub fn clamped(&self, params: &VehicleParams) -> Self {
        Self {
            delta: self.delta.clamp(-params.delta_max, params.delta_max),
            omega: self.omega.clamp(0.0, params.omega_max),
        }
    }
}

/// Rigid-body and actuator parameters. The defaults describe a 1/10-scale
/// RC car; they are artifact-chosen since no physical car is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Mass (kg).
    pub m: f64,
    /// Yaw inertia (kg m^2).
    pub iz: f64,
    /// CoM to front axle (m).
    pub lf: f64,
    /// CoM to rear axle (m).
    pub lr: f64,
    /// Front wheel radius (m).
    pub rf: f64,
    /// Rear wheel radius (m).
    pub rr: f64,
    /// CoM height (m).
    pub h: f64,
    /// Gravity (m/s^2).
    pub g: f64,
    /// Steering limit (rad).
    pub delta_max: f64,
    /// Wheel speed limit (rad/s).
    pub omega_max: f64,
    /// Floor on the wheel speed used in slip-ratio denominators (rad/s).
    pub omega_min_guard: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 2.5,
            iz: 0.045,
            lf: 0.12,
            lr: 0.14,
            rf: 0.05,
            rr: 0.05,
            h: 0.05,
            g: 9.81,
            delta_max: 0.5,
            omega_max: 400.0,
            omega_min_guard: 1.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("iz", self.iz),
            ("lf", self.lf),
            ("lr", self.lr),
            ("rf", self.rf),
            ("rr", self.rr),
            ("h", self.h),
            ("g", self.g),
            ("delta_max", self.delta_max),
            ("omega_max", self.omega_max),
            ("omega_min_guard", self.omega_min_guard),
        ];
        for (key, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(DriftError::config(
                    format!("vehicle.{key}"),
                    value,
                    "must be finite and > 0",
                ));
            }
        }
        Ok(())
    }

    /// Little-endian byte image of the parameters, used for hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        [
            self.m,
            self.iz,
            self.lf,
            self.lr,
            self.rf,
            self.rr,
            self.h,
            self.g,
            self.delta_max,
            self.omega_max,
            self.omega_min_guard,
        ]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
    }
}

/// Magic Formula coefficients `mu = D sin(C atan(B s))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TireParams {
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

impl TireParams {
    pub const fn new(b: f64, c: f64, d: f64) -> Self {
        Self { b, c, d }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b.is_finite() && self.b > 0.0) {
            return Err(DriftError::config("tire.B", self.b, "must be > 0"));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(DriftError::config("tire.C", self.c, "must be > 0"));
        }
        if !(self.d.is_finite() && self.d > 0.0 && self.d <= 2.0) {
            return Err(DriftError::config("tire.D", self.d, "must be in (0, 2]"));
        }
        Ok(())
    }

    /// Friction magnitude at total slip `s`.
    pub fn magnitude(&self, s: f64) -> f64 {
        self.d * (self.c * (self.b * s).atan()).sin()
    }
}

impl Default for TireParams {
    fn default() -> Self {
        Self::new(5.0, 2.0, 0.3)
    }
}

/// Friction law of one axle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TireModel {
    MagicFormula(TireParams),
    /// Slip-independent friction magnitude; direction still opposes slip.
    Constant(f64),
}

impl TireModel {
    fn magnitude(&self, s: f64) -> f64 {
        match self {
            TireModel::MagicFormula(t) => t.magnitude(s),
            TireModel::Constant(mu) => *mu,
        }
    }

    /// `(mu_x, mu_y)` for slip components `(sx, sy)`.
    pub fn coefficients(&self, sx: f64, sy: f64) -> (f64, f64) {
        let s = sx.hypot(sy);
        if s < SLIP_EPS {
            return (0.0, 0.0);
        }
        let mag = self.magnitude(s);
        (-sx / s * mag, -sy / s * mag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlipState {
    pub beta: f64,
    pub v: f64,
    pub sf: f64,
    pub sr: f64,
    pub sfx: f64,
    pub sfy: f64,
    pub srx: f64,
    pub sry: f64,
    /// Front contact velocity in the front-wheel frame.
    pub vfxw: f64,
    pub vfyw: f64,
    /// Rear contact velocity in the body frame.
    pub vrxb: f64,
    pub vryb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrictionCoefficients {
    pub mu_fx: f64,
    pub mu_fy: f64,
    pub mu_rx: f64,
    pub mu_ry: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TireForces {
    pub mu: FrictionCoefficients,
    pub ffz: f64,
    pub frz: f64,
    pub ffxw: f64,
    pub ffyw: f64,
    pub frxb: f64,
    pub fryb: f64,
}

/// Slip ratios and contact-point velocities.
///
/// The wheel speed in the slip denominators is floored at
/// `omega_min_guard`; the numerators use the commanded speed, so a vehicle
/// at rest with stopped wheels has zero slip.
pub fn compute_slip(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
) -> Result<SlipState> {
    if !state.is_finite() || !input.delta.is_finite() || !input.omega.is_finite() {
        return Err(DriftError::NonFiniteState(*state));
    }
    let v = state.speed();
    let beta = state.sideslip();
    let delta = input.delta;
    let (sd, cd) = delta.sin_cos();
    let (sbd, cbd) = (beta - delta).sin_cos();
    let (sb, cb) = beta.sin_cos();

    let vfxw = v * cbd + state.psidot * params.lf * sd;
    let vfyw = v * sbd + state.psidot * params.lf * cd;
    let vrxb = v * cb;
    let vryb = v * sb - state.psidot * params.lr;

    let omega = input.omega;
    let guard = omega.max(params.omega_min_guard);
    let front_roll = omega * params.rf;
    let rear_roll = omega * params.rr;
    let front_den = guard * params.rf;
    let rear_den = guard * params.rr;

    let sfx = (vfxw - front_roll) / front_den;
    let sfy = vfyw / front_den;
    let srx = (vrxb - rear_roll) / rear_den;
    let sry = vryb / rear_den;

    Ok(SlipState {
        beta,
        v,
        sf: sfx.hypot(sfy),
        sr: srx.hypot(sry),
        sfx,
        sfy,
        srx,
        sry,
        vfxw,
        vfyw,
        vrxb,
        vryb,
    })
}

/// Magic Formula friction coefficients for both axles.
pub fn magic_formula(slip: &SlipState, tire: &TireParams) -> FrictionCoefficients {
    let model = TireModel::MagicFormula(*tire);
    friction_coefficients(slip, &model, &model)
}

pub fn friction_coefficients(
    slip: &SlipState,
    front: &TireModel,
    rear: &TireModel,
) -> FrictionCoefficients {
    let (mu_fx, mu_fy) = front.coefficients(slip.sfx, slip.sfy);
    let (mu_rx, mu_ry) = rear.coefficients(slip.srx, slip.sry);
    FrictionCoefficients {
        mu_fx,
        mu_fy,
        mu_rx,
        mu_ry,
    }
}

/// Quasi-static axle loads `(ffz, frz)`.
pub fn normal_forces(
    mu: &FrictionCoefficients,
    input: &ControlInput,
    params: &VehicleParams,
) -> Result<(f64, f64)> {
    let (sd, cd) = input.delta.sin_cos();
    let front_long = mu.mu_fx * cd - mu.mu_fy * sd;
    let den = params.lf + params.lr + (front_long - mu.mu_rx) * params.h;
    if !(den >= LOAD_DENOM_EPS) {
        return Err(DriftError::DegenerateLoadTransfer(den));
    }
    let weight = params.m * params.g;
    let ffz = (params.lr - mu.mu_rx * params.h) / den * weight;
    let frz = (params.lf + front_long * params.h) / den * weight;
    Ok((ffz, frz))
}

/// Vehicle parameters together with the friction law of each axle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleModel {
    pub params: VehicleParams,
    pub front: TireModel,
    pub rear: TireModel,
}

impl VehicleModel {
    pub fn new(params: VehicleParams, tire: TireParams) -> Self {
        Self {
            params,
            front: TireModel::MagicFormula(tire),
            rear: TireModel::MagicFormula(tire),
        }
    }

    /// The constant-friction surrogate: both axles produce `mu` times their
    /// normal load, opposing slip.
    pub fn surrogate(params: VehicleParams, mu: f64) -> Self {
        Self {
            params,
            front: TireModel::Constant(mu),
            rear: TireModel::Constant(mu),
        }
    }

    pub fn with_tire(&self, tire: TireParams) -> Self {
        Self {
            params: self.params,
            front: TireModel::MagicFormula(tire),
            rear: TireModel::MagicFormula(tire),
        }
    }

    pub fn forces(&self, state: &VehicleState, input: &ControlInput) -> Result<TireForces> {
        let slip = compute_slip(state, input, &self.params)?;
        let mu = friction_coefficients(&slip, &self.front, &self.rear);
        let (ffz, frz) = normal_forces(&mu, input, &self.params)?;
        Ok(TireForces {
            mu,
            ffz,
            frz,
            ffxw: mu.mu_fx * ffz,
            ffyw: mu.mu_fy * ffz,
            frxb: mu.mu_rx * frz,
            fryb: mu.mu_ry * frz,
        })
    }

    /// Time derivative `[xdot, ydot, psidot, xddot, yddot, psiddot]`.
    pub fn derivatives(&self, state: &VehicleState, input: &ControlInput) -> Result<[f64; 6]> {
        let f = self.forces(state, input)?;
        let p = &self.params;
        let (sp, cp) = state.psi.sin_cos();
        let (spd, cpd) = (state.psi + input.delta).sin_cos();
        let (sd, cd) = input.delta.sin_cos();

        let xddot = (f.ffxw * cpd - f.ffyw * spd + f.frxb * cp - f.fryb * sp) / p.m;
        let yddot = (f.ffxw * spd + f.ffyw * cpd + f.frxb * sp + f.fryb * cp) / p.m;
        let psiddot = ((f.ffyw * cd + f.ffxw * sd) * p.lf - f.fryb * p.lr) / p.iz;

        Ok([
            state.xdot,
            state.ydot,
            state.psidot,
            xddot,
            yddot,
            psiddot,
        ])
    }

    /// One classical RK4 step with the input held constant.
    pub fn step(&self, state: &VehicleState, input: &ControlInput, dt: f64) -> Result<VehicleState> {
        if !(dt > 0.0 && dt <= MAX_STEP * (1.0 + 1e-9)) {
            return Err(DriftError::InvalidTimeStep(dt));
        }
        let x0 = state.to_array();
        let at = |k: &[f64; 6], h: f64| {
            let mut out = x0;
            for i in 0..6 {
                out[i] += h * k[i];
            }
            VehicleState::from_array(out)
        };
        let k1 = self.derivatives(state, input)?;
        let k2 = self.derivatives(&at(&k1, dt / 2.0), input)?;
        let k3 = self.derivatives(&at(&k2, dt / 2.0), input)?;
        let k4 = self.derivatives(&at(&k3, dt), input)?;
        let mut next = x0;
        for i in 0..6 {
            next[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let next = VehicleState::from_array(next);
        if !next.is_finite() {
            return Err(DriftError::IntegratorDivergence { state: *state, dt });
        }
        Ok(next)
    }

    /// Integrate over `duration` with substeps no larger than `max_dt`.
    pub fn rollout(
        &self,
        state: &VehicleState,
        input: &ControlInput,
        duration: f64,
        max_dt: f64,
    ) -> Result<VehicleState> {
        let n = (duration / max_dt - 1e-9).ceil().max(1.0) as usize;
        let dt = duration / n as f64;
        let mut s = *state;
        for _ in 0..n {
            s = self.step(&s, input, dt)?;
        }
        Ok(s)
    }
}

/// Path curvature `(xdot yddot - ydot xddot) / v^3` of the velocity field.
pub fn path_curvature(state: &VehicleState, deriv: &[f64; 6]) -> f64 {
    let v = state.speed();
    if v < STANDSTILL_SPEED {
        return 0.0;
    }
    (state.xdot * deriv[4] - state.ydot * deriv[3]) / (v * v * v)
}
