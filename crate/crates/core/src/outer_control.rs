//! Circumnavigation law: curvature reference from the bearing to an
//! expected (possibly moving) center, and a kinematic harness that checks
//! the Lyapunov certificate under a perfect inner loop.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{DriftError, Result};
use crate::math::wrap_angle;

/// How the expected center moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CenterMotion {
    Fixed {
        x: f64,
        y: f64,
    },
    /// Counter-clockwise orbit at constant speed, starting at `phase`.
    Orbit {
        x: f64,
        y: f64,
        radius: f64,
        speed: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl CenterMotion {
    pub fn position(&self, t: f64) -> (f64, f64) {
        match *self {
            CenterMotion::Fixed { x, y } => (x, y),
            CenterMotion::Orbit {
                x,
                y,
                radius,
                speed,
                phase,
            } => {
                let a = phase + speed / radius * t;
                (x + radius * a.cos(), y + radius * a.sin())
            }
        }
    }

    /// Orbit period, if the center moves.
    pub fn period(&self) -> Option<f64> {
        match *self {
            CenterMotion::Fixed { .. } => None,
            CenterMotion::Orbit { radius, speed, .. } => Some(TAU * radius / speed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterTarget {
    pub center: CenterMotion,
    /// Expected drifting radius (m).
    pub r_exp: f64,
    /// Curvature adjustment rate.
    pub gamma: f64,
}

impl CenterTarget {
    pub fn fixed(x: f64, y: f64, r_exp: f64, gamma: f64) -> Self {
        Self {
            center: CenterMotion::Fixed { x, y },
            r_exp,
            gamma,
        }
    }

    pub fn kappa0(&self) -> f64 {
        1.0 / self.r_exp
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_exp > 0.0) {
            return Err(DriftError::config("target.r_exp", self.r_exp, "must be > 0"));
        }
        if !(self.gamma > 0.0) {
            return Err(DriftError::config("target.gamma", self.gamma, "must be > 0"));
        }
        if let CenterMotion::Orbit { radius, .. } = self.center {
            if !(radius > 0.0) {
                return Err(DriftError::config("target.center.radius", radius, "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarState {
    pub d: f64,
    pub phi: f64,
}

pub const DEFAULT_V_MIN: f64 = 0.1;

/// Angle between the velocity and the outward radial direction.
pub fn bearing_phi(state: &VehicleState, center: (f64, f64), v_min: f64) -> Result<f64> {
    if state.speed() <= v_min {
        return Err(DriftError::UndefinedBearing("speed at or below v_min"));
    }
    let (rx, ry) = (state.x - center.0, state.y - center.1);
    if rx == 0.0 && ry == 0.0 {
        return Err(DriftError::UndefinedBearing("vehicle at the center"));
    }
    Ok(wrap_angle(state.ydot.atan2(state.xdot) - ry.atan2(rx)))
}

/// Raw law `kappa0 (1 + gamma cos phi)`, before any range clamp.
pub fn kappa_reference(phi: f64, kappa0: f64, gamma: f64) -> f64 {
    kappa0 * (1.0 + gamma * phi.cos())
}

/// Lyapunov function of the polar kinematics.
pub fn lyapunov(p: PolarState, kappa0: f64) -> f64 {
    let r = 1.0 / kappa0;
    0.5 * (p.d - r).powi(2) + r * p.d * (1.0 - p.phi.sin())
}

/// Polar kinematics with the loop closed by the law.
pub fn polar_derivative(p: PolarState, v: f64, kappa0: f64, gamma: f64) -> (f64, f64) {
    let kappa = kappa_reference(p.phi, kappa0, gamma);
    (v * p.phi.cos(), v * (kappa - p.phi.sin() / p.d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KinematicSample {
    pub t: f64,
    pub d: f64,
    pub phi: f64,
    pub v_lyap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicReport {
    pub samples: Vec<KinematicSample>,
    /// Largest per-step increase of V.
    pub max_v_increase: f64,
    /// Largest gap between the discrete dV/dt and [`lyapunov_rate`].
    pub max_vdot_residual: f64,
    pub final_state: PolarState,
    pub converged: bool,
}

/// Closed-form `dV/dt = -v gamma d cos^2 phi` along the closed-loop
/// kinematics.
pub fn lyapunov_rate(p: PolarState, v: f64, gamma: f64) -> f64 {
    -v * gamma * p.d * p.phi.cos().powi(2)
}

/// Distance of `phi` from the equilibrium bearing, modulo 2 pi.
pub fn bearing_gap(phi: f64) -> f64 {
    wrap_angle(phi - FRAC_PI_2).abs()
}

/// Integrates the closed-loop polar kinematics with RK4 at step `dt`
/// (subdivided near the center) and records V at every step.
///
/// Convergence means both `|phi - pi/2|` (mod 2 pi) and `|d kappa0 - 1|`
/// are below `tol` at the horizon.
pub fn kinematic_validate(
    target: &CenterTarget,
    v: f64,
    initial: PolarState,
    horizon: f64,
    dt: f64,
    tol: f64,
) -> Result<KinematicReport> {
    if !(v > 0.0) {
        return Err(DriftError::config("v", v, "must be > 0"));
    }
    if !(dt > 0.0) {
        return Err(DriftError::config("dt", dt, "must be > 0"));
    }
    if !(initial.d > 0.0) {
        return Err(DriftError::SingularKinematics { t: 0.0 });
    }
    let (k0, gamma) = (target.kappa0(), target.gamma);
    // Augmented with the integral of the analytic rate so the check compares
    // V against a quantity integrated to the same order.
    let f = |z: [f64; 3]| {
        let p = PolarState { d: z[0], phi: z[1] };
        let (dd, dphi) = polar_derivative(p, v, k0, gamma);
        [dd, dphi, lyapunov_rate(p, v, gamma)]
    };
    let rk4 = |z: [f64; 3], h: f64| {
        let at = |s: [f64; 3], c: f64| [z[0] + c * s[0], z[1] + c * s[1], z[2] + c * s[2]];
        let k1 = f(z);
        let k2 = f(at(k1, h / 2.0));
        let k3 = f(at(k2, h / 2.0));
        let k4 = f(at(k3, h));
        let mut out = z;
        for i in 0..3 {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    };
    let steps = (horizon / dt).ceil() as usize;
    let mut p = initial;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut v_prev = lyapunov(p, k0);
    samples.push(KinematicSample {
        t: 0.0,
        d: p.d,
        phi: p.phi,
        v_lyap: v_prev,
    });
    let mut max_v_increase = f64::NEG_INFINITY;
    let mut max_vdot_residual: f64 = 0.0;
    for k in 1..=steps {
        let t = k as f64 * dt;
        // Substep near the center, where the bearing dynamics stiffen.
        let n_sub = ((dt * v / (0.05 * p.d)).ceil() as usize).clamp(1, 10_000);
        let h = dt / n_sub as f64;
        let mut z = [p.d, p.phi, 0.0];
        for _ in 0..n_sub {
            z = rk4(z, h);
            if !(z[0] > 0.0) || !z[0].is_finite() {
                return Err(DriftError::SingularKinematics { t });
            }
        }
        let next = PolarState { d: z[0], phi: z[1] };
        let v_next = lyapunov(next, k0);
        max_v_increase = max_v_increase.max(v_next - v_prev);
        max_vdot_residual = max_vdot_residual.max(((v_next - v_prev) - z[2]).abs() / dt);
        p = next;
        v_prev = v_next;
        samples.push(KinematicSample {
            t,
            d: p.d,
            phi: p.phi,
            v_lyap: v_next,
        });
    }
    let converged = bearing_gap(p.phi) < tol && (p.d * k0 - 1.0).abs() < tol;
    Ok(KinematicReport {
        samples,
        max_v_increase,
        max_vdot_residual,
        final_state: p,
        converged,
    })
}

/// Random initial conditions: `d` uniform in `[0.1, 3] / kappa0`, `phi`
/// uniform in `[-pi, pi)`.
pub fn sample_initial_conditions(kappa0: f64, n: usize, seed: u64) -> Vec<PolarState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| PolarState {
            d: rng.random_range(0.1..3.0) / kappa0,
            phi: rng.random_range(-PI..PI),
        })
        .collect()
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub initial: PolarState,
    pub report: Result<KinematicReport>,
}

impl SweepOutcome {
    /// Converged with V non-increasing (up to `tol`) and the discrete rate
    /// matching [`lyapunov_rate`] within `tol` at every step.
    pub fn certified(&self, tol: f64) -> bool {
        self.report
            .as_ref()
            .is_ok_and(|r| r.converged && r.max_v_increase <= tol && r.max_vdot_residual <= tol)
    }
}

/// Runs [`kinematic_validate`] from each initial condition.
pub fn kinematic_sweep(
    target: &CenterTarget,
    v: f64,
    initial: &[PolarState],
    horizon: f64,
    dt: f64,
    tol: f64,
) -> Vec<SweepOutcome> {
    initial
        .iter()
        .map(|&p| SweepOutcome {
            initial: p,
            report: kinematic_validate(target, v, p, horizon, dt, tol),
        })
        .collect()
}

/// Stateful wrapper that evaluates the law against the instantaneous
/// center and holds the last reference when the bearing is undefined.
#[derive(Debug, Clone)]
pub struct OuterLoop {
    pub target: CenterTarget,
    pub v_min: f64,
    /// Feasible curvature range, usually the table's kappa grid bounds.
    pub kappa_range: (f64, f64),
    last: f64,
    last_phi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterOutput {
    pub kappa_ref: f64,
    pub phi: Option<f64>,
    pub d: f64,
    pub held: bool,
}

impl OuterLoop {
    pub fn new(target: CenterTarget, kappa_range: (f64, f64)) -> Self {
        let k0 = target.kappa0().clamp(kappa_range.0, kappa_range.1);
        Self {
            target,
            v_min: DEFAULT_V_MIN,
            kappa_range,
            last: k0,
            last_phi: None,
        }
    }

    pub fn tick(&mut self, estimate: &VehicleState, t: f64) -> OuterOutput {
        let c = self.target.center.position(t);
        let d = (estimate.x - c.0).hypot(estimate.y - c.1);
        match bearing_phi(estimate, c, self.v_min) {
            Ok(phi) => {
                let raw = kappa_reference(phi, self.target.kappa0(), self.target.gamma);
                self.last = raw.clamp(self.kappa_range.0, self.kappa_range.1);
                self.last_phi = Some(phi);
                OuterOutput {
                    kappa_ref: self.last,
                    phi: Some(phi),
                    d,
                    held: false,
                }
            }
            Err(_) => OuterOutput {
                kappa_ref: self.last,
                phi: self.last_phi,
                d,
                held: true,
            },
        }
    }
}
