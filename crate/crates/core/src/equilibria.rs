//! Steady drift equilibria and the feedforward lookup table.
//!
//! A drift equilibrium is a steady circular motion with constant speed,
//! constant sideslip and constant yaw rate `psidot = v * kappa`. At a fixed
//! curvature the unknowns are `(v, delta, omega)` with the sideslip pinned
//! to the controller's reference, which closes the three body-frame
//! steady-state conditions `vdot = betadot = psiddot = 0`.

use std::f64::consts::{FRAC_PI_3, FRAC_PI_6};
use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{ControlInput, TireParams, VehicleModel, VehicleParams, VehicleState};
use crate::error::{DriftError, Result};

/// Steady drift operating point, counter-clockwise unless mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEquilibrium {
    pub v: f64,
    pub beta: f64,
    pub psidot: f64,
    pub delta_ff: f64,
    pub omega_ff: f64,
    pub kappa: f64,
    pub mu: f64,
    pub residual_norm: f64,
}

impl DriftEquilibrium {
    /// The inertial state realising this equilibrium at pose `(x, y, psi)`.
    pub fn state_at(&self, x: f64, y: f64, psi: f64) -> VehicleState {
        let course = psi + self.beta;
        VehicleState::new(
            x,
            y,
            psi,
            self.v * course.cos(),
            self.v * course.sin(),
            self.psidot,
        )
    }

    pub fn input(&self) -> ControlInput {
        ControlInput::new(self.delta_ff, self.omega_ff)
    }

    /// The clockwise counterpart (reflection about the body x axis).
    pub fn mirrored(&self) -> Self {
        Self {
            beta: -self.beta,
            psidot: -self.psidot,
            delta_ff: -self.delta_ff,
            ..*self
        }
    }
}

/// Unknowns of the equilibrium solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumGuess {
    pub v: f64,
    pub delta: f64,
    pub omega: f64,
}

impl EquilibriumGuess {
    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.v, self.delta, self.omega)
    }

    fn from_vector(z: &Vector3<f64>) -> Self {
        Self {
            v: z[0],
            delta: z[1],
            omega: z[2],
        }
    }

    /// Rescale a guess solved at `(mu0, kappa0)` to `(mu, kappa)` using the
    /// friction-limited speed `v ~ sqrt(mu / kappa)`.
    pub fn rescaled(&self, mu0: f64, kappa0: f64, mu: f64, kappa: f64) -> Self {
        let scale = ((mu / mu0) * (kappa0 / kappa)).sqrt();
        Self {
            v: self.v * scale,
            delta: self.delta,
            omega: self.omega * scale,
        }
    }
}

impl From<&DriftEquilibrium> for EquilibriumGuess {
    fn from(eq: &DriftEquilibrium) -> Self {
        Self {
            v: eq.v,
            delta: eq.delta_ff,
            omega: eq.omega_ff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Sideslip imposed on the equilibrium (rad).
    pub beta_ref: f64,
    /// Smallest |beta| accepted as a drift (not grip) equilibrium.
    pub beta_drift_min: f64,
    /// Residual norm at which Newton stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            beta_ref: -FRAC_PI_3,
            beta_drift_min: FRAC_PI_6,
            tolerance: 1e-11,
            max_iterations: 60,
        }
    }
}

/// Body-frame steady-state residual `(vdot, betadot, psiddot)`.
fn body_residual(
    model: &VehicleModel,
    kappa: f64,
    beta: f64,
    z: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let (v, delta, omega) = (z[0], z[1], z[2]);
    let state = VehicleState::new(0.0, 0.0, 0.0, v * beta.cos(), v * beta.sin(), v * kappa);
    let d = model.derivatives(&state, &ControlInput::new(delta, omega))?;
    let (xd, yd, xdd, ydd) = (state.xdot, state.ydot, d[3], d[4]);
    let vdot = (xd * xdd + yd * ydd) / v;
    let betadot = (xd * ydd - yd * xdd) / (v * v) - state.psidot;
    Ok(Vector3::new(vdot, betadot, d[5]))
}

/// Outcome of a Newton solve, with the iteration count.
#[derive(Debug, Clone, Copy)]
pub struct Solved {
    pub equilibrium: DriftEquilibrium,
    pub iterations: usize,
}

/// Solve for the drift equilibrium at curvature `kappa` by damped Newton
/// iteration on the body-frame residual, starting from `seed`.
pub fn solve_equilibrium(
    kappa: f64,
    model: &VehicleModel,
    mu: f64,
    seed: &EquilibriumGuess,
    settings: &SolverSettings,
) -> Result<Solved> {
    if !(kappa > 0.0) {
        return Err(DriftError::config("kappa", kappa, "must be > 0"));
    }
    let beta = settings.beta_ref;
    if beta.abs() <= settings.beta_drift_min {
        return Err(DriftError::BranchCapture { beta });
    }
    let params = &model.params;
    let mut z = seed.to_vector();
    let mut r = body_residual(model, kappa, beta, &z)?;
    let mut iterations = 0;
    while r.norm() > settings.tolerance {
        if iterations >= settings.max_iterations {
            return Err(DriftError::SolverDivergence {
                iterations,
                residual: r.norm(),
            });
        }
        iterations += 1;
        let mut jac = Matrix3::zeros();
        for j in 0..3 {
            let h = 1e-6 * z[j].abs().max(1e-2);
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let col = (body_residual(model, kappa, beta, &zp)? - body_residual(model, kappa, beta, &zm)?)
                / (2.0 * h);
            jac.set_column(j, &col);
        }
        let dz = jac.lu().solve(&(-r)).ok_or(DriftError::SolverDivergence {
            iterations,
            residual: r.norm(),
        })?;
        // Backtracking keeps the iterate physical and the residual decreasing.
        let mut alpha = 1.0;
        loop {
            let trial = z + dz * alpha;
            let admissible = trial[0] > 0.0 && trial[2] > 0.0 && trial[1].abs() < params.delta_max * 2.0;
            if admissible {
                if let Ok(rt) = body_residual(model, kappa, beta, &trial) {
                    if rt.norm() < r.norm() || alpha < 1e-3 {
                        z = trial;
                        r = rt;
                        break;
                    }
                }
            }
            alpha *= 0.5;
            if alpha < 1e-6 {
                return Err(DriftError::SolverDivergence {
                    iterations,
                    residual: r.norm(),
                });
            }
        }
    }
    let guess = EquilibriumGuess::from_vector(&z);
    if guess.delta.abs() > params.delta_max || guess.omega > params.omega_max {
        return Err(DriftError::SolverDivergence {
            iterations,
            residual: r.norm(),
        });
    }
    Ok(Solved {
        equilibrium: DriftEquilibrium {
            v: guess.v,
            beta,
            psidot: guess.v * kappa,
            delta_ff: guess.delta,
            omega_ff: guess.omega,
            kappa,
            mu,
            residual_norm: r.norm(),
        },
        iterations,
    })
}

/// Steady-state check through the inertial-frame equations at an arbitrary
/// pose: on a steady circle the velocity vector rotates at `psidot`, so the
/// acceleration must equal `psidot x velocity` and the yaw acceleration
/// must vanish.
pub fn inertial_residual(eq: &DriftEquilibrium, model: &VehicleModel) -> Result<f64> {
    let state = eq.state_at(4.0, -7.0, 2.2);
    let d = model.derivatives(&state, &eq.input())?;
    let ax = d[3] + state.psidot * state.ydot;
    let ay = d[4] - state.psidot * state.xdot;
    Ok((ax * ax + ay * ay + d[5] * d[5]).sqrt())
}

/// Which friction law the table is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TableTireMode {
    /// Constant friction `mu` on both axles; the row key is that `mu`.
    Surrogate,
    /// Magic Formula with peak `D` scaled so the row key is `D`.
    MagicFormula { b: f64, c: f64 },
}

impl TableTireMode {
    pub fn model(&self, params: VehicleParams, mu: f64) -> VehicleModel {
        match *self {
            TableTireMode::Surrogate => VehicleModel::surrogate(params, mu),
            TableTireMode::MagicFormula { b, c } => {
                VehicleModel::new(params, TireParams::new(b, c, mu))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumTable {
    pub mu_grid: Vec<f64>,
    pub kappa_grid: Vec<f64>,
    /// Row-major over `mu`, `None` where the solve failed.
    pub cells: Vec<Option<DriftEquilibrium>>,
    pub params_hash: [u8; 32],
    pub mode: TableTireMode,
    pub beta_ref: f64,
}

pub fn params_hash(params: &VehicleParams) -> [u8; 32] {
    Sha256::digest(params.to_le_bytes()).into()
}

fn check_grid(grid: &[f64], what: &'static str) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|g| !g.is_finite() || *g <= 0.0) {
        return Err(DriftError::InvalidGrid(what));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DriftError::InvalidGrid(what));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSeed {
    pub mu: f64,
    pub kappa: f64,
    #[serde(flatten)]
    pub guess: EquilibriumGuess,
}

impl Default for TableSeed {
    fn default() -> Self {
        Self {
            mu: 0.12,
            kappa: 0.1,
            guess: EquilibriumGuess {
                v: 3.4,
                delta: 0.0,
                omega: 135.0,
            },
        }
    }
}

/// Solve every cell of the grid, marking failures as infeasible. Rows run
/// in parallel; within a row each solve is warm-started from its converged
/// neighbour.
pub fn build_table_unchecked(
    mu_grid: &[f64],
    kappa_grid: &[f64],
    params: &VehicleParams,
    mode: TableTireMode,
    seed: &TableSeed,
    settings: &SolverSettings,
) -> Result<EquilibriumTable> {
    check_grid(mu_grid, "mu grid")?;
    check_grid(kappa_grid, "kappa grid")?;

    // Walk from the seed to the first column of each row, then fan the rows
    // out: each row continues in kappa from there.
    let k0 = kappa_grid[0];
    let anchor = solve_equilibrium(
        seed.kappa,
        &mode.model(*params, seed.mu),
        seed.mu,
        &seed.guess,
        settings,
    )
    .map(|s| EquilibriumGuess::from(&s.equilibrium))
    .unwrap_or(seed.guess);
    let row_seeds: Vec<EquilibriumGuess> = mu_grid
        .iter()
        .map(|&mu| {
            let mut g = anchor.rescaled(seed.mu, seed.kappa, mu, seed.kappa);
            let steps = 8;
            for i in 1..=steps {
                let k = seed.kappa + (k0 - seed.kappa) * i as f64 / steps as f64;
                let model = mode.model(*params, mu);
                if let Ok(s) = solve_equilibrium(k, &model, mu, &g.rescaled(mu, k - (k0 - seed.kappa) / steps as f64, mu, k), settings) {
                    g = EquilibriumGuess::from(&s.equilibrium);
                }
            }
            g
        })
        .collect();

    let rows: Vec<Vec<Option<DriftEquilibrium>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = mu_grid
            .iter()
            .zip(&row_seeds)
            .map(|(&mu, row_seed)| {
                scope.spawn(move || {
                    let model = mode.model(*params, mu);
                    let mut guess = *row_seed;
                    let mut prev_kappa = k0;
                    kappa_grid
                        .iter()
                        .map(|&kappa| {
                            let g = guess.rescaled(mu, prev_kappa, mu, kappa);
                            let solved = solve_equilibrium(kappa, &model, mu, &g, settings).ok();
                            let cell = solved.and_then(|s| {
                                let eq = s.equilibrium;
                                let ok = eq.beta.abs() > settings.beta_drift_min
                                    && inertial_residual(&eq, &model).is_ok_and(|r| r < 1e-8);
                                ok.then_some(eq)
                            });
                            if let Some(eq) = &cell {
                                guess = eq.into();
                                prev_kappa = kappa;
                            }
                            cell
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("table row panicked")).collect()
    });

    Ok(EquilibriumTable {
        mu_grid: mu_grid.to_vec(),
        kappa_grid: kappa_grid.to_vec(),
        cells: rows.into_iter().flatten().collect(),
        params_hash: params_hash(params),
        mode,
        beta_ref: settings.beta_ref,
    })
}

/// Like [`build_table_unchecked`], but fails when more than 20% of the
/// cells are infeasible.
pub fn build_table(
    mu_grid: &[f64],
    kappa_grid: &[f64],
    params: &VehicleParams,
    mode: TableTireMode,
    seed: &TableSeed,
    settings: &SolverSettings,
) -> Result<EquilibriumTable> {
    let table = build_table_unchecked(mu_grid, kappa_grid, params, mode, seed, settings)?;
    table.check_quality()?;
    Ok(table)
}

/// Feedforward read from the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedforward {
    pub delta_ff: f64,
    pub omega_ff: f64,
    pub v_ff: f64,
    /// The query was outside the grid and was clamped onto it.
    pub clamped: bool,
    /// An infeasible corner forced a fall back to the nearest feasible cell.
    pub degraded: bool,
}

const TABLE_MAGIC: &[u8; 8] = b"DRIFTEQT";
const TABLE_VERSION: u32 = 1;

impl EquilibriumTable {
    pub fn cell(&self, i_mu: usize, i_kappa: usize) -> Option<&DriftEquilibrium> {
        self.cells[i_mu * self.kappa_grid.len() + i_kappa].as_ref()
    }

    pub fn feasible_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn feasible_fraction(&self) -> f64 {
        self.feasible_count() as f64 / self.cells.len() as f64
    }

    pub fn max_residual(&self) -> f64 {
        self.cells
            .iter()
            .flatten()
            .map(|c| c.residual_norm)
            .fold(0.0, f64::max)
    }

    pub fn check_quality(&self) -> Result<()> {
        let total = self.cells.len();
        let infeasible = total - self.feasible_count();
        if infeasible * 5 > total {
            return Err(DriftError::TableQuality { infeasible, total });
        }
        Ok(())
    }

    pub fn kappa_range(&self) -> (f64, f64) {
        (self.kappa_grid[0], *self.kappa_grid.last().unwrap())
    }

    pub fn mu_range(&self) -> (f64, f64) {
        (self.mu_grid[0], *self.mu_grid.last().unwrap())
    }

    /// Bilinear interpolation over `(mu, kappa)`. Queries outside the grid
    /// are clamped; a cell with an infeasible corner is never interpolated
    /// across.
    pub fn lookup(&self, mu: f64, kappa: f64) -> Feedforward {
        let (im, tm, cm) = bracket(&self.mu_grid, mu);
        let (ik, tk, ck) = bracket(&self.kappa_grid, kappa);
        let corners = [
            (im, ik, (1.0 - tm) * (1.0 - tk)),
            (im + 1, ik, tm * (1.0 - tk)),
            (im, ik + 1, (1.0 - tm) * tk),
            (im + 1, ik + 1, tm * tk),
        ];
        let mut acc = [0.0; 3];
        let mut complete = true;
        for &(a, b, w) in &corners {
            if w == 0.0 {
                continue;
            }
            match self.cells.get(a * self.kappa_grid.len() + b).and_then(|c| c.as_ref()) {
                Some(c) if a < self.mu_grid.len() && b < self.kappa_grid.len() => {
                    acc[0] += w * c.delta_ff;
                    acc[1] += w * c.omega_ff;
                    acc[2] += w * c.v;
                }
                _ => complete = false,
            }
        }
        if complete {
            return Feedforward {
                delta_ff: acc[0],
                omega_ff: acc[1],
                v_ff: acc[2],
                clamped: cm || ck,
                degraded: false,
            };
        }
        let nearest = self.nearest_feasible(mu, kappa);
        Feedforward {
            delta_ff: nearest.map_or(0.0, |c| c.delta_ff),
            omega_ff: nearest.map_or(0.0, |c| c.omega_ff),
            v_ff: nearest.map_or(0.0, |c| c.v),
            clamped: cm || ck,
            degraded: true,
        }
    }

    fn nearest_feasible(&self, mu: f64, kappa: f64) -> Option<&DriftEquilibrium> {
        let (mu_span, k_span) = (
            (self.mu_range().1 - self.mu_range().0).max(1e-12),
            (self.kappa_range().1 - self.kappa_range().0).max(1e-12),
        );
        self.cells
            .iter()
            .flatten()
            .min_by(|a, b| {
                let da = ((a.mu - mu) / mu_span).powi(2) + ((a.kappa - kappa) / k_span).powi(2);
                let db = ((b.mu - mu) / mu_span).powi(2) + ((b.kappa - kappa) / k_span).powi(2);
                da.total_cmp(&db)
            })
    }

    /// Versioned little-endian binary encoding.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        w.write_all(&self.params_hash)?;
        let (mode, b, c) = match self.mode {
            TableTireMode::Surrogate => (0u8, 0.0, 0.0),
            TableTireMode::MagicFormula { b, c } => (1u8, b, c),
        };
        w.write_all(&[mode])?;
        for v in [b, c, self.beta_ref] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.mu_grid.len() as u32).to_le_bytes())?;
        w.write_all(&(self.kappa_grid.len() as u32).to_le_bytes())?;
        for v in self.mu_grid.iter().chain(&self.kappa_grid) {
            w.write_all(&v.to_le_bytes())?;
        }
        for cell in &self.cells {
            let (vals, flag) = match cell {
                Some(c) => (
                    [c.v, c.beta, c.psidot, c.delta_ff, c.omega_ff, c.residual_norm],
                    1u8,
                ),
                None => ([f64::NAN; 6], 0u8),
            };
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[flag])?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(DriftError::TableFormat("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != TABLE_VERSION {
            return Err(DriftError::TableFormat(format!("unsupported version {version}")));
        }
        let mut params_hash = [0u8; 32];
        r.read_exact(&mut params_hash)?;
        let mut mode = [0u8; 1];
        r.read_exact(&mut mode)?;
        let b = read_f64(&mut r)?;
        let c = read_f64(&mut r)?;
        let beta_ref = read_f64(&mut r)?;
        let mode = match mode[0] {
            0 => TableTireMode::Surrogate,
            1 => TableTireMode::MagicFormula { b, c },
            m => return Err(DriftError::TableFormat(format!("unknown tire mode {m}"))),
        };
        let n_mu = read_u32(&mut r)? as usize;
        let n_kappa = read_u32(&mut r)? as usize;
        if n_mu == 0 || n_kappa == 0 || n_mu.saturating_mul(n_kappa) > 1 << 24 {
            return Err(DriftError::TableFormat("bad grid size".into()));
        }
        let mu_grid = (0..n_mu).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let kappa_grid = (0..n_kappa).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::with_capacity(n_mu * n_kappa);
        for i in 0..n_mu * n_kappa {
            let mut vals = [0.0; 6];
            for v in &mut vals {
                *v = read_f64(&mut r)?;
            }
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            cells.push((flag[0] == 1).then(|| DriftEquilibrium {
                v: vals[0],
                beta: vals[1],
                psidot: vals[2],
                delta_ff: vals[3],
                omega_ff: vals[4],
                residual_norm: vals[5],
                mu: mu_grid[i / n_kappa],
                kappa: kappa_grid[i % n_kappa],
            }));
        }
        Ok(Self {
            mu_grid,
            kappa_grid,
            cells,
            params_hash,
            mode,
            beta_ref,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }

    /// Human-readable CSV export, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu,kappa,feasible,v,beta,psidot,delta_ff,omega_ff,residual_norm\n");
        for (i, cell) in self.cells.iter().enumerate() {
            let mu = self.mu_grid[i / self.kappa_grid.len()];
            let kappa = self.kappa_grid[i % self.kappa_grid.len()];
            match cell {
                Some(c) => out.push_str(&format!(
                    "{mu},{kappa},1,{},{},{},{},{},{:e}\n",
                    c.v, c.beta, c.psidot, c.delta_ff, c.omega_ff, c.residual_norm
                )),
                None => out.push_str(&format!("{mu},{kappa},0,,,,,,\n")),
            }
        }
        out
    }
}

/// Lower bracket index, fractional position and whether `x` was clamped.
fn bracket(grid: &[f64], x: f64) -> (usize, f64, bool) {
    let n = grid.len();
    if n == 1 {
        return (0, 0.0, x != grid[0]);
    }
    if x <= grid[0] {
        return (0, 0.0, x < grid[0]);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0, x > grid[n - 1]);
    }
    let i = grid.partition_point(|g| *g <= x) - 1;
    let i = i.min(n - 2);
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]), false)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
