//! Closed-loop benchmark runs: simulator, sensors, estimators and both
//! control loops wired together, plus run metrics.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::dynamics::{ControlInput, TireParams, VehicleModel, VehicleParams, VehicleState};
use crate::equilibria::{build_table, params_hash, EquilibriumTable, SolverSettings, TableSeed, TableTireMode};
use crate::error::{DriftError, Result};
use crate::estimation::{
    estimate_friction, fit_circle, AsyncKalmanFilter, CircleFitConfig, FrictionConfig, KfConfig,
    Measurement, StateEstimate, TrajectoryWindow,
};
use crate::inner_control::{InnerConfig, InnerController, InnerEstimates};
use crate::outer_control::{bearing_phi, CenterMotion, CenterTarget, OuterLoop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FixedCircle,
    MovingCenter,
    VaryingInteraction,
    KinematicValidate,
}

impl std::str::FromStr for TaskKind {
    type Err = DriftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_circle" => Ok(TaskKind::FixedCircle),
            "moving_center" => Ok(TaskKind::MovingCenter),
            "varying_interaction" => Ok(TaskKind::VaryingInteraction),
            "kinematic_validate" => Ok(TaskKind::KinematicValidate),
            _ => Err(DriftError::config("scenario.task", s, "unknown task")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub task: TaskKind,
    /// Simulated time (s).
    pub duration: f64,
    pub seed: u64,
    /// Feed the estimators the true state instead of sensor data.
    pub oracle: bool,
    pub physics_dt: f64,
    pub control_dt: f64,
}

/// Starting pose; the vehicle starts at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TireSwitch {
    /// Time the tire takes effect (s).
    pub t: f64,
    #[serde(flatten)]
    pub tire: TireParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub pose_rate: f64,
    pub pose_std_pos: f64,
    pub pose_std_heading: f64,
    pub pose_latency: f64,
    pub gyro_rate: f64,
    pub gyro_std: f64,
    pub gyro_bias: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            pose_rate: 50.0,
            pose_std_pos: 0.005,
            pose_std_heading: 0.01,
            pose_latency: 0.02,
            gyro_rate: 200.0,
            gyro_std: 0.02,
            gyro_bias: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    pub kf: KfConfig,
    pub circle: CircleFitConfig,
    pub friction: FrictionConfig,
    /// Friction assumed before the first estimate.
    pub initial_mu: f64,
    /// Time constant of the smoothing applied to friction estimates (s).
    pub mu_smoothing: f64,
    /// Friction is only estimated while |beta| exceeds this (rad).
    pub mu_min_sideslip: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            kf: KfConfig::default(),
            circle: CircleFitConfig::default(),
            friction: FrictionConfig::default(),
            initial_mu: 0.12,
            mu_smoothing: 0.1,
            mu_min_sideslip: FRAC_PI_6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub mu_grid: Vec<f64>,
    pub kappa_grid: Vec<f64>,
    pub mode: TableTireMode,
    pub seed: TableSeed,
    pub solver: SolverSettings,
    /// Prebuilt table file; built in memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Build and save the table when `path` does not exist yet.
    #[serde(default)]
    pub auto_build: bool,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            mu_grid: (0..12).map(|i| round6(0.05 + 0.01 * i as f64)).collect(),
            kappa_grid: (0..17).map(|i| round6(0.04 + 0.01 * i as f64)).collect(),
            mode: TableTireMode::Surrogate,
            seed: TableSeed::default(),
            solver: SolverSettings::default(),
            path: None,
            auto_build: false,
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl TableConfig {
    /// Loads the table at `path`, building (and, with `auto_build`, saving)
    /// it when needed. A loaded table must match the vehicle parameters.
    pub fn build(&self, params: &VehicleParams) -> Result<EquilibriumTable> {
        if let Some(p) = &self.path {
            let path = std::path::Path::new(p);
            if path.exists() || !self.auto_build {
                let table = EquilibriumTable::load(path)?;
                if table.params_hash != params_hash(params) {
                    return Err(DriftError::config("table.path", p, "table was built for different vehicle parameters"));
                }
                return Ok(table);
            }
            let table = self.solve(params)?;
            table.save(path)?;
            return Ok(table);
        }
        self.solve(params)
    }

    pub fn solve(&self, params: &VehicleParams) -> Result<EquilibriumTable> {
        build_table(
            &self.mu_grid,
            &self.kappa_grid,
            params,
            self.mode,
            &self.seed,
            &self.solver,
        )
    }
}

/// Optional pass thresholds checked by the command line front end.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_relative_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settle_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_rms_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_settle_relative_error: Option<f64>,
}

/// Settings for the kinematic validation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicConfig {
    pub speed: f64,
    pub samples: usize,
    /// Horizon in units of `1 / (v kappa0)`.
    pub horizon_scale: f64,
    pub dt: f64,
    pub tolerance: f64,
}

impl Default for KinematicConfig {
    fn default() -> Self {
        Self {
            speed: 3.0,
            samples: 100,
            horizon_scale: 500.0,
            dt: 0.05,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: RunSettings,
    pub initial: InitialPose,
    pub vehicle: VehicleParams,
    pub tires: Vec<TireSwitch>,
    pub target: CenterTarget,
    pub sensors: SensorConfig,
    pub estimation: EstimationConfig,
    pub inner: InnerConfig,
    pub table: TableConfig,
    #[serde(default)]
    pub kinematic: KinematicConfig,
    #[serde(default)]
    pub acceptance: Thresholds,
}

impl ScenarioSpec {
    /// Defaults for one of the benchmark tasks.
    pub fn preset(task: TaskKind) -> Self {
        let base_tire = TireParams::new(5.0, 2.0, 0.3);
        let mut spec = Self {
            scenario: RunSettings {
                task,
                duration: 100.0,
                seed: 1,
                oracle: false,
                physics_dt: 0.001,
                control_dt: 0.01,
            },
            initial: InitialPose {
                x: 10.0,
                y: 0.0,
                psi: FRAC_PI_2,
            },
            vehicle: VehicleParams::default(),
            tires: vec![TireSwitch { t: 0.0, tire: base_tire }],
            target: CenterTarget::fixed(0.0, 0.0, 10.0, 0.5),
            sensors: SensorConfig::default(),
            estimation: EstimationConfig::default(),
            inner: InnerConfig::default(),
            table: TableConfig::default(),
            kinematic: KinematicConfig::default(),
            acceptance: Thresholds::default(),
        };
        match task {
            TaskKind::FixedCircle | TaskKind::KinematicValidate => {
                spec.acceptance.max_relative_error = Some(0.15);
            }
            TaskKind::MovingCenter => {
                spec.scenario.duration = 200.0;
                spec.target.center = CenterMotion::Orbit {
                    x: 0.0,
                    y: 0.0,
                    radius: 15.0,
                    speed: 0.131,
                    phase: 0.0,
                };
                spec.initial = InitialPose {
                    x: 25.0,
                    y: 0.0,
                    psi: FRAC_PI_2,
                };
                spec.acceptance.post_settle_relative_error = Some(0.2);
                spec.acceptance.drift_fraction = Some(0.95);
            }
            TaskKind::VaryingInteraction => {
                spec.scenario.duration = 300.0;
                spec.tires.push(TireSwitch {
                    t: 200.0,
                    tire: TireParams::new(4.0, 2.0, 0.15),
                });
                spec.acceptance.max_relative_error = Some(0.35);
            }
        }
        spec
    }

    /// Layers a parsed config table over the preset named by its
    /// `scenario.task` key (fixed circle when absent), then applies
    /// overrides.
    pub fn from_table(file: &toml::Table, overrides: &[String]) -> Result<(Self, toml::Table)> {
        let mut layered = file.clone();
        for o in overrides {
            config::apply_override(&mut layered, o)?;
        }
        let task = match layered.get("scenario").and_then(|s| s.get("task")) {
            Some(v) => v
                .as_str()
                .ok_or_else(|| DriftError::config("scenario.task", v, "must be a string"))?
                .parse()?,
            None => TaskKind::FixedCircle,
        };
        let mut table = config::to_table(&Self::preset(task))?;
        config::merge(&mut table, &layered);
        let spec: Self = config::from_table(table.clone())?;
        spec.validate()?;
        Ok((spec, table))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if !(s.duration >= 0.0) {
            return Err(DriftError::config("scenario.duration", s.duration, "must be >= 0"));
        }
        if !(s.physics_dt > 0.0 && s.physics_dt <= 0.01) {
            return Err(DriftError::config("scenario.physics_dt", s.physics_dt, "must be in (0, 0.01]"));
        }
        let ratio = s.control_dt / s.physics_dt;
        if !(s.control_dt > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(DriftError::config(
                "scenario.control_dt",
                s.control_dt,
                "must be a positive multiple of physics_dt",
            ));
        }
        self.vehicle.validate()?;
        if self.tires.is_empty() {
            return Err(DriftError::config("tires", "[]", "need at least one entry"));
        }
        if self.tires[0].t != 0.0 {
            return Err(DriftError::config("tires[0].t", self.tires[0].t, "first tire must start at 0"));
        }
        for (i, w) in self.tires.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(DriftError::config(format!("tires[{}].t", i + 1), w[1].t, "switch times must increase"));
            }
        }
        for (i, t) in self.tires.iter().enumerate() {
            t.tire.validate().map_err(|e| match e {
                DriftError::InvalidConfig { key, value, reason } => DriftError::InvalidConfig {
                    key: key.replacen("tire", &format!("tires[{i}]"), 1),
                    value,
                    reason,
                },
                other => other,
            })?;
        }
        self.target.validate()?;
        self.estimation.kf.validate()?;
        self.estimation.circle.validate()?;
        self.estimation.friction.validate()?;
        if !(self.estimation.initial_mu > 0.0) {
            return Err(DriftError::config("estimation.initial_mu", self.estimation.initial_mu, "must be > 0"));
        }
        if !(self.estimation.mu_smoothing >= 0.0) {
            return Err(DriftError::config("estimation.mu_smoothing", self.estimation.mu_smoothing, "must be >= 0"));
        }
        self.inner.validate()?;
        let c = &self.sensors;
        for (key, rate) in [("sensors.pose_rate", c.pose_rate), ("sensors.gyro_rate", c.gyro_rate)] {
            let period = 1.0 / (rate * s.physics_dt);
            if !(rate > 0.0) || (period - period.round()).abs() > 1e-9 {
                return Err(DriftError::config(key, rate, "must divide the physics rate"));
            }
        }
        for (key, v) in [
            ("sensors.pose_std_pos", c.pose_std_pos),
            ("sensors.pose_std_heading", c.pose_std_heading),
            ("sensors.pose_latency", c.pose_latency),
            ("sensors.gyro_std", c.gyro_std),
        ] {
            if !(v >= 0.0) {
                return Err(DriftError::config(key, v, "must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn tire_at(&self, t: f64) -> TireParams {
        self.tires
            .iter()
            .rev()
            .find(|s| s.t <= t)
            .unwrap_or(&self.tires[0])
            .tire
    }
}

/// A measurement and the time it reaches the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub deliver_at: f64,
    pub measurement: Measurement,
}

/// Pose and gyro sensors sampled on the physics clock.
#[derive(Debug, Clone)]
pub struct SensorSuite {
    pub cfg: SensorConfig,
    pose_period: u64,
    gyro_period: u64,
    rng: ChaCha8Rng,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

impl SensorSuite {
    pub fn new(cfg: SensorConfig, physics_dt: f64, seed: u64) -> Self {
        Self {
            cfg,
            pose_period: (1.0 / (cfg.pose_rate * physics_dt)).round() as u64,
            gyro_period: (1.0 / (cfg.gyro_rate * physics_dt)).round() as u64,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Measurements sampled at physics step `step` (time `t`).
    pub fn sample(&mut self, state: &VehicleState, step: u64, t: f64) -> Vec<Delivery> {
        let c = self.cfg;
        let mut out = Vec::new();
        if step.is_multiple_of(self.pose_period) {
            let x = state.x + gaussian(&mut self.rng, c.pose_std_pos);
            let y = state.y + gaussian(&mut self.rng, c.pose_std_pos);
            let psi = state.psi + gaussian(&mut self.rng, c.pose_std_heading);
            out.push(Delivery {
                deliver_at: t + c.pose_latency,
                measurement: Measurement::pose(t, x, y, psi, c.pose_std_pos.max(1e-6), c.pose_std_heading.max(1e-6)),
            });
        }
        if step.is_multiple_of(self.gyro_period) {
            let r = state.psidot + c.gyro_bias + gaussian(&mut self.rng, c.gyro_std);
            out.push(Delivery {
                deliver_at: t,
                measurement: Measurement::yaw_rate(t, r, c.gyro_std.max(1e-6)),
            });
        }
        out
    }
}

/// One controller tick of telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunRow {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
    /// True sideslip.
    pub beta: f64,
    /// Estimated curvature fed to the inner loop.
    pub kappa: f64,
    pub kappa_ref: f64,
    pub kappa_ac: f64,
    pub estimate: VehicleState,
    pub mu_est: f64,
    /// True distance to the instantaneous expected center.
    pub d: f64,
    /// True bearing offset; NaN at rest.
    pub phi: f64,
    pub sat_flags: u32,
    pub sigma: f64,
}

pub const CSV_HEADER: &str = "t,x,y,psi,xdot,ydot,psidot,delta,omega,beta,kappa,kappa_ref,kappa_ac,est_x,est_y,est_psi,mu_est,d,phi,sat_flags";

/// One CSV line of a run record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    t: f64,
    x: f64,
    y: f64,
    psi: f64,
    xdot: f64,
    ydot: f64,
    psidot: f64,
    delta: f64,
    omega: f64,
    beta: f64,
    kappa: f64,
    kappa_ref: f64,
    kappa_ac: f64,
    est_x: f64,
    est_y: f64,
    est_psi: f64,
    mu_est: f64,
    d: f64,
    phi: f64,
    sat_flags: u32,
}

impl From<&RunRow> for CsvRow {
    fn from(r: &RunRow) -> Self {
        let (s, e) = (&r.state, &r.estimate);
        Self {
            t: r.t,
            x: s.x,
            y: s.y,
            psi: s.psi,
            xdot: s.xdot,
            ydot: s.ydot,
            psidot: s.psidot,
            delta: r.input.delta,
            omega: r.input.omega,
            beta: r.beta,
            kappa: r.kappa,
            kappa_ref: r.kappa_ref,
            kappa_ac: r.kappa_ac,
            est_x: e.x,
            est_y: e.y,
            est_psi: e.psi,
            mu_est: r.mu_est,
            d: r.d,
            phi: r.phi,
            sat_flags: r.sat_flags,
        }
    }
}

impl From<CsvRow> for RunRow {
    fn from(c: CsvRow) -> Self {
        Self {
            t: c.t,
            state: VehicleState::new(c.x, c.y, c.psi, c.xdot, c.ydot, c.psidot),
            input: ControlInput::new(c.delta, c.omega),
            beta: c.beta,
            kappa: c.kappa,
            kappa_ref: c.kappa_ref,
            kappa_ac: c.kappa_ac,
            estimate: VehicleState::new(c.est_x, c.est_y, c.est_psi, 0.0, 0.0, 0.0),
            mu_est: c.mu_est,
            d: c.d,
            phi: c.phi,
            sat_flags: c.sat_flags,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

fn csv_error(e: csv::Error) -> DriftError {
    DriftError::TableFormat(format!("run record: {e}"))
}

impl RunRecord {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            out.write_record(CSV_HEADER.split(',')).map_err(csv_error)?;
        }
        for r in &self.rows {
            out.serialize(CsvRow::from(r)).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Parses a record written by [`RunRecord::write_csv`]. The estimated
    /// velocities and the L1 state are not stored and come back as zero.
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
        if header != CSV_HEADER {
            return Err(DriftError::TableFormat("unexpected run record header".into()));
        }
        let rows = rdr
            .deserialize::<CsvRow>()
            .map(|row| row.map(RunRow::from).map_err(csv_error))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }
}

#[derive(Debug)]
pub struct RunFailure {
    pub error: DriftError,
    pub record: RunRecord,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.record.rows.last().map_or(0.0, |r| r.t);
        write!(f, "run failed at t = {t} s: {}", self.error)
    }
}

impl std::error::Error for RunFailure {}

const DIVERGENCE_RADIUS: f64 = 1e4;

/// Runs one closed-loop scenario. The table must cover the run's friction
/// and curvature range.
pub fn run_scenario(spec: &ScenarioSpec, table: &EquilibriumTable) -> std::result::Result<RunRecord, RunFailure> {
    let mut record = RunRecord::default();
    macro_rules! fail {
        ($e:expr) => {
            return Err(RunFailure {
                error: $e,
                record,
            })
        };
    }
    if let Err(e) = spec.validate() {
        fail!(e);
    }
    if spec.scenario.task == TaskKind::KinematicValidate {
        fail!(DriftError::config(
            "scenario.task",
            "kinematic_validate",
            "has no vehicle run; use the kinematic sweep"
        ));
    }
    let s = &spec.scenario;
    let n_ticks = (s.duration / s.control_dt).round() as u64;
    let substeps = (s.control_dt / s.physics_dt).round() as u64;

    let initial = VehicleState::new(spec.initial.x, spec.initial.y, spec.initial.psi, 0.0, 0.0, 0.0);
    let mut state = initial;
    let mut kf_cfg = spec.estimation.kf;
    kf_cfg.gyro_bias = spec.sensors.gyro_bias;
    let mut kf = AsyncKalmanFilter::new(StateEstimate::new(initial, kf_cfg.initial_covariance(), 0.0), kf_cfg);
    let mut sensors = SensorSuite::new(spec.sensors, s.physics_dt, s.seed);
    let mut inbox: VecDeque<Delivery> = VecDeque::new();

    let circle_cfg = spec.estimation.circle;
    let fric_cfg = spec.estimation.friction;
    let mut fit_window = TrajectoryWindow::new(circle_cfg.window.max(3)).expect("validated");
    let mut fric_window = TrajectoryWindow::new(fric_cfg.window.max(3)).expect("validated");
    let mut kappa_est = 0.0;
    let mut mu_est = spec.estimation.initial_mu;
    let mu_alpha = if spec.estimation.mu_smoothing > 0.0 {
        let step = s.control_dt * fric_cfg.update_every as f64;
        1.0 - (-step / spec.estimation.mu_smoothing).exp()
    } else {
        1.0
    };

    let mut outer = OuterLoop::new(spec.target, table.kappa_range());
    let mut inner = InnerController::new(spec.inner, spec.vehicle);
    let mut tire = spec.tire_at(0.0);
    let mut model = VehicleModel::new(spec.vehicle, tire);
    let mut physics_step: u64 = 0;

    for tick in 0..n_ticks {
        let t = tick as f64 * s.control_dt;

        let estimate = if s.oracle {
            state
        } else {
            while inbox.front().is_some_and(|d| d.deliver_at <= t + 1e-12) {
                let d = inbox.pop_front().expect("front exists");
                if let Err(e) = kf.process(d.measurement) {
                    fail!(e);
                }
            }
            match kf.estimate_at(t) {
                Ok(e) => e.mean,
                Err(e) => fail!(e),
            }
        };

        if let Err(e) = fit_window.push(t, estimate, ControlInput::default()) {
            fail!(e);
        }
        if fit_window.len() >= 3 {
            match fit_circle(&fit_window, &circle_cfg) {
                Ok(fit) => kappa_est = fit.kappa,
                Err(DriftError::FitFailure(last)) if last.r.is_finite() => kappa_est = last.kappa,
                Err(_) => {}
            }
        }

        if tick % fric_cfg.update_every as u64 == 0
            && fric_window.is_full()
            && fric_window.samples().all(|w| w.state.sideslip().abs() > spec.estimation.mu_min_sideslip)
        {
            if let Ok(f) = estimate_friction(&fric_window, &spec.vehicle, &fric_cfg) {
                mu_est += mu_alpha * (f.mu - mu_est);
            }
        }

        let outer_out = outer.tick(&estimate, t);
        let est = InnerEstimates {
            beta: estimate.sideslip(),
            speed: estimate.speed(),
            kappa: kappa_est,
            mu: mu_est,
            yaw_rate: estimate.psidot,
            timestamp: t,
        };
        let out = match inner.tick(&est, outer_out.kappa_ref, t, table) {
            Ok(o) => o,
            Err(e) => fail!(e),
        };
        let input = out.input;
        if let Err(e) = fric_window.push(t, estimate, input) {
            fail!(e);
        }

        let c = spec.target.center.position(t);
        record.rows.push(RunRow {
            t,
            state,
            input,
            beta: state.sideslip(),
            kappa: kappa_est,
            kappa_ref: outer_out.kappa_ref,
            kappa_ac: out.kappa_ac,
            estimate,
            mu_est,
            d: (state.x - c.0).hypot(state.y - c.1),
            phi: bearing_phi(&state, c, outer.v_min).unwrap_or(f64::NAN),
            sat_flags: out.flags,
            sigma: out.sigma,
        });

        for _ in 0..substeps {
            let ts = physics_step as f64 * s.physics_dt;
            let due = spec.tire_at(ts + 1e-12);
            if due != tire {
                tire = due;
                model = model.with_tire(tire);
            }
            if !s.oracle {
                for d in sensors.sample(&state, physics_step, ts) {
                    let pos = inbox
                        .iter()
                        .position(|q| q.deliver_at > d.deliver_at)
                        .unwrap_or(inbox.len());
                    inbox.insert(pos, d);
                }
            }
            state = match model.step(&state, &input, s.physics_dt) {
                Ok(next) => next,
                Err(e) => fail!(e),
            };
            physics_step += 1;
        }
        if state.x.hypot(state.y) > DIVERGENCE_RADIUS {
            fail!(DriftError::NonFiniteState(state));
        }
    }
    Ok(record)
}

/// Builds (or loads) the spec's table and runs it.
pub fn run_with_table(spec: &ScenarioSpec) -> std::result::Result<(RunRecord, EquilibriumTable), RunFailure> {
    let table = spec.table.build(&spec.vehicle).map_err(|e| RunFailure {
        error: e,
        record: RunRecord::default(),
    })?;
    let rec = run_scenario(spec, &table)?;
    Ok((rec, table))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub max_relative_error: f64,
    pub settled: bool,
    pub beta_settle_time: Option<f64>,
    pub kappa_rms_error_post_settle: Option<f64>,
    pub drift_fraction_post_settle: Option<f64>,
    pub max_relative_error_post_settle: Option<f64>,
    pub final_mu_est: f64,
    pub duration: f64,
}

pub const SETTLE_BAND: f64 = 0.1;

/// First time after which `|beta - beta_ref|` stays below `band`.
pub fn settle_time(record: &RunRecord, beta_ref: f64, band: f64) -> Option<f64> {
    let last_bad = record
        .rows
        .iter()
        .rposition(|r| !((r.beta - beta_ref).abs() < band));
    match last_bad {
        None => record.rows.first().map(|r| r.t),
        Some(i) if i + 1 < record.rows.len() => Some(record.rows[i + 1].t),
        Some(_) => None,
    }
}

/// Distance error relative to the expected radius.
pub fn relative_error(row: &RunRow, r_exp: f64) -> f64 {
    (row.d - r_exp).abs() / r_exp
}

/// The sideslip reference for the spec's turn direction.
pub fn beta_reference(spec: &ScenarioSpec) -> f64 {
    if spec.inner.clockwise {
        -spec.inner.beta_ref
    } else {
        spec.inner.beta_ref
    }
}

pub fn compute_metrics(record: &RunRecord, spec: &ScenarioSpec) -> Metrics {
    let r_exp = spec.target.r_exp;
    let rows = &record.rows;
    let max_rel = rows.iter().map(|r| relative_error(r, r_exp)).fold(0.0, f64::max);
    let settle = settle_time(record, beta_reference(spec), SETTLE_BAND);
    let post: Vec<&RunRow> = match settle {
        Some(ts) => rows.iter().filter(|r| r.t >= ts).collect(),
        None => Vec::new(),
    };
    let (kappa_rms, drift, post_rel) = if post.is_empty() {
        (None, None, None)
    } else {
        let n = post.len() as f64;
        let rms = (post
            .iter()
            .map(|r| ((r.kappa - r.kappa_ref) / r.kappa_ref).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let drift = post.iter().filter(|r| r.beta.abs() > FRAC_PI_6).count() as f64 / n;
        let rel = post.iter().map(|r| relative_error(r, r_exp)).fold(0.0, f64::max);
        (Some(rms), Some(drift), Some(rel))
    };
    Metrics {
        max_relative_error: max_rel,
        settled: settle.is_some(),
        beta_settle_time: settle,
        kappa_rms_error_post_settle: kappa_rms,
        drift_fraction_post_settle: drift,
        max_relative_error_post_settle: post_rel,
        final_mu_est: rows.last().map_or(spec.estimation.initial_mu, |r| r.mu_est),
        duration: spec.scenario.duration,
    }
}

impl Metrics {
    /// Names of thresholds that fail.
    pub fn violations(&self, th: &Thresholds) -> Vec<&'static str> {
        let mut bad = Vec::new();
        let over = |v: Option<f64>, lim: Option<f64>| matches!((v, lim), (_, Some(l)) if !v.is_some_and(|v| v < l));
        let under = |v: Option<f64>, lim: Option<f64>| matches!((v, lim), (_, Some(l)) if !v.is_some_and(|v| v > l));
        if over(Some(self.max_relative_error), th.max_relative_error) {
            bad.push("max_relative_error");
        }
        if over(self.beta_settle_time, th.settle_time) {
            bad.push("settle_time");
        }
        if over(self.kappa_rms_error_post_settle, th.kappa_rms_error) {
            bad.push("kappa_rms_error");
        }
        if under(self.drift_fraction_post_settle, th.drift_fraction) {
            bad.push("drift_fraction");
        }
        if over(self.max_relative_error_post_settle, th.post_settle_relative_error) {
            bad.push("post_settle_relative_error");
        }
        bad
    }
}

