use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use drift_core::config;
use drift_core::equilibria::build_table_unchecked;
use drift_core::estimation::{self, CircleFitConfig, FrictionConfig, TrajectoryWindow, WindowSample};
use drift_core::outer_control::{kinematic_sweep, sample_initial_conditions, CenterTarget};
use drift_core::scenarios::{
    beta_reference, compute_metrics, relative_error, run_scenario, KinematicConfig, RunRecord, ScenarioSpec,
};
use drift_core::{ControlInput, DriftError, VehicleParams, VehicleState};

pub const EXIT_ERROR: u8 = 1;
/// The run finished but missed a configured threshold.
pub const EXIT_THRESHOLD: u8 = 2;
/// The simulation itself failed; partial outputs are kept.
pub const EXIT_RUN_FAILED: u8 = 3;

pub const RECORD_FILE: &str = "record.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TableRef {
    pub path: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Outputs {
    pub config: String,
    pub record: String,
    pub metrics: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_path: String,
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub table: TableRef,
    pub outputs: Outputs,
}

fn load_spec(path: &Path, overrides: &[String]) -> Result<(ScenarioSpec, toml::Table, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not utf-8", path.display()))?;
    let file = config::parse_str(text)?;
    let (spec, resolved) = ScenarioSpec::from_table(&file, overrides)?;
    Ok((spec, resolved, bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs one config into `out`; returns the exit code.
fn simulate_one(config_path: &Path, out: &Path, seed: u64, overrides: &[String]) -> Result<u8> {
    let mut all = overrides.to_vec();
    all.push(format!("scenario.seed={seed}"));
    let (spec, resolved, raw) = load_spec(config_path, &all)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), toml::to_string(&resolved)?)?;

    let table = spec.table.build(&spec.vehicle)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: config_path.display().to_string(),
        config_sha256: sha256_hex(&raw),
        overrides: all,
        seed,
        table: TableRef {
            path: spec.table.path.clone(),
            sha256: sha256_hex(&table.to_bytes()),
        },
        outputs: Outputs {
            config: CONFIG_FILE.into(),
            record: RECORD_FILE.into(),
            metrics: METRICS_FILE.into(),
        },
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    let (record, failure) = match run_scenario(&spec, &table) {
        Ok(r) => (r, None),
        Err(f) => (f.record, Some(f.error)),
    };
    let file = fs::File::create(out.join(RECORD_FILE))?;
    record.write_csv(std::io::BufWriter::new(file))?;
    let metrics = compute_metrics(&record, &spec);
    write_json(&out.join(METRICS_FILE), &metrics)?;

    if let Some(e) = failure {
        let t = record.rows.last().map_or(0.0, |r| r.t);
        eprintln!("{}: run failed at t = {t} s: {e}", config_path.display());
        return Ok(EXIT_RUN_FAILED);
    }
    let bad = metrics.violations(&spec.acceptance);
    if bad.is_empty() {
        Ok(0)
    } else {
        eprintln!("{}: thresholds missed: {}", config_path.display(), bad.join(", "));
        Ok(EXIT_THRESHOLD)
    }
}

pub fn simulate(config_path: &Path, out: &Path, seed: u64, overrides: &[String]) -> Result<ExitCode> {
    simulate_one(config_path, out, seed, overrides).map(ExitCode::from)
}

pub fn batch(configs: &[PathBuf], out: &Path, seed: u64, jobs: usize, overrides: &[String]) -> Result<ExitCode> {
    let jobs = if jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        jobs
    };
    let mut dirs: Vec<PathBuf> = Vec::with_capacity(configs.len());
    for (i, c) in configs.iter().enumerate() {
        let stem = c.file_stem().map_or_else(|| format!("run{i}"), |s| s.to_string_lossy().into_owned());
        let mut dir = out.join(&stem);
        if dirs.contains(&dir) {
            dir = out.join(format!("{stem}-{i}"));
        }
        dirs.push(dir);
    }
    let next = AtomicUsize::new(0);
    let codes = Mutex::new(vec![0u8; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let code = simulate_one(&configs[i], &dirs[i], seed, overrides).unwrap_or_else(|e| {
                    eprintln!("{}: {e:#}", configs[i].display());
                    EXIT_ERROR
                });
                codes.lock().expect("no worker panics while holding the lock")[i] = code;
            });
        }
    });
    let codes = codes.into_inner().expect("workers joined");
    for (c, code) in configs.iter().zip(&codes) {
        let status = match *code {
            0 => "ok",
            EXIT_THRESHOLD => "threshold missed",
            EXIT_RUN_FAILED => "run failed",
            _ => "error",
        };
        println!("{}: {status}", c.display());
    }
    Ok(ExitCode::from(codes.into_iter().max().unwrap_or(0)))
}

pub fn table(config_path: &Path, out: &Path, csv: Option<&Path>, overrides: &[String]) -> Result<ExitCode> {
    let (spec, _, _) = load_spec(config_path, overrides)?;
    let t = &spec.table;
    let table = build_table_unchecked(&t.mu_grid, &t.kappa_grid, &spec.vehicle, t.mode, &t.seed, &t.solver)?;
    table.save(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = csv {
        fs::write(path, table.to_csv())?;
    }
    println!(
        "{} x {} cells, feasible fraction {:.3}, max residual {:.3e}",
        table.mu_grid.len(),
        table.kappa_grid.len(),
        table.feasible_fraction(),
        table.max_residual()
    );
    match table.check_quality() {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(e) => {
            eprintln!("{e}; partial table kept at {}", out.display());
            Ok(ExitCode::from(EXIT_ERROR))
        }
    }
}

pub struct OuterFlags {
    pub kappa0: Option<f64>,
    pub gamma: Option<f64>,
    pub v: Option<f64>,
    pub samples: Option<usize>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub tol: Option<f64>,
}

pub struct OuterArgs {
    pub kappa0: f64,
    pub gamma: f64,
    pub v: f64,
    pub samples: usize,
    pub horizon: f64,
    pub dt: f64,
    pub tol: f64,
}

impl OuterArgs {
    pub fn resolve(config_path: Option<&Path>, f: OuterFlags) -> Result<Self> {
        let (target, kin) = match config_path {
            Some(p) => {
                let spec = load_spec(p, &[])?.0;
                (spec.target, spec.kinematic)
            }
            None => (CenterTarget::fixed(0.0, 0.0, 10.0, 0.5), KinematicConfig::default()),
        };
        let kappa0 = f.kappa0.unwrap_or(target.kappa0());
        let v = f.v.unwrap_or(kin.speed);
        Ok(Self {
            kappa0,
            gamma: f.gamma.unwrap_or(target.gamma),
            v,
            samples: f.samples.unwrap_or(kin.samples),
            horizon: f.horizon.unwrap_or(kin.horizon_scale / (v * kappa0)),
            dt: f.dt.unwrap_or(kin.dt),
            tol: f.tol.unwrap_or(kin.tolerance),
        })
    }
}

/// Most points written per trajectory in the series file.
const SERIES_POINTS: usize = 2000;

pub fn validate_outer(out: &Path, seed: u64, a: &OuterArgs) -> Result<ExitCode> {
    if !(a.gamma > 0.0) {
        bail!("gamma = {}: the convergence certificate needs gamma > 0", a.gamma);
    }
    if !(a.kappa0 > 0.0) {
        bail!("kappa0 = {}: must be > 0", a.kappa0);
    }
    if !(a.v > 0.0) {
        bail!("v = {}: must be > 0", a.v);
    }
    let target = CenterTarget::fixed(0.0, 0.0, 1.0 / a.kappa0, a.gamma);
    let initial = sample_initial_conditions(a.kappa0, a.samples, seed);
    let outcomes = kinematic_sweep(&target, a.v, &initial, a.horizon, a.dt, a.tol);

    fs::create_dir_all(out)?;
    let mut summary = csv::Writer::from_path(out.join("samples.csv"))?;
    summary.write_record(["sample", "d0", "phi0", "converged", "max_v_increase", "max_vdot_residual", "final_d", "final_phi"])?;
    let mut series = csv::Writer::from_path(out.join("series.csv"))?;
    series.write_record(["sample", "t", "d", "phi", "v_lyap"])?;
    let mut failed = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        match &o.report {
            Ok(r) => {
                summary.serialize((
                    i,
                    o.initial.d,
                    o.initial.phi,
                    r.converged,
                    r.max_v_increase,
                    r.max_vdot_residual,
                    r.final_state.d,
                    r.final_state.phi,
                ))?;
                let stride = r.samples.len().div_ceil(SERIES_POINTS).max(1);
                for s in r.samples.iter().step_by(stride) {
                    series.serialize((i, s.t, s.d, s.phi, s.v_lyap))?;
                }
            }
            Err(e) => {
                summary.serialize((i, o.initial.d, o.initial.phi, false, f64::NAN, f64::NAN, f64::NAN, f64::NAN))?;
                eprintln!("sample {i}: {e}");
            }
        }
        if !o.certified(a.tol) {
            failed.push(i);
        }
    }
    summary.flush()?;
    series.flush()?;
    if failed.is_empty() {
        println!("{} samples converged with V non-increasing", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        for &i in &failed {
            let p = outcomes[i].initial;
            eprintln!("sample {i} failed from d = {}, phi = {}", p.d, p.phi);
        }
        Ok(ExitCode::from(EXIT_THRESHOLD))
    }
}

pub fn plotdata(run: &Path, out: &Path) -> Result<ExitCode> {
    let record_path = run.join(RECORD_FILE);
    let file = fs::File::open(&record_path).with_context(|| format!("opening {}", record_path.display()))?;
    let record = RunRecord::read_csv(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", record_path.display()))?;
    if record.rows.is_empty() {
        bail!("{} has no rows", record_path.display());
    }
    let (spec, _, _) = load_spec(&run.join(CONFIG_FILE), &[])?;
    let beta_ref = beta_reference(&spec);
    fs::create_dir_all(out)?;

    let mut sideslip = csv::Writer::from_path(out.join("sideslip.csv"))?;
    sideslip.write_record(["t", "beta", "beta_ref"])?;
    let mut curvature = csv::Writer::from_path(out.join("curvature.csv"))?;
    curvature.write_record(["t", "kappa", "kappa_ref", "kappa_ac"])?;
    let mut trajectory = csv::Writer::from_path(out.join("trajectory.csv"))?;
    trajectory.write_record(["t", "x", "y", "psi", "center_x", "center_y"])?;
    let mut error = csv::Writer::from_path(out.join("relative_error.csv"))?;
    error.write_record(["t", "d", "relative_error"])?;
    for r in &record.rows {
        let c = spec.target.center.position(r.t);
        sideslip.serialize((r.t, r.beta, beta_ref))?;
        curvature.serialize((r.t, r.kappa, r.kappa_ref, r.kappa_ac))?;
        trajectory.serialize((r.t, r.state.x, r.state.y, r.state.psi, c.0, c.1))?;
        error.serialize((r.t, r.d, relative_error(r, spec.target.r_exp)))?;
    }
    for w in [&mut sideslip, &mut curvature, &mut trajectory, &mut error] {
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Trajectory sample columns; extra columns are ignored, so run records
/// can be read directly.
#[derive(Debug, Deserialize)]
struct SampleRow {
    t: f64,
    x: f64,
    y: f64,
    psi: f64,
    xdot: f64,
    ydot: f64,
    psidot: f64,
    #[serde(default)]
    delta: f64,
    #[serde(default)]
    omega: f64,
}

fn read_window(path: &Path, window: usize) -> Result<TrajectoryWindow> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows: Vec<SampleRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    let take = if window == 0 { rows.len() } else { window.min(rows.len()) };
    let samples = rows[rows.len() - take..].iter().map(|r| WindowSample {
        t: r.t,
        state: VehicleState::new(r.x, r.y, r.psi, r.xdot, r.ydot, r.psidot),
        input: ControlInput::new(r.delta, r.omega),
    });
    Ok(TrajectoryWindow::from_samples(take.max(3), samples)?)
}

pub fn fit_circle(csv: &Path, window: usize) -> Result<ExitCode> {
    let w = read_window(csv, window)?;
    match estimation::fit_circle(&w, &CircleFitConfig::default()) {
        Ok(fit) => {
            println!("{}", serde_json::to_string_pretty(&fit)?);
            Ok(ExitCode::SUCCESS)
        }
        Err(DriftError::FitFailure(last)) => {
            println!("{}", serde_json::to_string_pretty(&*last)?);
            eprintln!("circle fit did not converge; printed the last iterate");
            Ok(ExitCode::from(EXIT_THRESHOLD))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn estimate_friction(csv: &Path, window: usize, config_path: Option<&Path>) -> Result<ExitCode> {
    let params = match config_path {
        Some(p) => load_spec(p, &[])?.0.vehicle,
        None => VehicleParams::default(),
    };
    let w = read_window(csv, window)?;
    let est = estimation::estimate_friction(&w, &params, &FrictionConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&est)?);
    Ok(ExitCode::SUCCESS)
}
