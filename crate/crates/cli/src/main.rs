// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Drift simulation, equilibrium tables and estimator tools.
#[derive(Debug, Parser)]
#[command(name = "drift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write its record, metrics and manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Dotted-path override, e.g. `target.r_exp=8`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run several scenario configs on a worker pool, one output
    /// directory per config.
    Batch {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Solve the equilibrium table for a config's vehicle and grid.
    Table {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV export.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check the outer loop's Lyapunov certificate on the polar kinematics.
    /// Values come from the flags, then the config's `target` and
    /// `kinematic` tables, then the built-in defaults.
    ValidateOuter {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Nominal curvature (1/m) [default: 0.1]
        #[arg(long)]
        kappa0: Option<f64>,
        /// [default: 0.5]
        #[arg(long)]
        gamma: Option<f64>,
        /// Speed (m/s) [default: 3]
        #[arg(long)]
        v: Option<f64>,
        /// [default: 100]
        #[arg(long)]
        samples: Option<usize>,
        /// Horizon (s) [default: 500 / (v kappa0)]
        #[arg(long)]
        horizon: Option<f64>,
        /// [default: 0.05]
        #[arg(long)]
        dt: Option<f64>,
        /// [default: 1e-3]
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Turn a run directory into per-panel series files.
    Plotdata {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/plot`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a circle to the last samples of a CSV trajectory.
    FitCircle {
        #[arg(long)]
        csv: PathBuf,
        /// Samples in the window; 0 uses the whole file.
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
    /// Estimate the friction coefficient from a CSV trajectory.
    EstimateFriction {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
        /// Scenario config supplying the vehicle parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    // Usage errors share the generic error code; 2 means a missed threshold.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(commands::EXIT_ERROR);
        }
    };
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            overrides,
        } => commands::simulate(&config, &out, seed, &overrides),
        Command::Batch {
            out,
            seed,
            jobs,
            overrides,
            configs,
        } => commands::batch(&configs, &out, seed, jobs, &overrides),
        Command::Table {
            config,
            out,
            csv,
            overrides,
        } => commands::table(&config, &out, csv.as_deref(), &overrides),
        Command::ValidateOuter {
            out,
            seed,
            config,
            kappa0,
            gamma,
            v,
            samples,
            horizon,
            dt,
            tol,
        } => commands::OuterArgs::resolve(
            config.as_deref(),
            commands::OuterFlags {
                kappa0,
                gamma,
                v,
                samples,
                horizon,
                dt,
                tol,
            },
        )
        .and_then(|args| commands::validate_outer(&out, seed, &args)),
        Command::Plotdata { run, out } => {
            let out = out.unwrap_or_else(|| run.join("plot"));
            commands::plotdata(&run, &out)
        }
        Command::FitCircle { csv, window } => commands::fit_circle(&csv, window),
        Command::EstimateFriction { csv, window, config } => {
            commands::estimate_friction(&csv, window, config.as_deref())
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::EXIT_ERROR)
        }
    }
}
