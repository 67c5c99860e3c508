use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_GRID: [&str; 2] = ["table.mu_grid=[0.1, 0.12, 0.14]", "table.kappa_grid=[0.08, 0.1, 0.12]"];

fn drift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn simulate(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"];
    for s in SMALL_GRID.iter().chain(extra) {
        args.extend(["--set", s]);
    }
    drift(&args)
}

#[test]
fn simulate_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scenario]\nduration = 1.0\n");
    let out = dir.path().join("run");
    let o = simulate(&cfg, &out, &[]);
    // One second is too short to settle; any configured threshold may miss.
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));
    for f in ["manifest.json", "config.toml", "record.csv", "metrics.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["overrides"].as_array().unwrap().iter().any(|v| v == "scenario.seed=3"));
    let record = fs::read_to_string(out.join("record.csv")).unwrap();
    assert_eq!(record.lines().count(), 101);
}

#[test]
fn same_seed_gives_identical_files_and_snapshot_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scenario]\nduration = 1.0\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&cfg, &a, &[]);
    simulate(&cfg, &b, &[]);
    assert_eq!(fs::read(a.join("record.csv")).unwrap(), fs::read(b.join("record.csv")).unwrap());
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());

    // The config snapshot alone reproduces the run.
    let c = dir.path().join("c");
    let o = drift(&[
        "simulate",
        "--config",
        a.join("config.toml").to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("record.csv")).unwrap(), fs::read(c.join("record.csv")).unwrap());
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[target]\nr_exp = -4.0\n");
    let o = simulate(&cfg, &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("target.r_exp") && err.contains("-4"), "{err}");
}

#[test]
fn run_failure_keeps_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scenario]\nduration = 1.0\n[initial]\nx = 20000.0\n");
    let out = dir.path().join("run");
    let o = simulate(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(out.join("manifest.json").exists());
    assert_eq!(fs::read_to_string(out.join("record.csv")).unwrap().lines().count(), 2);
}

#[test]
fn batch_runs_each_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.toml");
    let b = dir.path().join("b.toml");
    fs::write(&a, "[scenario]\nduration = 0.5\n").unwrap();
    fs::write(&b, "[scenario]\nduration = 0.5\n[initial]\nx = 20000.0\n").unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["batch", "--out", out.to_str().unwrap(), "--seed", "1", "--jobs", "2"];
    for s in SMALL_GRID {
        args.extend(["--set", s]);
    }
    args.extend([a.to_str().unwrap(), b.to_str().unwrap()]);
    let o = drift(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join("a/record.csv").exists());
    assert!(out.join("b/record.csv").exists());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("a.toml: ") && text.contains("b.toml: run failed"), "{text}");
}

#[test]
fn table_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let build = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["table", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        for s in SMALL_GRID {
            args.extend(["--set", s]);
        }
        let o = drift(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("feasible fraction"));
        fs::read(out).unwrap()
    };
    assert_eq!(build("t1"), build("t2"));
}

#[test]
fn table_rejects_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[table]\nmu_grid = []\n");
    let out = dir.path().join("t");
    let o = drift(&["table", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn validate_outer_converges_and_refuses_zero_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("outer");
    let o = drift(&["validate-outer", "--out", out.to_str().unwrap(), "--seed", "1", "--samples", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let samples = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 6);
    assert!(fs::read_to_string(out.join("series.csv")).unwrap().starts_with("sample,t,d,phi,v_lyap"));

    let o = drift(&["validate-outer", "--out", out.to_str().unwrap(), "--seed", "1", "--gamma", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma"));
}

#[test]
fn plotdata_emits_four_panels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scenario]\nduration = 1.0\n");
    let run = dir.path().join("run");
    simulate(&cfg, &run, &[]);
    let o = drift(&["plotdata", "--run", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let plot = run.join("plot");
    for f in ["sideslip.csv", "curvature.csv", "trajectory.csv", "relative_error.csv"] {
        assert_eq!(fs::read_to_string(plot.join(f)).unwrap().lines().count(), 101, "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let mut rdr = csv::Reader::from_path(plot.join("relative_error.csv")).unwrap();
    let max = rdr
        .records()
        .map(|r| r.unwrap()[2].parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert_eq!(max, metrics["max_relative_error"].as_f64().unwrap());
}

#[test]
fn plotdata_rejects_empty_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scenario]\nduration = 0.0\n");
    let run = dir.path().join("run");
    simulate(&cfg, &run, &[]);
    let o = drift(&["plotdata", "--run", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no rows"));
}

#[test]
fn fit_circle_reads_trajectory_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    let mut text = String::from("t,x,y,psi,xdot,ydot,psidot\n");
    let (r, v) = (8.0, 3.0);
    for k in 0..60 {
        let t = k as f64 * 0.01;
        let a = v / r * t;
        text += &format!("{t},{},{},{},{},{},{}\n", 2.0 + r * a.cos(), -1.0 + r * a.sin(), a + 1.5, -v * a.sin(), v * a.cos(), v / r);
    }
    fs::write(&path, text).unwrap();
    let o = drift(&["fit-circle", "--csv", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fit: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((fit["r"].as_f64().unwrap() - r).abs() < 1e-6);
    assert!((fit["x0"].as_f64().unwrap() - 2.0).abs() < 1e-6);

    let o = drift(&["estimate-friction", "--csv", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let est: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(est["mu"].as_f64().unwrap() > 0.0);
}

#[test]
fn validate_outer_reads_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[target]\nr_exp = 5.0\ngamma = 0.8\n[kinematic]\nsamples = 3\n");
    let out = dir.path().join("outer");
    let o = drift(&["validate-outer", "--out", out.to_str().unwrap(), "--seed", "2", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("samples.csv")).unwrap().lines().count(), 4);
    let o = drift(&[
        "validate-outer", "--out", out.to_str().unwrap(), "--seed", "2", "--config", cfg.to_str().unwrap(), "--gamma=-1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(drift(&["simulate"]).status.code(), Some(1));
    assert_eq!(drift(&["--help"]).status.code(), Some(0));
}
