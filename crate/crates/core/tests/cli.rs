use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uavtse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uavtse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("short.toml");
    fs::write(
        &path,
        "[run]\nhorizon_steps = 35\n\n[scenario]\ndrone_launch_step = 4\n\n[estimator]\nensemble_size = 24\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_then_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    let out_s = out.to_string_lossy();
    let res = uavtse(&["run", "--config", &config, "--mode", "drone", "--seed", "9", "--out", &out_s]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("drone run, seed 9, 35 steps"), "{stdout}");
    for f in ["truth.csv", "estimates.csv", "covtrace.csv", "drone.csv", "metrics.csv", "drone.svg"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    fs::remove_file(out.join("drone.svg")).unwrap();
    let res = uavtse(&["plot", "--from", &out_s]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("drone.svg").exists());
}

#[test]
fn sweep_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("sweep");
    let res = uavtse(&["sweep", "--config", &config, "--seeds", "2", "--out", &out.to_string_lossy()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("seed,mode,density_rmse"));
    assert!(out.join("seed_2").join("drone").join("metrics.csv").exists());
}

#[test]
fn bad_config_fails_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[run]\nseed = 2\nlambda = -1.0\n").unwrap();
    let res = uavtse(&["run", "--config", &path.to_string_lossy(), "--out", &tmp.path().to_string_lossy()]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("line 3") && stderr.contains("run.lambda"), "{stderr}");
}

#[test]
fn unknown_mode_is_rejected() {
    let res = uavtse(&["run", "--mode", "helicopter"]);
    assert!(!res.status.success());
}
