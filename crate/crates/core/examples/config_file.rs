//! Loads a TOML run file, tweaks it in code and runs it.

use std::path::Path;

use uavtse::{run_experiment, Mode, RunConfig};

fn main() -> uavtse::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/corridor.toml").into());
    let mut cfg = match RunConfig::from_path(Path::new(&path)) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{path}: {e}");
            std::process::exit(2);
        }
    };
    cfg.mode = Mode::Drone;
    cfg.horizon_steps = 120;
    let m = run_experiment(&cfg)?;
    println!("{} steps from {path}: density RMSE {:.2}", m.steps, m.density_rmse);
    Ok(())
}
