//! Both modes over a few seeds, summarised per mode.

use uavtse::experiment::sweep;
use uavtse::{Mode, RunConfig};

fn main() -> uavtse::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(3, |a| a.parse().expect("seed count"));
    let out = std::env::temp_dir().join("uavtse_sweep");
    let rows = sweep(&RunConfig::default(), seeds, &out)?;
    for mode in [Mode::Baseline, Mode::Drone] {
        let runs: Vec<_> = rows.iter().filter(|r| r.mode == mode).collect();
        let rmse = runs.iter().map(|r| r.metrics.density_rmse).sum::<f64>() / runs.len() as f64;
        let found = runs.iter().filter(|r| r.metrics.convergence_step[0].is_some()).count();
        println!("{mode}: mean density RMSE {rmse:.2}, upstream v_max converged in {found}/{}", runs.len());
    }
    println!("per-run outputs under {}", out.display());
    Ok(())
}
