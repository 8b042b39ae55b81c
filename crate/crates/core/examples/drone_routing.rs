//! Drone run: the planner routes the drone toward whichever path reduces the
//! weighted covariance traces most.

use uavtse::{run_experiment, Mode, RunConfig};

fn main() -> uavtse::Result<()> {
    let lambda = std::env::args().nth(1).map_or(Ok(0.5), |a| a.parse()).expect("lambda must be a number");
    let cfg = RunConfig {
        mode: Mode::Drone,
        lambda,
        ..RunConfig::default()
    };
    let m = run_experiment(&cfg)?;
    let path: Vec<String> = m.drone_cells.iter().step_by(5).map(|c| c.to_string()).collect();
    println!("lambda {lambda}: drone cell every 5 steps: {}", path.join(" "));
    for d in &m.dwell {
        println!("{:<30} {:.3}", d.segment, d.fraction);
    }
    println!("convergence steps: {:?}", m.convergence_step);
    Ok(())
}
