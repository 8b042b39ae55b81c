//! Baseline estimation with loop detectors and probe vehicles only. The
//! downstream incident is identified; the congested upstream one is not.

use uavtse::{run_experiment, RunConfig};

fn main() -> uavtse::Result<()> {
    let m = run_experiment(&RunConfig::default())?;
    println!("density RMSE {:.2} veh/km", m.density_rmse);
    for step in m.speed_event_steps.iter().take(6) {
        let v = &m.vmax_mean[*step];
        let s = &m.vmax_std[*step];
        println!(
            "speed event at step {step:>3}: cell 5 {:.1} +/- {:.1}, cell 15 {:.1} +/- {:.1} km/h",
            v[0], s[0], v[1], s[1]
        );
    }
    println!("convergence steps: {:?}", m.convergence_step);
    Ok(())
}
