//! Runs the true corridor for ten minutes and prints the density profile,
//! showing the queue that forms behind the upstream incident.

use uavtse::scenario::generate_truth;
use uavtse::{updated_critical_density, ScenarioConfig};

fn main() -> uavtse::Result<()> {
    let sc = ScenarioConfig::default();
    let trace = generate_truth(&sc, 60)?;
    let rho_cr = updated_critical_density(20.0, &sc.fd0)?;
    println!("critical density at 20 km/h: {rho_cr:.2} veh/km");
    for step in [0, 10, 30, 60] {
        let row: Vec<String> = trace.densities[step].iter().map(|r| format!("{r:5.0}")).collect();
        println!("step {step:>3}: {}", row.join(""));
    }
    let moved: f64 = trace.ledgers.iter().map(|l| l.inflow).sum();
    let ramp: f64 = trace.ledgers.iter().map(|l| l.offramp_outflow).sum();
    println!("vehicles entered {moved:.1}, left by the off-ramp {ramp:.1}");
    Ok(())
}
