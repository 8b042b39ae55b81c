//! Writes the synthetic truth (densities, incident speeds and boundary
//! ledger) to a directory and reads it back.

use std::path::PathBuf;

use uavtse::scenario::generate_truth;
use uavtse::{ScenarioConfig, TruthTrace};

fn main() -> uavtse::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("truth_out"), PathBuf::from);
    std::fs::create_dir_all(&dir)?;
    let trace = generate_truth(&ScenarioConfig::default(), 360)?;
    trace.write_csv(&dir)?;
    let back = TruthTrace::read_csv(&dir)?;
    assert_eq!(back, trace);
    println!("{} steps written to {}", back.steps(), dir.display());
    Ok(())
}
