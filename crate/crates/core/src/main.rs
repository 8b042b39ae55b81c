use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uavtse::experiment::{compute_metrics, read_record, render_plots, sweep};
use uavtse::{run_experiment, Mode, RunConfig};

#[derive(Parser)]
#[command(version, about = "Freeway state estimation twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write CSV traces and SVG plots.
    Run {
        /// TOML run file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run both modes for consecutive seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Re-render plots from a finished run directory.
    Plot {
        #[arg(long)]
        from: PathBuf,
    },
}

fn load(config: Option<&PathBuf>) -> uavtse::Result<RunConfig> {
    match config {
        Some(path) => RunConfig::from_path(path),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, mode, seed, out } => load(config.as_ref()).and_then(|mut cfg| {
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.scenario.seed = s;
            }
            cfg.output_dir = Some(out.clone());
            let m = run_experiment(&cfg)?;
            println!("{} run, seed {}, {} steps -> {}", m.mode, cfg.seed, m.steps, out.display());
            println!("density RMSE {:.3} veh/km", m.density_rmse);
            for (i, cell) in m.incident_cells.iter().enumerate() {
                let last = m.vmax_mean.last().map_or(f64::NAN, |v| v[i]);
                match m.convergence_step[i] {
                    Some(s) => println!("cell {cell}: v_max {last:.2} km/h, converged at step {s}"),
                    None => println!("cell {cell}: v_max {last:.2} km/h, not converged"),
                }
            }
            for d in &m.dwell {
                println!("dwell {}: {:.3}", d.segment, d.fraction);
            }
            Ok(())
        }),
        Command::Sweep { config, seeds, out } => load(config.as_ref()).and_then(|cfg| {
            let rows = sweep(&cfg, seeds, &out)?;
            println!("{} runs -> {}", rows.len(), out.join("sweep.csv").display());
            Ok(())
        }),
        Command::Plot { from } => read_record(&from).and_then(|rec| {
            compute_metrics(&rec)?;
            render_plots(&rec, &from)?;
            println!("plots written to {}", from.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
