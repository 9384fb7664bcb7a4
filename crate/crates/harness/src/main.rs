use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use aadl_harness::{aggregate_dir, run_experiment, run_single, ExperimentConfig, HarnessError, Method};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "aadl", version, about = "Plain vs accelerated vs accelerated+averaged training runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (seed, method) pair of an experiment config.
    Run {
        config: PathBuf,
        /// Replace the config's seed list; repeat for several seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Recompute per-method aggregates from the run CSVs in a directory.
    Aggregate { dir: PathBuf },
    /// Solve a small affine fixed-point problem with all three methods.
    DemoAffine,
}

fn load_checked(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let cfg = ExperimentConfig::load(path)?;
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run { config, seeds, output_dir } => {
            let mut cfg = load_checked(&config)?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let dir = cfg.resolve_output_dir(output_dir.as_deref());
            let (summary, results) = run_experiment(&cfg, &dir)?;
            println!("{} runs written to {}", results.len(), dir.display());
            for (method, s) in &summary.methods {
                let val = s.final_val_loss_median.map_or("-".into(), |v| format!("{v:.6e}"));
                print!("{method:>8}: median final val {val}");
                if let Some(it) = s.iterations_to_target_median {
                    print!(", median iterations to target {it}");
                }
                println!(", accepted {} rejected {}", s.accelerated_accepted, s.accelerated_rejected);
            }
        }
        Command::Validate { config } => {
            load_checked(&config)?;
            println!("{}: ok", config.display());
        }
        Command::Aggregate { dir } => {
            for (method, rows) in aggregate_dir(&dir)? {
                println!("{method}: {} rows -> {}_aggregate.csv", rows.len(), method.as_str());
            }
        }
        Command::DemoAffine => {
            let cfg = ExperimentConfig::demo_affine();
            let start = Instant::now();
            for method in Method::ALL {
                let run = run_single(&cfg, 0, method)?;
                match run.iterations_to_target {
                    Some(k) => println!("{method:>8}: {k} iterations to reach 1e-8"),
                    None => println!("{method:>8}: did not reach 1e-8 in {} iterations", run.records.len()),
                }
            }
            println!("elapsed {:.1} ms", start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
