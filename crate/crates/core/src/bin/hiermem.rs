//! Command-line entry point.
//!
//! Exit status: 0 on success, 2 for an invalid config, 3 when training
//! produced a non-finite loss, 1 for any other failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiermem::error::Error;
use hiermem::harness::{self, load_config, RunConfig, RunOptions, Task};

#[derive(Parser)]
#[command(
    name = "hiermem",
    version,
    about = "Hierarchical embeddings with structural attention memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of the configured task.
    Run(Common),
    /// Sequence-length sweep with and without memory.
    Bench(Common),
    /// Full model against the parameter-matched static baseline.
    ShiftEval(Common),
    /// Layer-similarity and error-histogram tables from saved checkpoints.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Added to every configured seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, RunOptions), Error> {
        let cfg = load_config(&self.config).map_err(|e| match e {
            Error::Io(io) => Error::Config {
                line: 1,
                message: format!("cannot read {}: {io}", self.config.display()),
            },
            other => other,
        })?;
        let opts = RunOptions {
            out: self.out.clone(),
            seed_offset: self.seed_offset,
            ..Default::default()
        };
        Ok((cfg, opts))
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(c) => {
            let (cfg, opts) = c.load()?;
            let manifest = harness::run(&cfg, &opts)?;
            println!(
                "{} files written to {}",
                manifest.metric_files.len(),
                opts.output_dir(&cfg).display()
            );
        }
        Command::Bench(c) => {
            let (cfg, opts) = c.load()?;
            let cfg = RunConfig {
                task: Task::LengthBench,
                ..cfg
            };
            harness::run(&cfg, &opts)?;
            println!("benchmark written to {}", opts.output_dir(&cfg).display());
        }
        Command::ShiftEval(c) => {
            let (cfg, opts) = c.load()?;
            let r = harness::shift_eval(&cfg, &opts)?;
            println!("variant,seed,accuracy,segment_range,param_count");
            for row in &r.rows {
                println!(
                    "{},{},{:.4},{:.4},{}",
                    row.variant, row.seed, row.accuracy, row.segment_range, row.param_count
                );
            }
            println!(
                "median accuracy full {:.4} baseline {:.4}; median full segment range {:.4}",
                r.full_median_accuracy, r.baseline_median_accuracy, r.full_median_range
            );
        }
        Command::Report(c) => {
            let (cfg, opts) = c.load()?;
            for path in harness::report(&cfg, &opts)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                Error::NonFinite(_) => 3,
                _ => 1,
            })
        }
    }
}
