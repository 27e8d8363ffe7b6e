use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use micmco::cli;

#[derive(Parser)]
#[command(
    name = "micmco",
    version,
    about = "Mutual-information-augmented Monte-Carlo objectives"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes config.txt, metrics.csv and checkpoint.bin to out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Record elapsed seconds in the metrics (makes output non-reproducible).
        #[arg(long)]
        wall_time: bool,
    },
    /// Estimate NLL and average KL of a checkpoint on the held-out symbols.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Check the checkpoint against this config and take eval_k/seed from it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        eval_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run per grid point; writes run_NNN/ directories and sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        wall_time: bool,
    },
    /// Extract the (max avg_kl, min nll) frontier from a CSV.
    Pareto {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the exact-enumeration property checks.
    Audit {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(args: Args) -> micmco::Result<ExitCode> {
    match args.command {
        Command::Train {
            config,
            seed,
            wall_time,
        } => {
            let report = cli::cmd_train(&config, seed, wall_time)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(last) = report.run.history.last() {
                println!("step {} nll {} avg_kl {}", last.step, last.nll, last.avg_kl);
            }
            println!("wrote {}", report.out_dir.display());
            if let Some(msg) = report.abort {
                eprintln!("error: {msg}; last finite checkpoint written");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval {
            checkpoint,
            config,
            eval_k,
            seed,
        } => {
            let r = cli::cmd_eval(&checkpoint, config.as_deref(), eval_k, seed)?;
            println!("nll,avg_kl,eval_k,seed");
            println!("{},{},{},{}", r.nll, r.avg_kl, r.eval_k, r.seed);
        }
        Command::Sweep {
            config,
            grid,
            jobs,
            wall_time,
        } => {
            let rows = cli::cmd_sweep(&config, &grid, jobs, wall_time)?;
            let mut ok = true;
            for row in &rows {
                match &row.outcome {
                    Ok(r) if r.abort.is_none() => println!("{}: ok", row.run_id),
                    Ok(r) => {
                        ok = false;
                        println!("{}: {}", row.run_id, r.abort.as_deref().unwrap_or_default());
                    }
                    Err(e) => {
                        ok = false;
                        println!("{}: failed: {e}", row.run_id);
                    }
                }
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Pareto { input, output } => {
            let f = cli::cmd_pareto(&input, &output)?;
            println!("{} frontier points written to {}", f.len(), output.display());
        }
        Command::Audit { seed } => {
            let rows = cli::cmd_audit(seed)?;
            print!("{}", cli::format_table(&rows));
            if rows.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
