//! Command implementations behind the `micmco` binary.

pub mod audit;
pub mod config;
pub mod metrics;
pub mod pareto;
pub mod sweep;

use std::path::{Path, PathBuf};

use crate::models::{load_checkpoint_for, read_checkpoint, save_checkpoint, ModelParams};
use crate::trainer::{evaluate_metrics, train, Dataset, TrainRun, TrainStatus};
use crate::{Error, Result};

pub use audit::{format_table, run_audit, AuditRow};
pub use config::{parse_config, read_raw_config, Config, RawConfig};
pub use metrics::{metrics_csv, METRICS_HEADER};
pub use pareto::{pareto_frontier, ParetoPoint};
pub use sweep::{parse_grid, run_sweep, Grid, SweepRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub run: TrainRun,
    /// Why training stopped early, if it did.
    pub abort: Option<String>,
    pub warnings: Vec<String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains and writes the resolved config, metrics and checkpoint into
/// `cfg.out_dir`. An aborted run still writes its last finite checkpoint.
pub fn run_to_dir(cfg: &Config, with_wall_time: bool) -> Result<RunReport> {
    let run = train(&cfg.train, &Dataset::synthetic(cfg.train.vocab_size))?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    write(&dir.join(METRICS_FILE), &metrics_csv(&run, with_wall_time)?)?;
    write(&dir.join(CHECKPOINT_FILE), &save_checkpoint(&run.params))?;
    let abort = match &run.status {
        TrainStatus::Completed => None,
        TrainStatus::Aborted { step, error } => Some(format!("aborted at step {step}: {error}")),
    };
    let warnings = metrics::metric_warnings(&run);
    Ok(RunReport {
        out_dir: dir.clone(),
        run,
        abort,
        warnings,
    })
}

pub fn cmd_train(config: &Path, seed: Option<u64>, with_wall_time: bool) -> Result<RunReport> {
    let mut raw = read_raw_config(config)?;
    if let Some(s) = seed {
        raw.set("seed", s.to_string())?;
    }
    run_to_dir(&raw.resolve()?, with_wall_time)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub nll: f64,
    pub avg_kl: f64,
    pub eval_k: usize,
    pub seed: u64,
}

/// Evaluates on the fixed held-out symbols. With a config, the checkpoint
/// must match its latent spec and the config's `eval_k`/`seed` are defaults.
pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    eval_k: Option<usize>,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let (params, cfg_k, cfg_seed) = match config {
        Some(path) => {
            let cfg = read_raw_config(path)?.resolve()?;
            let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
            let params = load_checkpoint_for(&bytes, &cfg.train.latent)?;
            if params.vocab_size() != cfg.train.vocab_size {
                return Err(Error::Checkpoint(format!(
                    "checkpoint vocabulary {} does not match config vocabulary {}",
                    params.vocab_size(),
                    cfg.train.vocab_size
                )));
            }
            (params, cfg.train.eval_k, cfg.train.seed)
        }
        None => (read_checkpoint(checkpoint)?, 100, 0),
    };
    let eval_k = eval_k.unwrap_or(cfg_k);
    if eval_k == 0 {
        return Err(Error::InvalidConfig("eval_k must be ≥ 1".into()));
    }
    let seed = seed.unwrap_or(cfg_seed);
    eval_params(&params, eval_k, seed)
}

pub fn eval_params(params: &ModelParams, eval_k: usize, seed: u64) -> Result<EvalReport> {
    let xs = Dataset::synthetic(params.vocab_size()).eval_set();
    let (nll, avg_kl) = evaluate_metrics(params, &xs, eval_k, seed, 0)?;
    Ok(EvalReport {
        nll,
        avg_kl,
        eval_k,
        seed,
    })
}

pub fn cmd_sweep(config: &Path, grid: &Path, jobs: usize, with_wall_time: bool) -> Result<Vec<SweepRow>> {
    let raw = read_raw_config(config)?;
    let text = std::fs::read_to_string(grid).map_err(|e| Error::io(grid, e))?;
    run_sweep(&raw, &parse_grid(&text)?, jobs, with_wall_time)
}

pub fn cmd_pareto(input: &Path, output: &Path) -> Result<Vec<ParetoPoint>> {
    let frontier = pareto_frontier(&pareto::read_points(input)?);
    write(output, &pareto::frontier_csv(&frontier)?)?;
    Ok(frontier)
}

pub fn cmd_audit(seed: u64) -> Result<Vec<AuditRow>> {
    run_audit(seed)
}
