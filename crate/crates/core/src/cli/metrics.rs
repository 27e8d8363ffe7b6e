//! Metrics CSV emission.

use crate::trainer::{MetricRecord, TrainRun};
use crate::{Error, Result};

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "nll",
    "avg_kl",
    "lambda",
    "alpha",
    "base",
    "k_lik",
    "k_mi",
    "seed",
    "wall_time_s",
];

/// Values below this are flagged as more than Monte-Carlo noise.
pub const AVG_KL_FLOOR: f64 = -0.02;

/// One row in column order. Floats use Rust's shortest round-trip
/// formatting, which never depends on the locale.
pub fn metrics_fields(run: &TrainRun, record: &MetricRecord, wall_time_s: Option<f64>) -> Vec<String> {
    let o = &run.config.objective;
    vec![
        record.step.to_string(),
        record.nll.to_string(),
        record.avg_kl.to_string(),
        record.lambda.to_string(),
        record.alpha.to_string(),
        o.base.to_string(),
        o.k_lik.to_string(),
        o.k_mi.to_string(),
        record.seed.to_string(),
        wall_time_s.map(|w| format!("{w:.3}")).unwrap_or_default(),
    ]
}

/// The whole metrics file. Wall-clock times are left empty unless asked
/// for, so that repeated runs are byte-identical.
pub fn metrics_csv(run: &TrainRun, with_wall_time: bool) -> Result<Vec<u8>> {
    let mut w = csv_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for (i, record) in run.history.iter().enumerate() {
        let wall = with_wall_time.then(|| run.wall_time_s[i]);
        w.write_record(metrics_fields(run, record, wall)).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.to_string()))
}

/// Warnings for rows outside the expected range.
pub fn metric_warnings(run: &TrainRun) -> Vec<String> {
    let mut out = Vec::new();
    for r in &run.history {
        if r.avg_kl < AVG_KL_FLOOR {
            out.push(format!("step {}: avg_kl {} is below {AVG_KL_FLOOR}", r.step, r.avg_kl));
        }
        if r.nll < 0.0 {
            out.push(format!("step {}: negative nll {} for discrete data", r.step, r.nll));
        }
    }
    out
}

pub(crate) fn csv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}
