//! Grid sweeps over λ, α, learning rate and seed.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::RawConfig;
use super::metrics::{csv_err, csv_writer};
use super::{run_to_dir, RunReport};
use crate::{Error, Result};

pub const GRID_KEYS: [&str; 4] = ["lambda", "alpha", "lr", "seed"];

pub const SWEEP_HEADER: [&str; 14] = [
    "run_id",
    "status",
    "step",
    "nll",
    "avg_kl",
    "lambda",
    "alpha",
    "lr",
    "base",
    "k_lik",
    "k_mi",
    "seed",
    "wall_time_s",
    "message",
];

/// Lists of values per key, as given. Absent keys keep the base config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

/// One grid point: overrides in key order and the derived run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub overrides: Vec<(String, String)>,
}

impl GridPoint {
    pub fn run_id(&self) -> String {
        format!("run_{:03}", self.index)
    }
}

/// Parses lines `key = v1, v2, ...` (whitespace also separates values).
pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut grid = Grid::default();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |key: &str, msg: &str| Error::ConfigLine {
            line: n,
            key: key.to_string(),
            msg: msg.to_string(),
        };
        let Some((key, values)) = content.split_once('=') else {
            return Err(err(content, "expected `key = v1, v2, ...`"));
        };
        let key = key.trim();
        if !GRID_KEYS.contains(&key) {
            return Err(err(key, "not a grid key (lambda, alpha, lr, seed)"));
        }
        if grid.axes.iter().any(|a| a.0 == key) {
            return Err(err(key, "duplicate grid key"));
        }
        let values: Vec<String> = values
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .collect();
        if values.is_empty() {
            return Err(err(key, "empty value list"));
        }
        grid.axes.push((key.to_string(), values));
    }
    if grid.axes.is_empty() {
        return Err(Error::InvalidConfig("grid has no axes".into()));
    }
    // Fixed nesting, outermost first, whatever the file order.
    grid.axes.sort_by_key(|a| GRID_KEYS.iter().position(|k| *k == a.0));
    Ok(grid)
}

impl Grid {
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.1.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product with the first axis outermost.
    pub fn points(&self) -> Vec<GridPoint> {
        (0..self.len())
            .map(|index| {
                let mut rest = index;
                let mut overrides = vec![(String::new(), String::new()); self.axes.len()];
                for (slot, (key, values)) in self.axes.iter().enumerate().rev() {
                    overrides[slot] = (key.clone(), values[rest % values.len()].clone());
                    rest /= values.len();
                }
                GridPoint { index, overrides }
            })
            .collect()
    }
}

/// Applies a grid point to the base config. Without a seed axis the run
/// seed is `base seed + grid index`; a seed axis sets it directly.
pub fn point_config(base: &RawConfig, point: &GridPoint, out_dir: &Path) -> Result<RawConfig> {
    let mut raw = base.clone();
    for (k, v) in &point.overrides {
        raw.set(k, v.clone())?;
    }
    if !point.overrides.iter().any(|(k, _)| k == "seed") {
        let base_seed: u64 = match base.get("seed") {
            Some(s) => s
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("seed `{s}`: {e}")))?,
            None => 0,
        };
        raw.set("seed", (base_seed + point.index as u64).to_string())?;
    }
    raw.set("out_dir", out_dir.join(point.run_id()).display().to_string())?;
    Ok(raw)
}

#[derive(Debug)]
pub struct SweepRow {
    pub run_id: String,
    pub outcome: std::result::Result<RunReport, String>,
}

/// Runs every grid point, up to `jobs` at a time, and writes `sweep.csv`
/// under the base `out_dir` once all runs have settled. A failing run is
/// recorded and does not stop the sweep.
pub fn run_sweep(base: &RawConfig, grid: &Grid, jobs: usize, with_wall_time: bool) -> Result<Vec<SweepRow>> {
    // The base alone may be incomplete (e.g. α supplied by the grid).
    let out_dir = std::path::PathBuf::from(base.get("out_dir").unwrap_or("out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let points = grid.points();
    let slots: Vec<Mutex<Option<SweepRow>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(point) = points.get(i) else { break };
                let outcome = point_config(base, point, &out_dir)
                    .and_then(|raw| raw.resolve())
                    .and_then(|cfg| run_to_dir(&cfg, with_wall_time))
                    .map_err(|e| e.to_string());
                *slots[i].lock().expect("slot lock") = Some(SweepRow {
                    run_id: point.run_id(),
                    outcome,
                });
            });
        }
    });
    let rows: Vec<SweepRow> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every point ran"))
        .collect();
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, sweep_csv(&rows, with_wall_time)?).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], with_wall_time: bool) -> Result<Vec<u8>> {
    let mut w = csv_writer(Vec::new());
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for row in rows {
        let mut fields = vec![row.run_id.clone()];
        match &row.outcome {
            Err(msg) => {
                fields.push("failed".into());
                fields.extend(std::iter::repeat_n(String::new(), SWEEP_HEADER.len() - 3));
                fields.push(msg.clone());
            }
            Ok(report) => {
                let run = &report.run;
                let cfg = &run.config;
                let o = &cfg.objective;
                let (status, message) = match &report.abort {
                    None => ("ok", String::new()),
                    Some(msg) => ("aborted", msg.clone()),
                };
                fields.push(status.into());
                match run.history.last() {
                    Some(r) => fields.extend([r.step.to_string(), r.nll.to_string(), r.avg_kl.to_string()]),
                    None => fields.extend([String::new(), String::new(), String::new()]),
                }
                fields.extend([
                    o.spec.lambda.to_string(),
                    o.spec.alpha.to_string(),
                    cfg.lr.to_string(),
                    o.base.to_string(),
                    o.k_lik.to_string(),
                    o.k_mi.to_string(),
                    cfg.seed.to_string(),
                    match (with_wall_time, run.wall_time_s.last()) {
                        (true, Some(w)) => format!("{w:.3}"),
                        _ => String::new(),
                    },
                    message,
                ]);
            }
        }
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_and_order() {
        let g = parse_grid("seed = 1 2\nlambda = 0, 0.5\n").unwrap();
        assert_eq!(g.len(), 4);
        let pts: Vec<Vec<String>> = g
            .points()
            .iter()
            .map(|p| p.overrides.iter().map(|o| o.1.clone()).collect())
            .collect();
        assert_eq!(
            pts,
            vec![vec!["0", "1"], vec!["0", "2"], vec!["0.5", "1"], vec!["0.5", "2"]]
        );
        assert!(parse_grid("lambda =").is_err());
        assert!(parse_grid("lambda = ,").is_err());
        assert!(parse_grid("steps = 1").is_err());
        assert!(parse_grid("# nothing\n").is_err());
    }

    #[test]
    fn seeds_derive_from_the_grid_index() {
        let base = RawConfig::parse("seed = 10").unwrap();
        let g = parse_grid("lambda = 0.1 0.2 0.3").unwrap();
        let seeds: Vec<String> = g
            .points()
            .iter()
            .map(|p| {
                point_config(&base, p, Path::new("o"))
                    .unwrap()
                    .get("seed")
                    .unwrap()
                    .to_string()
            })
            .collect();
        assert_eq!(seeds, vec!["10", "11", "12"]);
        let g = parse_grid("seed = 5 7").unwrap();
        let p = &g.points()[1];
        assert_eq!(point_config(&base, p, Path::new("o")).unwrap().get("seed"), Some("7"));
    }
}
