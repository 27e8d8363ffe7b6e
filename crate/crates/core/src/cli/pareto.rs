//! Rate-distortion frontier: maximise `avg_kl`, minimise `nll`.

use std::cmp::Ordering;
use std::path::Path;

use super::metrics::{csv_err, csv_writer};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoPoint {
    pub avg_kl: f64,
    pub nll: f64,
    pub run_id: String,
}

/// `a` dominates `b`: at least as good on both axes and better on one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.avg_kl >= b.avg_kl && a.nll <= b.nll && (a.avg_kl > b.avg_kl || a.nll < b.nll)
}

/// The non-dominated subset, sorted by `avg_kl` ascending. Of points equal on
/// both coordinates only the first is kept; non-finite points are dropped.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut order: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].avg_kl.is_finite() && points[i].nll.is_finite())
        .collect();
    // Best-first sweep: highest KL, then lowest NLL, then first seen.
    order.sort_by(|&i, &j| {
        let (a, b) = (&points[i], &points[j]);
        b.avg_kl
            .partial_cmp(&a.avg_kl)
            .unwrap_or(Ordering::Equal)
            .then(a.nll.partial_cmp(&b.nll).unwrap_or(Ordering::Equal))
            .then(i.cmp(&j))
    });
    let mut best = f64::INFINITY;
    let mut kept = Vec::new();
    for i in order {
        if points[i].nll < best {
            best = points[i].nll;
            kept.push(points[i].clone());
        }
    }
    kept.reverse();
    kept
}

/// Reads `avg_kl` and `nll` (and `run_id` if present; otherwise the 1-based
/// row number). Rows with an empty `avg_kl` or `nll` — failed runs — are
/// skipped.
pub fn read_points(path: &Path) -> Result<Vec<ParetoPoint>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_points(file)
}

pub fn parse_points<R: std::io::Read>(input: R) -> Result<Vec<ParetoPoint>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(kl), Some(nll)) = (col("avg_kl"), col("nll")) else {
        return Err(Error::Csv(format!(
            "input needs `avg_kl` and `nll` columns, found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    };
    let id = col("run_id");
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        if field(kl).is_empty() || field(nll).is_empty() {
            continue;
        }
        let num = |c: usize| {
            field(c)
                .parse::<f64>()
                .map_err(|e| Error::Csv(format!("row {}: `{}`: {e}", row + 1, field(c))))
        };
        out.push(ParetoPoint {
            avg_kl: num(kl)?,
            nll: num(nll)?,
            run_id: id.map_or_else(|| (row + 1).to_string(), |c| field(c).to_string()),
        });
    }
    Ok(out)
}

pub fn frontier_csv(points: &[ParetoPoint]) -> Result<Vec<u8>> {
    let mut w = csv_writer(Vec::new());
    w.write_record(["avg_kl", "nll", "run_id"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.avg_kl.to_string(), p.nll.to_string(), p.run_id.clone()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<ParetoPoint> {
        v.iter()
            .enumerate()
            .map(|(i, &(avg_kl, nll))| ParetoPoint {
                avg_kl,
                nll,
                run_id: i.to_string(),
            })
            .collect()
    }

    fn coords(v: &[ParetoPoint]) -> Vec<(f64, f64)> {
        v.iter().map(|p| (p.avg_kl, p.nll)).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(
            coords(&pareto_frontier(&pts(&[(0.5, 9.3), (0.6, 9.25), (0.4, 9.4)]))),
            vec![(0.6, 9.25)]
        );
        assert_eq!(
            coords(&pareto_frontier(&pts(&[(0.8, 9.30), (0.2, 9.21)]))),
            vec![(0.2, 9.21), (0.8, 9.30)]
        );
    }

    #[test]
    fn ties_keep_first_seen() {
        let f = pareto_frontier(&pts(&[(0.3, 9.3), (0.3, 9.3), (0.3, 9.4)]));
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].run_id, "0");
    }

    #[test]
    fn missing_columns_and_failed_rows() {
        assert!(parse_points("nll,x\n1,2\n".as_bytes()).is_err());
        let p = parse_points("run_id,status,nll,avg_kl\nrun_000,ok,9.3,0.1\nrun_001,failed,,\n".as_bytes()).unwrap();
        assert_eq!(
            p,
            vec![ParetoPoint {
                avg_kl: 0.1,
                nll: 9.3,
                run_id: "run_000".into()
            }]
        );
        let p = parse_points("avg_kl,nll\n0.1,9.3\n".as_bytes()).unwrap();
        assert_eq!(p[0].run_id, "1");
    }

    #[test]
    fn csv_round_trip() {
        let f = pareto_frontier(&pts(&[(0.25, 9.2), (1.5, 9.31)]));
        let bytes = frontier_csv(&f).unwrap();
        assert_eq!(
            String::from_utf8(bytes.clone()).unwrap(),
            "avg_kl,nll,run_id\n0.25,9.2,0\n1.5,9.31,1\n"
        );
        assert_eq!(parse_points(bytes.as_slice()).unwrap(), f);
    }
}
