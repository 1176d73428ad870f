//! CSV and JSON artifacts. Floats are written as `{:.16e}` so files round-trip
//! bit-exactly and identical runs produce identical bytes.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::domain::PathField;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stats::Estimate;

pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Writes `header` then `rows`; an empty row set still yields the header line.
pub fn write_table<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", header.len()),
                found: format!("{} columns", row.len()),
            });
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRAJECTORY_HEADER: [&str; 5] = ["replicate", "t", "component", "xi_index", "value"];

pub fn trajectory_rows<T: Real>(replicate: u64, path: &PathField<T>) -> Vec<Vec<String>> {
    let d = *path.domain();
    let mut out = Vec::with_capacity((path.n_steps() + 1) * d.field_len());
    for (m, f) in path.frames().iter().enumerate() {
        let t = fmt_f(path.time(m).as_f64());
        for c in 0..d.components {
            for (i, v) in f.component(c).iter().enumerate() {
                out.push(vec![replicate.to_string(), t.clone(), c.to_string(), i.to_string(), fmt_f(v.as_f64())]);
            }
        }
    }
    out
}

pub fn write_trajectories<T: Real>(path: &Path, runs: &[(u64, &PathField<T>)]) -> Result<()> {
    write_table(path, &TRAJECTORY_HEADER, runs.iter().flat_map(|(r, p)| trajectory_rows(*r, p)))
}

pub const ESTIMATE_HEADER: [&str; 6] = ["name", "p_hat", "stderr", "n", "flagged_frac", "eps_log_p"];

pub fn write_estimates(path: &Path, estimates: &[Estimate]) -> Result<()> {
    write_table(
        path,
        &ESTIMATE_HEADER,
        estimates.iter().map(|e| {
            vec![
                e.name.clone(),
                fmt_f(e.value),
                fmt_f(e.stderr),
                e.n.to_string(),
                fmt_f(e.flagged_fraction),
                fmt_opt(e.eps_log),
            ]
        }),
    )
}

/// Brownian coordinates of a control, one row per (step, coordinate).
pub fn write_coords<T: Real>(path: &Path, dt: T, coords: &[Vec<T>]) -> Result<()> {
    write_table(
        path,
        &["t", "coordinate", "value"],
        coords.iter().enumerate().flat_map(|(m, row)| {
            let t = fmt_f((dt * T::from_usize_lossy(m)).as_f64());
            row.iter()
                .enumerate()
                .map(move |(j, v)| vec![t.clone(), j.to_string(), fmt_f(v.as_f64())])
                .collect::<Vec<_>>()
        }),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub config: Value,
    pub config_hash: String,
    pub seed: u64,
    pub results: Value,
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainSpec;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, 0.0] {
            assert_eq!(fmt_f(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn empty_table_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_estimates(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "name,p_hat,stderr,n,flagged_frac,eps_log_p\n");
    }

    #[test]
    fn trajectory_layout() {
        let d = DomainSpec::new(1.0, 3, 3, 2).unwrap();
        let p = PathField::from_fn(d, 0.5, 2, |t, c, xi| t + c as f64 + xi).unwrap();
        let rows = trajectory_rows(4, &p);
        assert_eq!(rows.len(), 3 * 6);
        assert_eq!(rows[4][0], "4");
        assert_eq!(rows[4][2], "1");
        assert_eq!(rows[4][3], "1");
        let v: f64 = rows[4][4].parse().unwrap();
        assert!((v - (1.0 + 0.5)).abs() < 1e-15);
    }
}
