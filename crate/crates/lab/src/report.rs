//! Results CSV: one metric per row under a fixed header.

use std::path::Path;

use crate::error::{write, FormatError, Result};

pub const HEADER: [&str; 7] = ["experiment", "seed", "epsilon", "norm", "method", "metric", "value"];
/// Written in place of a rate that has no defined value.
pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub seed: u64,
    pub epsilon: f64,
    pub norm: String,
    pub method: String,
    pub metric: String,
    pub value: Option<f64>,
}

impl ReportRow {
    /// Row for a clean (unattacked) metric.
    pub fn natural(experiment: &str, seed: u64, metric: impl Into<String>, value: Option<f64>) -> Self {
        ReportRow {
            experiment: experiment.into(),
            seed,
            epsilon: 0.0,
            norm: "none".into(),
            method: "none".into(),
            metric: metric.into(),
            value,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> FormatError {
    FormatError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// CSV bytes for `rows`, header first.
pub fn encode_report(rows: &[ReportRow]) -> Result<Vec<u8>> {
    if let Some(bad) = rows.iter().find(|r| r.value.is_some_and(|v| !v.is_finite())) {
        return Err(decorr_core::Error::Contract(format!("non-finite value for metric {}", bad.metric)).into());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mem = Path::new("<memory>");
    w.write_record(HEADER).map_err(|e| csv_err(mem, e))?;
    for r in rows {
        let value = r.value.map_or_else(|| UNDEFINED.to_string(), |v| v.to_string());
        w.write_record([
            r.experiment.as_str(),
            &r.seed.to_string(),
            &r.epsilon.to_string(),
            &r.norm,
            &r.method,
            &r.metric,
            &value,
        ])
        .map_err(|e| csv_err(mem, e))?;
    }
    w.into_inner().map_err(|e| csv_err(mem, e.into_error().into()))
}

/// Writes (or overwrites) the report.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write(path, &encode_report(rows)?)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let file = path.display().to_string();
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().ne(HEADER) {
        return Err(FormatError::parse(&file, 0, "unexpected header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let off = rec.position().map_or(0, |p| p.byte() as usize);
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| FormatError::parse(&file, off, format!("bad number {:?}", &rec[i])))
        };
        rows.push(ReportRow {
            experiment: rec[0].to_string(),
            seed: rec[1]
                .parse()
                .map_err(|_| FormatError::parse(&file, off, "bad seed"))?,
            epsilon: num(2)?,
            norm: rec[3].to_string(),
            method: rec[4].to_string(),
            metric: rec[5].to_string(),
            value: if &rec[6] == UNDEFINED { None } else { Some(num(6)?) },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![
            ReportRow::natural("pair", 1, "accuracy_m1", Some(0.975)),
            ReportRow {
                experiment: "pair".into(),
                seed: 1,
                epsilon: 0.1,
                norm: "linf".into(),
                method: "fgsm".into(),
                metric: "transfer_rate".into(),
                value: None,
            },
        ];
        write_report(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("experiment,seed,epsilon,norm,method,metric,value\n"));
        assert!(text.contains(",undefined"));
        assert_eq!(read_report(&p).unwrap(), rows);
        let mut bad = rows.clone();
        bad[0].value = Some(f64::NAN);
        assert!(write_report(&p, &bad).is_err());
    }
}
