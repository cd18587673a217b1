//! Training metrics as a CSV log.
//!
//! Fixed header `step,split,loss,top1,wall_ms`. Floats print with six
//! decimals so identical runs produce byte-identical files; deterministic
//! mode passes `wall_ms = 0` for the same reason.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,split,loss,top1,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub wall_ms: u64,
}

/// Appending CSV writer; creates the file and header eagerly.
#[derive(Debug)]
pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { file })
    }

    /// Opens an existing log for appending; the file must already carry the
    /// expected header.
    pub fn append_open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if text.lines().next() != Some(METRICS_HEADER) {
            return Err(Error::format(format!(
                "{} does not start with the metrics header",
                path.display()
            )));
        }
        let file = fs::OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if row.split.contains(',') || row.split.contains('\n') {
            return Err(Error::config(format!("split name '{}' breaks CSV", row.split)));
        }
        let mut line = String::new();
        write!(
            line,
            "{},{},{:.6},{:.6},{}",
            row.step, row.split, row.loss, row.top1, row.wall_ms
        )
        .expect("formatting into a String cannot fail");
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::format(format!(
                "metrics header is {other:?}, expected '{METRICS_HEADER}'"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::format(format!("metrics line {} is malformed", i + 2)));
        }
        let bad = |what: &str| Error::format(format!("metrics line {}: bad {what}", i + 2));
        rows.push(MetricsRow {
            step: parts[0].parse().map_err(|_| bad("step"))?,
            split: parts[1].to_string(),
            loss: parts[2].parse().map_err(|_| bad("loss"))?,
            top1: parts[3].parse().map_err(|_| bad("top1"))?,
            wall_ms: parts[4].parse().map_err(|_| bad("wall_ms"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_rows_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let rows = vec![
            MetricsRow {
                step: 0,
                split: "train".into(),
                loss: 3.871201,
                top1: 0.020833,
                wall_ms: 0,
            },
            MetricsRow {
                step: 50,
                split: "eval".into(),
                loss: 1.25,
                top1: 0.5,
                wall_ms: 0,
            },
        ];
        for r in &rows {
            w.append(r).unwrap();
        }
        drop(w);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,split,loss,top1,wall_ms\n"));
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn identical_runs_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        for p in [&a, &b] {
            let mut w = MetricsWriter::create(p).unwrap();
            w.append(&MetricsRow {
                step: 3,
                split: "train".into(),
                loss: 0.1234567891,
                top1: 1.0 / 3.0,
                wall_ms: 0,
            })
            .unwrap();
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        fs::write(&path, "step;split\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }
}
