//! Run artifacts: per-epoch CSV curves and JSON summaries.
//!
//! Numbers are written with Rust's shortest-round-trip float formatting, so
//! a rerun with the same seed produces byte-identical files. Anything
//! nondeterministic (wall-clock time, host names) stays out of these files
//! on purpose.

use crate::Result;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_err,test_err";

pub fn epochs_to_csv(rows: &[EpochRow]) -> String {
    let mut out = String::with_capacity(32 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.train_err, r.test_err);
    }
    out
}

pub fn write_epoch_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, epochs_to_csv(rows))?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_string(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| crate::Error::input(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

/// Writes the canonical sorted settings block next to a run's outputs.
pub fn write_config_echo(path: &Path, echo: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, echo)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![
            EpochRow { epoch: 0, train_loss: 0.6931471805599453, train_err: 0.5, test_err: 0.5 },
            EpochRow { epoch: 1, train_loss: 0.25, train_err: 0.125, test_err: 0.0 },
        ];
        let csv = epochs_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("0,0.6931471805599453,0.5,0.5"));
        assert_eq!(lines.next(), Some("1,0.25,0.125,0"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn csv_is_reproducible_byte_for_byte() {
        let rows = vec![EpochRow {
            epoch: 3,
            train_loss: 1.0 / 3.0,
            train_err: 0.1 + 0.2,
            test_err: f64::MIN_POSITIVE,
        }];
        assert_eq!(epochs_to_csv(&rows), epochs_to_csv(&rows.clone()));
        // Shortest-round-trip formatting parses back to the same bits.
        let line = epochs_to_csv(&rows);
        let cell = line.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        assert_eq!(cell.parse::<f64>().unwrap().to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn json_round_trips_structs() {
        #[derive(Serialize)]
        struct S {
            a: u32,
            b: f64,
        }
        let s = to_json_string(&S { a: 1, b: 0.5 }).unwrap();
        assert!(s.contains("\"a\": 1"));
        assert!(s.ends_with('\n'));
    }

    #[test]
    fn files_land_in_created_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep/nested/curve.csv");
        write_epoch_csv(
            &path,
            &[EpochRow { epoch: 0, train_loss: 1.0, train_err: 1.0, test_err: 1.0 }],
        )
        .unwrap();
        assert!(path.exists());
    }
}
