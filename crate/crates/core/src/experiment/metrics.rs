use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::encoder::KeptSet;
use crate::error::{Error, Result};
use crate::federation::RoundLog;

pub const HEADER: &str =
    "round,phase,kept_layers,loss_mean,bytes_down,bytes_up,flops_fwd,flops_bwd,peak_mem_words,comm_frac,compute_frac,mem_frac";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub phase: u64,
    pub kept_layers: Vec<usize>,
    pub loss_mean: f32,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub flops_fwd: u64,
    pub flops_bwd: u64,
    pub peak_mem_words: u64,
    pub comm_frac: f64,
    pub compute_frac: f64,
    pub mem_frac: f64,
}

impl From<&RoundLog> for MetricsRow {
    fn from(log: &RoundLog) -> Self {
        MetricsRow {
            round: log.round as u64,
            phase: log.phase as u64,
            kept_layers: log.kept.layers().to_vec(),
            loss_mean: log.loss_mean,
            bytes_down: log.resources.bytes_down,
            bytes_up: log.resources.bytes_up,
            flops_fwd: log.resources.flops_forward,
            flops_bwd: log.resources.flops_backward,
            peak_mem_words: log.resources.peak_memory_words,
            comm_frac: log.fractions.comm_frac,
            compute_frac: log.fractions.compute_frac,
            mem_frac: log.fractions.memory_frac,
        }
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let kept = KeptSet::new(self.kept_layers.clone()).map(|k| k.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.phase,
            kept,
            self.loss_mean,
            self.bytes_down,
            self.bytes_up,
            self.flops_fwd,
            self.flops_bwd,
            self.peak_mem_words,
            self.comm_frac,
            self.compute_frac,
            self.mem_frac
        )
    }

    /// Parses one data row; `line` is the 1-based line number for errors.
    pub fn parse(text: &str, line: usize) -> Result<Self> {
        let bad = |message: String| Error::Metrics { line, message };
        let fields: Vec<&str> = text.trim_end_matches('\r').split(',').collect();
        if fields.len() != 12 {
            return Err(bad(format!("expected 12 fields, found {}", fields.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
            s.parse().map_err(|_| Error::Metrics { line, message: format!("bad {name} `{s}`") })
        }
        let kept_layers =
            fields[2].split(';').map(|s| num::<usize>(s, "kept_layers", line)).collect::<Result<Vec<_>>>()?;
        Ok(MetricsRow {
            round: num(fields[0], "round", line)?,
            phase: num(fields[1], "phase", line)?,
            kept_layers,
            loss_mean: num(fields[3], "loss_mean", line)?,
            bytes_down: num(fields[4], "bytes_down", line)?,
            bytes_up: num(fields[5], "bytes_up", line)?,
            flops_fwd: num(fields[6], "flops_fwd", line)?,
            flops_bwd: num(fields[7], "flops_bwd", line)?,
            peak_mem_words: num(fields[8], "peak_mem_words", line)?,
            comm_frac: num(fields[9], "comm_frac", line)?,
            compute_frac: num(fields[10], "compute_frac", line)?,
            mem_frac: num(fields[11], "mem_frac", line)?,
        })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line.trim_end() != HEADER {
                return Err(Error::Metrics { line: 1, message: "unexpected header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        rows.push(MetricsRow::parse(&line, i + 1)?);
    }
    Ok(rows)
}

/// Appends one row per round; only the coordinator writes.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(MetricsWriter { file, path })
    }

    /// Reopens an existing file, dropping rows from `from_round` on so a
    /// resumed run rewrites them.
    pub fn resume(path: impl AsRef<Path>, from_round: u64) -> Result<Self> {
        let path = path.as_ref();
        let kept: Vec<MetricsRow> = read_metrics(path)?.into_iter().filter(|r| r.round < from_round).collect();
        let mut writer = Self::create(path)?;
        for row in &kept {
            writer.append(row)?;
        }
        Ok(writer)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> MetricsRow {
        MetricsRow {
            round: 7,
            phase: 3,
            kept_layers: vec![0, 2, 3],
            loss_mean: 2.125,
            bytes_down: 100,
            bytes_up: 40,
            flops_fwd: 12345,
            flops_bwd: 777,
            peak_mem_words: 999,
            comm_frac: 0.3,
            compute_frac: 1.0 / 3.0,
            mem_frac: 0.0625,
        }
    }

    #[test]
    fn rows_round_trip() {
        let r = row();
        assert_eq!(MetricsRow::parse(&r.to_csv(), 2).unwrap(), r);
        assert!(r.to_csv().starts_with("7,3,0;2;3,2.125,"));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&row()).unwrap();
        drop(w);
        std::fs::write(&path, format!("{}\n{}\n7,3,x,1,1,1,1,1,1,1,1,1\n", HEADER, row().to_csv())).unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Metrics { line: 3, .. })));
    }

    #[test]
    fn resume_truncates_later_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for round in 0..5 {
            w.append(&MetricsRow { round, ..row() }).unwrap();
        }
        drop(w);
        drop(MetricsWriter::resume(&path, 3).unwrap());
        let rounds: Vec<u64> = read_metrics(&path).unwrap().iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![0, 1, 2]);
    }
}
