//! Long-form training log, written row by row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const RUNLOG_HEADER: &str = "epoch,split,metric,value";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.split, self.metric, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Running,
    Completed,
    NanAbort,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Completed => "completed",
            RunStatus::NanAbort => "nan_abort",
        }
    }
}

/// Rows kept in memory and, when a path is given, appended to a CSV file
/// and flushed after every row.
#[derive(Debug)]
pub struct RunLog {
    rows: Vec<LogRow>,
    status: RunStatus,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog {
            rows: Vec::new(),
            status: RunStatus::Running,
            file: None,
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "{RUNLOG_HEADER}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            rows: Vec::new(),
            status: RunStatus::Running,
            file: Some((path.to_path_buf(), w)),
        })
    }

    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if epoch < last.epoch {
                return Err(Error::invalid("runlog", format!("epoch {epoch} after {}", last.epoch)));
            }
        }
        let row = LogRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        };
        if let Some((path, w)) = &mut self.file {
            writeln!(w, "{}", row.csv()).and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    /// Records the terminal status as a final `status` row.
    pub fn finish(&mut self, epoch: usize, status: RunStatus, steps: u64) -> Result<()> {
        self.push(epoch, "status", status.name(), steps as f64)?;
        self.status = status;
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    /// Values of one `(split, metric)` series in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_mirrors_memory_after_every_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runlog.csv");
        let mut log = RunLog::create(&path).unwrap();
        log.push(0, "eval", "loss", 1.5).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), log.to_csv());
        log.push(2, "train", "loss", 0.25).unwrap();
        log.finish(2, RunStatus::Completed, 40).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), log.to_csv());
        assert_eq!(log.to_csv().lines().last(), Some("2,status,completed,40"));
    }

    #[test]
    fn epochs_are_monotone() {
        let mut log = RunLog::in_memory();
        log.push(3, "eval", "loss", 1.0).unwrap();
        assert!(log.push(2, "eval", "loss", 1.0).is_err());
        assert_eq!(log.series("eval", "loss"), vec![(3, 1.0)]);
    }
}
