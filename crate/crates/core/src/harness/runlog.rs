//! Append-only JSON-lines run log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: u64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch {
        epoch: u64,
        step: u64,
        min_pairwise_target_distance: f64,
    },
}

/// Keeps every record in memory and mirrors it to a file when one is attached.
#[derive(Default)]
pub struct RunLog {
    records: Vec<LogRecord>,
    sink: Option<(PathBuf, File)>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), file)),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, file)) = &mut self.sink {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// `min_pairwise_target_distance` of every epoch record, in order.
    pub fn target_distances(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch {
                    min_pairwise_target_distance,
                    ..
                } => Some(*min_pairwise_target_distance),
                _ => None,
            })
            .collect()
    }
}
