//! Per-epoch metrics records, stored as JSON lines.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{CrldError, Result};

/// One line of a metrics file. Loss and mask fields are `None` on test
/// records, which come from plain evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub top1: f64,
    pub top5: f64,
    pub loss_ce: Option<f64>,
    pub loss_wv: Option<f64>,
    pub loss_cv: Option<f64>,
    pub loss_total: Option<f64>,
    pub mask_rate_w: Option<f64>,
    pub mask_rate_s: Option<f64>,
    pub lr: f64,
}

impl MetricsRecord {
    pub fn eval(epoch: usize, split: Split, top1: f64, top5: f64, lr: f64) -> Self {
        MetricsRecord {
            epoch,
            split: split.to_string(),
            top1,
            top5,
            loss_ce: None,
            loss_wv: None,
            loss_cv: None,
            loss_total: None,
            mask_rate_w: None,
            mask_rate_s: None,
            lr,
        }
    }

    pub fn is_split(&self, split: Split) -> bool {
        self.split == split.to_string()
    }
}

/// Append-only JSONL sink; every record is flushed as soon as it is written
/// so an interrupted run leaves a valid prefix.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Starts a fresh file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CrldError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Keeps the records with `epoch < keep_before` and appends after them.
    pub fn resume(path: &Path, keep_before: usize) -> Result<Self> {
        let kept: Vec<MetricsRecord> = if path.exists() {
            read_metrics(path)?
                .into_iter()
                .filter(|r| r.epoch < keep_before)
                .collect()
        } else {
            Vec::new()
        };
        let mut w = MetricsWriter::create(path)?;
        for r in &kept {
            w.write(r)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| CrldError::Format(e.to_string()))?;
        let path = &self.path;
        writeln!(self.file, "{line}").map_err(|e| CrldError::io(path, e))?;
        self.file.flush().map_err(|e| CrldError::io(path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| CrldError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| CrldError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| CrldError::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Appends one record to `path`, creating it if needed.
pub fn append_metrics(path: &Path, r: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CrldError::io(path, e))?;
    let line = serde_json::to_string(r).map_err(|e| CrldError::Format(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| CrldError::io(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CrldError::io(dir, e))
}
