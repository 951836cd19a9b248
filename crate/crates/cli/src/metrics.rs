//! Metric records and file emission.
//!
//! Per-step records go to a line-delimited JSON file, one record per line,
//! flushed per record. The serialized schema is:
//!
//! ```text
//! {"step":u64,"l_align":f64,"l_qa":f64,"total":f64,"train_acc":f64,
//!  "eval_acc":f64|null,"k":f64,"grad_clipped":bool}
//! ```
//!
//! Wall-clock time is carried on the in-memory record and printed to the
//! console but deliberately excluded from the file, so identically seeded
//! runs produce bitwise-identical metric files. Summary tables are
//! additionally written as CSV (header + rows).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One training-step record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub l_align: f64,
    pub l_qa: f64,
    pub total: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    /// Realized adaptive curvature for the step's batch.
    pub k: f64,
    pub grad_clipped: bool,
    /// Wall-clock milliseconds for the step; not serialized (see module docs).
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Streams records to a JSONL file, flushing after every record.
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
    path: PathBuf,
}

impl MetricsWriter {
    /// With `None`, emission is a no-op (records are still returned to the
    /// caller by the training loop).
    pub fn new(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self {
                out: None,
                path: PathBuf::new(),
            }),
            Some(p) => {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                            path: parent.to_path_buf(),
                            source,
                        })?;
                    }
                }
                let file = File::create(p).map_err(|source| CliError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Ok(Self {
                    out: Some(BufWriter::new(file)),
                    path: p.to_path_buf(),
                })
            }
        }
    }

    pub fn emit(&mut self, record: &RunRecord) -> CliResult<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(record).map_err(|e| CliError::Usage(e.to_string()))?;
            writeln!(out, "{line}").map_err(|source| CliError::Io {
                path: self.path.clone(),
                source,
            })?;
            out.flush().map_err(|source| CliError::Io {
                path: self.path.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Writes a summary CSV: header row plus stringified value rows.
pub fn write_summary_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
