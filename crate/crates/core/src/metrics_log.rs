//! Line-delimited JSON metric records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Collects JSON lines in memory and optionally mirrors them to a file.
#[derive(Default)]
pub struct MetricsLog {
    lines: Vec<String>,
    file: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            lines: Vec::new(),
            file: Some((BufWriter::new(f), path.to_path_buf())),
        })
    }

    /// Continues an existing log file, as when resuming a run.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            lines: Vec::new(),
            file: Some((BufWriter::new(f), path.to_path_buf())),
        })
    }

    pub fn record<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).expect("metric records serialize");
        if let Some((w, path)) = &mut self.file {
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}
