use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::pretrain::StepMetrics;
use crate::error::{Error, Result};

/// Append-only JSON-lines sink, flushed after every record.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    /// Opens for appending after dropping any records past `keep_through`.
    pub fn resume(path: &Path, keep_through: u64) -> Result<Self> {
        let kept: Vec<StepMetrics> = if path.exists() {
            read_metrics(path)?.into_iter().filter(|m| m.step <= keep_through).collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for m in &kept {
            w.write(m)?;
        }
        drop(w);
        Ok(Self { out: BufWriter::new(OpenOptions::new().append(true).open(path)?) })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m).map_err(|e| Error::Io(e.into()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = fs::File::open(path)?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.is_empty()))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("bad metrics record: {e}"),
            })
        })
        .collect()
}
