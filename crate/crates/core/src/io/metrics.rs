//! Append-only JSONL metric streams.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Seconds since the writer opened; `null` when timing is disabled so
    /// that files from identical runs hash identically.
    pub wall_time: Option<f64>,
    pub phase: String,
    pub metrics: BTreeMap<String, f64>,
    /// Free-form provenance such as dataset hashes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub info: BTreeMap<String, String>,
}

impl MetricRecord {
    pub fn new(phase: impl Into<String>, step: u64) -> Self {
        Self {
            step,
            wall_time: None,
            phase: phase.into(),
            metrics: BTreeMap::new(),
            info: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }
}

/// Writes one complete line per record and flushes it, so every prefix of
/// the file that ends in a newline is valid JSONL.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
    started: Option<Instant>,
    last_step: BTreeMap<String, u64>,
}

impl MetricsWriter {
    /// Truncates `path`.
    pub fn create(path: &Path, wall_time: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            file: File::create(path)?,
            path: path.to_path_buf(),
            started: wall_time.then(Instant::now),
            last_step: BTreeMap::new(),
        })
    }

    /// Appends to `path`, continuing the step order found in it.
    pub fn append(path: &Path, wall_time: bool) -> Result<Self> {
        let mut last_step = BTreeMap::new();
        if path.exists() {
            for r in read_metrics(path)? {
                last_step.insert(r.phase.clone(), r.step);
            }
        }
        Ok(Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
            path: path.to_path_buf(),
            started: wall_time.then(Instant::now),
            last_step,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, mut record: MetricRecord) -> Result<()> {
        if let Some((k, v)) = record.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::config(format!("metric {k} is not finite ({v})")));
        }
        if let Some(&prev) = self.last_step.get(&record.phase) {
            if record.step < prev {
                return Err(Error::config(format!(
                    "phase {}: step {} after {prev}",
                    record.phase, record.step
                )));
            }
        }
        record.wall_time = self.started.map(|t| t.elapsed().as_secs_f64());
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.last_step.insert(record.phase, record.step);
        Ok(())
    }
}

/// Reads every complete line; a trailing partial line (a writer caught
/// mid-append) is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_prefix_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p, false).unwrap();
        for s in 0..5 {
            w.write(MetricRecord::new("train", s).with("loss", 1.0 / (s + 1) as f64))
                .unwrap();
        }
        let bytes = fs::read(&p).unwrap();
        for cut in 0..=bytes.len() {
            let q = dir.path().join("cut.jsonl");
            fs::write(&q, &bytes[..cut]).unwrap();
            let n_lines = bytes[..cut].iter().filter(|&&b| b == b'\n').count();
            assert_eq!(read_metrics(&q).unwrap().len(), n_lines);
        }
    }

    #[test]
    fn steps_monotone_per_phase() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p, false).unwrap();
        w.write(MetricRecord::new("a", 3)).unwrap();
        w.write(MetricRecord::new("b", 0)).unwrap();
        assert!(w.write(MetricRecord::new("a", 2)).is_err());
        drop(w);
        let mut w = MetricsWriter::append(&p, false).unwrap();
        assert!(w.write(MetricRecord::new("a", 1)).is_err());
        w.write(MetricRecord::new("a", 4)).unwrap();
        assert_eq!(read_metrics(&p).unwrap().len(), 3);
    }

    #[test]
    fn rejects_nan_and_nulls_time() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p, false).unwrap();
        assert!(w
            .write(MetricRecord::new("a", 0).with("x", f64::NAN))
            .is_err());
        w.write(MetricRecord::new("a", 0).with("x", 1.0)).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .contains("\"wall_time\":null"));
    }
}
