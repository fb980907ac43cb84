//! JSON/markdown reports and the line-delimited training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use qptlab_core::model::Model;
use qptlab_core::train::{LogRecord, Observer};
use serde::Serialize;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes one JSON object per optimizer step and forwards warnings to the
/// logger. Checkpoints go to `<dir>/step-<n>` when a directory is set.
pub struct JsonlLog {
    out: BufWriter<File>,
    checkpoint_dir: Option<std::path::PathBuf>,
    config: serde_json::Value,
    error: Option<std::io::Error>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(JsonlLog {
            out: BufWriter::new(File::create(path)?),
            checkpoint_dir: None,
            config: serde_json::Value::Null,
            error: None,
        })
    }

    pub fn with_checkpoints(mut self, dir: &Path, config: serde_json::Value) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self.config = config;
        self
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

impl Observer for JsonlLog {
    fn on_step(&mut self, record: &LogRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("log record serializes");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
        if record.step % 50 == 0 {
            log::info!("step {} epoch {} loss {:.5} lr {:.3e}", record.step, record.epoch, record.loss, record.lr);
        }
    }

    fn on_warning(&mut self, message: &str) {
        log::warn!("{message}");
    }

    fn on_checkpoint(&mut self, model: &Model, step: usize) -> qptlab_core::Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            crate::checkpoint::save(&dir.join(format!("step-{step}")), model, step, self.config.clone())
                .map_err(|e| qptlab_core::Error::Data(format!("{e:#}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_lines_are_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = JsonlLog::create(&path).unwrap();
        for step in 0..3 {
            log.on_step(&LogRecord { step, epoch: 0, loss: 0.5 / (step + 1) as f64, lr: 1e-3 });
        }
        log.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let recs: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].loss, 0.5 / 3.0);
    }
}
