//! JSON-lines run log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct LogRecord<'a> {
    pub phase: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub message: &'a str,
}

/// Appends one JSON object per line; also mirrors records to `log`.
pub struct RunLog {
    file: Option<File>,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self { file: Some(OpenOptions::new().create(true).append(true).open(path)?) })
    }

    /// Log that only forwards to `log`.
    pub fn disabled() -> Self {
        Self { file: None }
    }

    pub fn record(&mut self, phase: &str, step: Option<u64>, loss: Option<f64>, message: &str) {
        let rec = LogRecord { phase, step, loss, message };
        let line = serde_json::to_string(&rec).unwrap_or_default();
        log::info!("{line}");
        if let Some(f) = &mut self.file {
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("run log write failed: {e}");
            }
        }
    }

    pub fn event(&mut self, phase: &str, message: &str) {
        self.record(phase, None, None, message);
    }

    pub fn loss(&mut self, phase: &str, step: u64, loss: f64) {
        self.record(phase, Some(step), Some(loss), "train");
    }
}
