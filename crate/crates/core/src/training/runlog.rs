//! Line-delimited JSON training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

pub trait RunLog {
    fn record(&mut self, stage: &str, step: usize, loss: f64, lr: f64) -> Result<()>;
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Discards every event.
pub struct NullLog;

impl RunLog for NullLog {
    fn record(&mut self, _: &str, _: usize, _: f64, _: f64) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemoryLog {
    pub events: Vec<LogEvent>,
}

impl RunLog for MemoryLog {
    fn record(&mut self, stage: &str, step: usize, loss: f64, lr: f64) -> Result<()> {
        self.events.push(LogEvent {
            step,
            stage: stage.to_string(),
            loss,
            lr,
            timestamp: now(),
        });
        Ok(())
    }
}

pub struct JsonlRunLog {
    out: BufWriter<File>,
}

impl JsonlRunLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl RunLog for JsonlRunLog {
    fn record(&mut self, stage: &str, step: usize, loss: f64, lr: f64) -> Result<()> {
        let ev = LogEvent {
            step,
            stage: stage.to_string(),
            loss,
            lr,
            timestamp: now(),
        };
        serde_json::to_writer(&mut self.out, &ev)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
