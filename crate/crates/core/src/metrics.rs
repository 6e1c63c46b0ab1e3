//! The structured metrics stream: typed records, in-memory capture, and a
//! line-delimited JSON writer.
//!
//! Training emits one record per event; the stream is append-only, so a
//! crashed run leaves a valid prefix. Records deliberately carry no wall
//! clock: the stream must be byte-identical across reruns of the same config
//! and seed. Wall-clock timings live in [`crate::trainers::TrainHistory`]
//! and whatever sidecar the harness keeps, never in these records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::TriggerEvent;
use crate::Result;

/// Which regime the trainer is in when a record is emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Fast single-step training (also the whole run for single-step
    /// strategies).
    Warmup,
    /// Multi-step PGD training: the pgd strategy, or the post-switch phase
    /// of the warmup strategy.
    Pgd,
    /// Inside a detector-prescribed recovery window.
    Recovery,
}

/// One record of the stream. Serialized as a single JSON line tagged by
/// `event`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsRecord {
    /// Periodic accuracy trace on the fixed evaluation subset.
    Trace {
        epoch: usize,
        batch: usize,
        phase: Phase,
        lr: f32,
        epsilon: f32,
        clean: f32,
        robust: f32,
        /// Label of the attack behind `robust`, e.g. `pgd10`.
        attack: String,
        /// Optional and absent from deterministic streams; only sidecar
        /// tooling ever fills it.
        #[serde(skip_serializing_if = "Option::is_none")]
        wall_ms: Option<u64>,
    },
    /// One detector reading at its cadence.
    DetectorCheck { epoch: usize, batch: usize, reading: f32, triggered: bool },
    /// A detector trigger, duplicated from the check for easy filtering.
    Trigger { epoch: usize, batch: usize, previous: f32, observed: f32 },
    /// End-of-epoch summary and validation scores.
    EpochEnd {
        epoch: usize,
        mean_loss: f32,
        lr: f32,
        epsilon: f32,
        clean: f32,
        robust: f32,
    },
    /// One final-evaluation result, appended after training by the attack
    /// battery: `attack` is the battery name (`clean` for the unattacked
    /// pass), `accuracy` the fraction of `n_examples` scored correct.
    Eval { attack: String, accuracy: f32, n_examples: usize },
}

impl MetricsRecord {
    pub fn trigger(t: &TriggerEvent) -> Self {
        MetricsRecord::Trigger {
            epoch: t.epoch,
            batch: t.batch,
            previous: t.previous,
            observed: t.observed,
        }
    }

    /// `(epoch, batch)` position used for the stream-ordering invariant.
    /// Epoch-end records sort after every batch of their epoch; final
    /// evaluation records sort after everything.
    pub fn position(&self) -> (usize, usize) {
        match *self {
            MetricsRecord::Trace { epoch, batch, .. }
            | MetricsRecord::DetectorCheck { epoch, batch, .. }
            | MetricsRecord::Trigger { epoch, batch, .. } => (epoch, batch),
            MetricsRecord::EpochEnd { epoch, .. } => (epoch, usize::MAX),
            MetricsRecord::Eval { .. } => (usize::MAX, usize::MAX),
        }
    }
}

/// Destination for records as they are produced.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Collects records in memory (tests, sweeps).
#[derive(Default)]
pub struct VecSink(pub Vec<MetricsRecord>);

impl MetricsSink for VecSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

/// Writes one JSON object per line, flushing after every record so a killed
/// process leaves a parseable prefix.
pub struct JsonlSink {
    writer: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlSink { writer: BufWriter::new(File::create(path)?) })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| crate::Error::input(format!("unserializable record: {e}")))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Reads a JSONL stream back; rejects malformed lines with their number.
pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| {
            crate::Error::input(format!("bad metrics record on line {}: {e}", i + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}
