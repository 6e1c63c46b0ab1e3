//! Catastrophic-overfitting watchdog.
//!
//! Training feeds this detector a cheap robust-accuracy reading at a fixed
//! batch cadence. A drop of more than `threshold` between consecutive
//! readings trips the alarm, after which the detector prescribes full PGD
//! for the next `recovery_len` training batches before handing control back
//! to the fast single-step attack.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which attack the trainer should use for the next batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackChoice {
    /// The fast path: single-step attack with random initialization.
    Fast,
    /// The recovery path: multi-step PGD.
    Pgd,
}

/// One alarm, recorded when a check sees the robust signal collapse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub epoch: usize,
    pub batch: usize,
    /// Reading at the previous check.
    pub previous: f32,
    /// Reading that tripped the alarm.
    pub observed: f32,
}

/// Drop detector with a bounded recovery window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detector {
    threshold: f32,
    cadence: usize,
    recovery_len: usize,
    last_reading: Option<f32>,
    recovery_remaining: usize,
    triggers: Vec<TriggerEvent>,
}

impl Detector {
    /// `threshold` is the accuracy drop (absolute, in [0, 1] units, or
    /// `f32::INFINITY` to disable triggering) tolerated between consecutive
    /// checks; `cadence` is the number of training batches between checks;
    /// `recovery_len` is how many batches of PGD follow a trigger.
    pub fn new(threshold: f32, cadence: usize, recovery_len: usize) -> Result<Self> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::config(format!("detector threshold must be >= 0, got {threshold}")));
        }
        if cadence == 0 {
            return Err(Error::config("detector cadence must be at least one batch"));
        }
        if recovery_len == 0 {
            return Err(Error::config("detector recovery window must be at least one batch"));
        }
        Ok(Detector {
            threshold,
            cadence,
            recovery_len,
            last_reading: None,
            recovery_remaining: 0,
            triggers: Vec::new(),
        })
    }

    /// Checks happen every this many training batches.
    pub fn cadence(&self) -> usize {
        self.cadence
    }

    pub fn recovery_len(&self) -> usize {
        self.recovery_len
    }

    /// True when a check is due at this global batch count (1-based count of
    /// completed batches).
    pub fn due(&self, batches_done: usize) -> bool {
        batches_done > 0 && batches_done.is_multiple_of(self.cadence)
    }

    /// Feed one robust-accuracy reading. Returns whether the alarm tripped.
    ///
    /// The first reading only initializes the baseline and can never trigger.
    /// Every reading, triggering or not, becomes the new baseline. A trigger
    /// while a recovery window is already open restarts the window rather
    /// than extending it.
    pub fn check(&mut self, epoch: usize, batch: usize, reading: f32) -> Result<bool> {
        if !(0.0..=1.0).contains(&reading) {
            return Err(Error::input(format!(
                "robust accuracy reading {reading} is outside [0, 1]"
            )));
        }
        let tripped = match self.last_reading {
            Some(previous) => previous > reading + self.threshold,
            None => false,
        };
        if tripped {
            self.recovery_remaining = self.recovery_len;
            self.triggers.push(TriggerEvent {
                epoch,
                batch,
                previous: self.last_reading.expect("tripped implies a baseline"),
                observed: reading,
            });
        }
        self.last_reading = Some(reading);
        Ok(tripped)
    }

    /// Diagnostic fault injection: opens a recovery window exactly as a real
    /// trigger would, without consuming a reading. The event is logged with
    /// the last baseline (1.0 when none exists yet) as `previous` and 0.0 as
    /// `observed` so injected triggers are recognizable in the log.
    pub fn force_trigger(&mut self, epoch: usize, batch: usize) {
        self.recovery_remaining = self.recovery_len;
        self.triggers.push(TriggerEvent {
            epoch,
            batch,
            previous: self.last_reading.unwrap_or(1.0),
            observed: 0.0,
        });
    }

    /// Attack to use for the next training batch; consumes one batch of the
    /// recovery window when one is open.
    pub fn choose_attack(&mut self) -> AttackChoice {
        if self.recovery_remaining > 0 {
            self.recovery_remaining -= 1;
            AttackChoice::Pgd
        } else {
            AttackChoice::Fast
        }
    }

    /// Recovery batches still owed, without consuming one.
    pub fn recovery_remaining(&self) -> usize {
        self.recovery_remaining
    }

    pub fn last_reading(&self) -> Option<f32> {
        self.last_reading
    }

    /// All alarms so far, in the order they fired.
    pub fn triggers(&self) -> &[TriggerEvent] {
        &self.triggers
    }
}
