//! Learning-rate schedules and the staged perturbation-budget schedule.
//!
//! The cyclic schedule interpolates per batch so the rate moves smoothly
//! within an epoch; the piecewise schedule changes only at epoch boundaries,
//! with each decay taking effect on the first batch of its milestone epoch.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Learning-rate schedule selection, in units of epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Triangular ramp: 0 up to `max_lr` over `up_epochs`, back down to 0
    /// over `down_epochs`, evaluated at fractional epochs.
    Cyclic { max_lr: f32, up_epochs: usize, down_epochs: usize },
    /// `base_lr` scaled by `gamma` once per milestone epoch reached.
    Piecewise { base_lr: f32, milestones: Vec<usize>, gamma: f32 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Cyclic { max_lr, up_epochs, down_epochs } => {
                if !(max_lr.is_finite() && *max_lr >= 0.0) {
                    return Err(Error::config(format!("cyclic max_lr must be >= 0, got {max_lr}")));
                }
                if *up_epochs == 0 || *down_epochs == 0 {
                    return Err(Error::config("cyclic ramps need at least one epoch per side"));
                }
            }
            LrSchedule::Piecewise { base_lr, milestones, gamma } => {
                if !(base_lr.is_finite() && *base_lr >= 0.0) {
                    return Err(Error::config(format!(
                        "piecewise base_lr must be >= 0, got {base_lr}"
                    )));
                }
                if !(gamma.is_finite() && *gamma >= 0.0) {
                    return Err(Error::config(format!("piecewise gamma must be >= 0, got {gamma}")));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("piecewise milestones must be strictly increasing"));
                }
            }
        }
        Ok(())
    }

    /// Total epochs a cyclic schedule spans, if cyclic.
    pub fn cyclic_span(&self) -> Option<usize> {
        match self {
            LrSchedule::Cyclic { up_epochs, down_epochs, .. } => Some(up_epochs + down_epochs),
            LrSchedule::Piecewise { .. } => None,
        }
    }

    /// Learning rate for a given batch. `batch` indexes within the epoch and
    /// `batches_per_epoch` sets the interpolation grain; the piecewise
    /// schedule ignores both.
    pub fn lr_at(&self, epoch: usize, batch: usize, batches_per_epoch: usize) -> f32 {
        match self {
            LrSchedule::Cyclic { max_lr, up_epochs, down_epochs } => {
                let t = epoch as f64
                    + if batches_per_epoch == 0 {
                        0.0
                    } else {
                        batch as f64 / batches_per_epoch as f64
                    };
                let up = *up_epochs as f64;
                let down = *down_epochs as f64;
                let v = if t <= up { t / up } else { (1.0 - (t - up) / down).max(0.0) };
                (*max_lr as f64 * v) as f32
            }
            LrSchedule::Piecewise { base_lr, milestones, gamma } => {
                let decays = milestones.iter().filter(|&&m| m <= epoch).count();
                base_lr * gamma.powi(decays as i32)
            }
        }
    }
}

/// Step schedule for the attack budget: `(start_epoch, epsilon)` pairs, the
/// active ε being that of the last stage whose start has been reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EpsilonStages {
    stages: Vec<(usize, f32)>,
}

impl EpsilonStages {
    pub fn new(stages: Vec<(usize, f32)>) -> Result<Self> {
        let built = EpsilonStages { stages };
        built.validate()?;
        Ok(built)
    }

    /// Re-checks the invariants `new` enforces. Needed because transparent
    /// deserialization constructs the struct without going through `new`.
    pub fn validate(&self) -> Result<()> {
        let stages = &self.stages;
        if stages.is_empty() {
            return Err(Error::config("epsilon schedule needs at least one stage"));
        }
        if stages[0].0 != 0 {
            return Err(Error::config(format!(
                "first epsilon stage must start at epoch 0, got {}",
                stages[0].0
            )));
        }
        if stages.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config("epsilon stage starts must be strictly increasing"));
        }
        if let Some((at, eps)) = stages.iter().find(|(_, e)| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::config(format!(
                "epsilon {eps} at stage starting epoch {at} is outside (0, 1]"
            )));
        }
        Ok(())
    }

    /// A single unchanging budget.
    pub fn constant(epsilon: f32) -> Result<Self> {
        EpsilonStages::new(vec![(0, epsilon)])
    }

    pub fn epsilon_at(&self, epoch: usize) -> f32 {
        self.stages
            .iter()
            .rev()
            .find(|(start, _)| *start <= epoch)
            .expect("validated: stage 0 starts at epoch 0")
            .1
    }

    /// Largest configured budget, for sizing evaluation attacks.
    pub fn max_epsilon(&self) -> f32 {
        self.stages.iter().fold(0.0f32, |m, &(_, e)| m.max(e))
    }

    pub fn stages(&self) -> &[(usize, f32)] {
        &self.stages
    }
}
