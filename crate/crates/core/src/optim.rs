//! SGD with momentum and weight decay.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{ImageBatch, LabelBatch};

/// Hyperparameters of the update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!("negative weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: Vec<ArrayD<f32>>,
}

impl SgdState {
    pub fn new(model: &dyn Classifier, config: SgdConfig) -> Result<Self> {
        config.validate()?;
        let velocity = model.params().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Ok(SgdState { config, velocity })
    }

    /// Applies one update from precomputed gradients:
    /// `v = mu * v + (g + wd * theta)`, `theta -= lr * v`.
    ///
    /// With `lr = 0` the parameters are untouched (the velocity still turns
    /// over, matching the usual definition of the rule).
    pub fn apply(&mut self, model: &mut dyn Classifier, grads: &[ArrayD<f32>], lr: f32) {
        debug_assert_eq!(grads.len(), self.velocity.len());
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            ndarray::Zip::from(v).and(p).and(g).for_each(|v, p, g| {
                *v = mu * *v + (*g + wd * *p);
                *p -= lr * *v;
            });
        }
    }
}

/// One stochastic-gradient step on a batch: forward, backward, update.
///
/// Returns the batch loss. A non-finite loss or gradient aborts before any
/// parameter is touched, so the model stays at its last good state.
pub fn sgd_step(
    model: &mut dyn Classifier,
    opt: &mut SgdState,
    x: &ImageBatch,
    y: &LabelBatch,
    lr: f32,
) -> Result<f32> {
    let (loss, grads) = model.loss_and_param_grads(x, y)?;
    check_finite(loss, &grads, 0, 0)?;
    opt.apply(model, &grads, lr);
    Ok(loss)
}

/// Rejects non-finite losses/gradients with a diagnostic position.
pub fn check_finite(loss: f32, grads: &[ArrayD<f32>], epoch: usize, batch: usize) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { epoch, batch, loss });
    }
    Ok(())
}
