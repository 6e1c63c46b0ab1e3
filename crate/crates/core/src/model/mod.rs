//! Classifier contract and concrete architectures.
//!
//! Models implement forward, loss, gradient-with-respect-to-input (for attack
//! construction), and gradient-with-respect-to-parameters (for SGD) by hand;
//! there is no autodiff dependency. Parameters are held as a flat list of
//! tensors with a fixed per-architecture ordering so the optimizer and the
//! checkpoint container can treat every model uniformly.

mod desk_cnn;
mod factory;
mod layers;
mod linear;
mod resnet;

pub use desk_cnn::DeskCnn;
pub use factory::build_model;
pub use linear::LinearModel;
pub use resnet::PreActResNet18;

use ndarray::{Array4, ArrayD};

use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, LabelBatch, Logits};

/// Whether batch-statistics layers use live batch stats or frozen running
/// stats. Architectures without such layers ignore this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Scalar objective used for gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean cross-entropy with softmax, natural log.
    CrossEntropy,
    /// Mean logit margin `max_{k != y} z_k - z_y` (ascends toward
    /// misclassification; used by C&W-style attacks).
    CwMargin,
}

/// The uniform model contract used by attacks, trainers, and evaluation.
pub trait Classifier: Send {
    /// Short architecture identifier, stable across runs (stored in
    /// checkpoints and resolved configs).
    fn arch_id(&self) -> String;

    /// Expected `(channels, height, width)` of one input image.
    fn input_shape(&self) -> (usize, usize, usize);

    fn num_classes(&self) -> usize;

    /// Learnable tensors in fixed order.
    fn params(&self) -> &[ArrayD<f32>];

    /// Mutable access to the learnable tensors, same order as [`params`].
    ///
    /// [`params`]: Classifier::params
    fn params_mut(&mut self) -> &mut [ArrayD<f32>];

    /// Non-learnable state (e.g. running batch statistics), in fixed order.
    fn buffers(&self) -> Vec<&ArrayD<f32>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut ArrayD<f32>> {
        Vec::new()
    }

    /// Logits for a batch; pure with respect to parameters and buffers.
    fn forward_mode(&self, x: &ImageBatch, mode: Mode) -> Result<Logits>;

    /// Evaluation-mode forward pass.
    fn forward(&self, x: &ImageBatch) -> Result<Logits> {
        self.forward_mode(x, Mode::Eval)
    }

    /// Gradient of the mean loss with respect to the input pixels; pure.
    fn input_gradient(
        &self,
        x: &ImageBatch,
        y: &LabelBatch,
        loss: LossKind,
        mode: Mode,
    ) -> Result<Array4<f32>>;

    /// Train-mode forward plus backward over parameters. Returns the loss and
    /// one gradient tensor per parameter tensor, in [`params`] order. The only
    /// state this may mutate is batch-statistics buffers.
    ///
    /// [`params`]: Classifier::params
    fn loss_and_param_grads(
        &mut self,
        x: &ImageBatch,
        y: &LabelBatch,
    ) -> Result<(f32, Vec<ArrayD<f32>>)>;

    /// Like [`loss_and_param_grads`] but also returns the input-pixel
    /// gradient from the same backward chain, for training schemes that
    /// update the perturbation and the parameters from one backward pass.
    /// The default runs two passes; convolutional models override it.
    ///
    /// [`loss_and_param_grads`]: Classifier::loss_and_param_grads
    fn loss_param_and_input_grads(
        &mut self,
        x: &ImageBatch,
        y: &LabelBatch,
    ) -> Result<(f32, Vec<ArrayD<f32>>, Array4<f32>)> {
        let (loss, grads) = self.loss_and_param_grads(x, y)?;
        let dx = self.input_gradient(x, y, LossKind::CrossEntropy, Mode::Train)?;
        Ok((loss, grads, dx))
    }

    fn clone_box(&self) -> Box<dyn Classifier>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl Clone for Box<dyn Classifier> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Checks a batch against the model's expectations.
pub(crate) fn check_batch(
    model: &dyn Classifier,
    x: &ImageBatch,
    y: Option<&LabelBatch>,
) -> Result<()> {
    if x.image_shape() != model.input_shape() {
        return Err(Error::input(format!(
            "batch image shape {:?} does not match model input {:?}",
            x.image_shape(),
            model.input_shape()
        )));
    }
    if let Some(y) = y {
        if y.len() != x.len() {
            return Err(Error::input(format!(
                "batch has {} images but {} labels",
                x.len(),
                y.len()
            )));
        }
        if y.num_classes() as usize != model.num_classes() {
            return Err(Error::input(format!(
                "labels carry {} classes, model has {}",
                y.num_classes(),
                model.num_classes()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss functions
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch, numerically stable.
pub fn cross_entropy(logits: &Logits, labels: &LabelBatch) -> f32 {
    debug_assert_eq!(logits.nrows(), labels.len());
    let mut total = 0.0f64;
    for (row, &y) in logits.rows().into_iter().zip(labels.labels()) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f32>().ln();
        total += f64::from(lse - row[y as usize]);
    }
    (total / logits.nrows() as f64) as f32
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `(softmax - onehot) / batch`.
pub fn cross_entropy_grad(logits: &Logits, labels: &LabelBatch) -> Logits {
    debug_assert_eq!(logits.nrows(), labels.len());
    let b = logits.nrows() as f32;
    let mut grad = logits.clone();
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels.labels()) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[y as usize] -= 1.0;
        for v in row.iter_mut() {
            *v /= b;
        }
    }
    grad
}

/// Mean logit margin `max_{k != y} z_k - z_y`; positive means misclassified.
pub fn cw_margin(logits: &Logits, labels: &LabelBatch) -> f32 {
    debug_assert_eq!(logits.nrows(), labels.len());
    debug_assert!(logits.ncols() >= 2, "margin needs at least two classes");
    let mut total = 0.0f64;
    for (row, &y) in logits.rows().into_iter().zip(labels.labels()) {
        let mut best = f32::NEG_INFINITY;
        for (k, &z) in row.iter().enumerate() {
            if k != y as usize && z > best {
                best = z;
            }
        }
        total += f64::from(best - row[y as usize]);
    }
    (total / logits.nrows() as f64) as f32
}

/// Gradient of [`cw_margin`] with respect to the logits. Ties in the runner-up
/// class break toward the lower index, matching [`cw_margin`]'s maximum.
pub fn cw_margin_grad(logits: &Logits, labels: &LabelBatch) -> Logits {
    debug_assert_eq!(logits.nrows(), labels.len());
    let b = logits.nrows() as f32;
    let mut grad = Logits::zeros(logits.raw_dim());
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels.labels()).enumerate() {
        let mut best = f32::NEG_INFINITY;
        let mut best_k = 0usize;
        for (k, &z) in row.iter().enumerate() {
            if k != y as usize && z > best {
                best = z;
                best_k = k;
            }
        }
        grad[[i, best_k]] += 1.0 / b;
        grad[[i, y as usize]] -= 1.0 / b;
    }
    grad
}

/// Dispatches on [`LossKind`].
pub fn loss_value(kind: LossKind, logits: &Logits, labels: &LabelBatch) -> f32 {
    match kind {
        LossKind::CrossEntropy => cross_entropy(logits, labels),
        LossKind::CwMargin => cw_margin(logits, labels),
    }
}

/// Gradient of [`loss_value`] with respect to the logits.
pub fn loss_grad(kind: LossKind, logits: &Logits, labels: &LabelBatch) -> Logits {
    match kind {
        LossKind::CrossEntropy => cross_entropy_grad(logits, labels),
        LossKind::CwMargin => cw_margin_grad(logits, labels),
    }
}
