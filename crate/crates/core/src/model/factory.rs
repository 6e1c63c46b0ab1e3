//! Architecture registry: build a model from its identifier string.

use super::{desk_cnn::DEFAULT_WIDTH, Classifier, DeskCnn, LinearModel};
use crate::error::{Error, Result};

/// Builds a classifier from an architecture identifier.
///
/// Supported identifiers:
/// - `linear` -- softmax regression on raw pixels
/// - `desk_cnn` -- 4-layer CNN at the default width
/// - `desk_cnn_w<N>` -- 4-layer CNN with first-layer width `N`
/// - `preact_resnet18` -- pre-activation ResNet-18
pub fn build_model(
    arch: &str,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<Box<dyn Classifier>> {
    if num_classes < 2 {
        return Err(Error::config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if arch == "linear" {
        return Ok(Box::new(LinearModel::new(input_shape, num_classes, seed)));
    }
    if arch == "desk_cnn" {
        return Ok(Box::new(DeskCnn::new(input_shape, num_classes, DEFAULT_WIDTH, seed)?));
    }
    if let Some(w) = arch.strip_prefix("desk_cnn_w") {
        let width: usize = w
            .parse()
            .map_err(|_| Error::config(format!("bad desk_cnn width in {arch:?}")))?;
        return Ok(Box::new(DeskCnn::new(input_shape, num_classes, width, seed)?));
    }
    if arch == "preact_resnet18" {
        return Ok(Box::new(super::PreActResNet18::new(input_shape, num_classes, seed)?));
    }
    Err(Error::config(format!("unknown architecture {arch:?}")))
}
