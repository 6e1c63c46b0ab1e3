//! Fast adversarial training with catastrophic-overfitting detection and recovery.
//!
//! The crate provides the pieces needed to train image classifiers that stay
//! robust under l-infinity attacks while paying close to single-step (FGSM)
//! cost: attack kernels, learning-rate and epsilon schedules, a validation
//! based collapse detector with a PGD recovery window, training strategies
//! built from those parts, and evaluation utilities.
//!
//! Modules are layered bottom-up:
//!
//! - [`tensor`]: validated image/label batch types shared by everything else
//! - [`model`]: the classifier contract plus concrete architectures with
//!   hand-written backprop (no autodiff dependency)
//! - [`optim`]: SGD with momentum and weight decay
//! - [`attacks`]: FGSM / PGD perturbation construction in the epsilon ball
//! - [`schedules`]: cyclic and piecewise learning rates, staged epsilon
//! - [`detector`]: the catastrophic-overfitting state machine
//! - [`data`]: CIFAR-10 binary loading, synthetic datasets, splits, augmentation
//! - [`evaluation`]: clean/robust accuracy, attack batteries, traces
//! - [`trainers`]: the strategy zoo (fgsm, fastadv, fastadv_plus, fastadv_w,
//!   pgd, free) emitting a structured metrics stream
//! - [`checkpoint`]: versioned binary model + optimizer snapshots
//! - [`metrics`]: record types for the metrics stream

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedules;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
