//! Adversarial training loops.
//!
//! One driver, [`train`], runs every strategy:
//!
//! - `fgsm`: single sign step from the clean image, no random start.
//! - `fastadv`: uniform random start in the ε-ball, then one full-budget
//!   sign step (the fast single-step recipe).
//! - `fastadv_plus`: `fastadv` plus a collapse watchdog. Every `cadence`
//!   batches the [`Detector`] measures robust accuracy on a random held-out
//!   batch; a sharp drop switches training to multi-step PGD for a short
//!   recovery window, after which the fast attack resumes.
//! - `fastadv_w`: `fastadv_plus` for the first `warmup_switch_epoch` epochs
//!   (typically at a reduced ε stage), then multi-step PGD for the rest of
//!   the run, with the watchdog retired.
//! - `pgd`: the training attack every batch, typically multi-step.
//! - `free`: minibatch replay. Each batch is revisited `replay_m` times; a
//!   single backward pass per replay updates both the parameters and the
//!   shared perturbation, which persists across that batch's replays and
//!   resets to zero on the next batch.
//!
//! Determinism: every random decision draws from a stream derived from the
//! run seed and the decision's position — `"shuffle"` keyed by epoch;
//! `"attack"`, `"augment"`, and `"detector"` keyed by (epoch, batch);
//! `"trace"` and `"epoch-eval"` seeds likewise. Streams are independent, so
//! adding or removing detector checks or trace evaluations leaves every other
//! stream untouched; in particular `fastadv_plus` with a threshold of
//! infinity (an alarm that can never trip) produces bit-identical parameters
//! to `fastadv` under the same seed, and reruns of any configuration are
//! bit-identical.
//!
//! Budget staging: `epsilon_stages` reschedules the training budget by epoch.
//! The active attack keeps its geometry under staging — ε is replaced and α
//! scales by the same ratio. Evaluation (traces, epoch-end, detector scoring
//! excepted) always runs the configured `eval_attack` at its own fixed
//! budget; the detector scores at the staged training budget, since collapse
//! at the current budget is what it watches for.

use std::time::Instant;

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::attacks::{multi_restart_attack, pgd_attack, project, sign_ascent_step, AttackConfig};
use crate::data::{augment_batch, shuffled_batches, Dataset};
use crate::detector::{AttackChoice, Detector, TriggerEvent};
use crate::evaluation::{clean_accuracy, robust_accuracy, trace_eval};
use crate::metrics::{MetricsRecord, MetricsSink, Phase, VecSink};
use crate::model::{build_model, Classifier, LossKind, Mode};
use crate::optim::{check_finite, SgdConfig, SgdState};
use crate::rng;
use crate::schedules::{EpsilonStages, LrSchedule};
use crate::tensor::{ImageBatch, LabelBatch};
use crate::{Error, Result};

/// Side of the evaluation subset used for in-training traces.
const TRACE_SUBSET: usize = 256;
/// Crop padding for the shift-and-flip augmentation.
const AUGMENT_PAD: usize = 4;
/// Default robust-accuracy floor below which a run counts as collapsed.
pub const COLLAPSE_FLOOR: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fgsm,
    Fastadv,
    FastadvPlus,
    FastadvW,
    Pgd,
    Free,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fgsm => "fgsm",
            Strategy::Fastadv => "fastadv",
            Strategy::FastadvPlus => "fastadv_plus",
            Strategy::FastadvW => "fastadv_w",
            Strategy::Pgd => "pgd",
            Strategy::Free => "free",
        }
    }

    /// Strategies that watch a validation signal and train with recovery
    /// windows.
    pub fn uses_detector(self) -> bool {
        matches!(self, Strategy::FastadvPlus | Strategy::FastadvW)
    }
}

/// Watchdog settings for the detector-carrying strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Drop in held-out robust accuracy (absolute) that trips the alarm.
    pub threshold: f32,
    /// Check every this many batches.
    pub cadence: usize,
    /// Length of the PGD recovery window in batches; defaults to `cadence`
    /// so recovery spans exactly one inter-check interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery_len: Option<usize>,
}

impl DetectorConfig {
    fn build(&self) -> Result<Detector> {
        Detector::new(self.threshold, self.cadence, self.recovery_len.unwrap_or(self.cadence))
    }
}

/// Everything a training run needs besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Training-budget schedule; the maximum stage is the budget evaluation
    /// should use.
    pub epsilon_stages: EpsilonStages,
    /// Attack that builds the training examples in the fast phases (and, for
    /// the `pgd` strategy, everywhere).
    pub train_attack: AttackConfig,
    /// Attack used for traces, epoch-end evaluation, detector scoring, and —
    /// restaged to the training budget — for recovery windows and the
    /// post-warmup PGD phase.
    pub eval_attack: AttackConfig,
    /// Required for the detector strategies, forbidden otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorConfig>,
    /// First epoch of the PGD phase; `fastadv_w` only. May equal `epochs`,
    /// which degenerates to a pure warmup run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_switch_epoch: Option<usize>,
    /// Replays per batch; `free` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_m: Option<usize>,
    pub seed: u64,
    /// Keep an in-memory snapshot of the weights at the best epoch-end
    /// robust accuracy.
    #[serde(default)]
    pub early_stop: bool,
    /// Emit a trace record every this many batches, evaluated on a fixed
    /// held-out subset. `None` disables traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every_batches: Option<usize>,
    /// Random shift-and-flip augmentation on each training batch.
    #[serde(default)]
    pub augment: bool,
    /// Fault injection for exercising recovery: at the start of each listed
    /// (epoch, batch), the detector is forced to trip as if a real collapse
    /// had been observed. Scheduled checks observe readings only after their
    /// batch completes, so a forced trigger at batch `b` makes `b` itself the
    /// first recovery batch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forced_triggers: Vec<(usize, usize)>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.lr_schedule.validate()?;
        self.sgd.validate()?;
        self.epsilon_stages.validate()?;
        self.train_attack.validate()?;
        self.eval_attack.validate()?;
        let name = self.strategy.name();
        match (&self.detector, self.strategy.uses_detector()) {
            (None, true) => {
                return Err(Error::config(format!("strategy {name} requires detector settings")));
            }
            (Some(_), false) => {
                return Err(Error::config(format!(
                    "strategy {name} does not take detector settings"
                )));
            }
            _ => {}
        }
        if let Some(d) = &self.detector {
            d.build()?;
        }
        match (self.warmup_switch_epoch, self.strategy) {
            (None, Strategy::FastadvW) => {
                return Err(Error::config("fastadv_w requires warmup_switch_epoch"));
            }
            (Some(s), Strategy::FastadvW) => {
                if s == 0 || s > self.epochs {
                    return Err(Error::config(format!(
                        "warmup_switch_epoch {s} must be in 1..={}",
                        self.epochs
                    )));
                }
            }
            (Some(_), _) => {
                return Err(Error::config(format!(
                    "strategy {name} does not take warmup_switch_epoch"
                )));
            }
            (None, _) => {}
        }
        match (self.replay_m, self.strategy) {
            (None, Strategy::Free) => {
                return Err(Error::config("free requires replay_m"));
            }
            (Some(m), Strategy::Free) => {
                if m == 0 {
                    return Err(Error::config("replay_m must be at least 1"));
                }
            }
            (Some(_), _) => {
                return Err(Error::config(format!("strategy {name} does not take replay_m")));
            }
            (None, _) => {}
        }
        if self.eval_every_batches == Some(0) {
            return Err(Error::config("eval_every_batches must be at least 1 when set"));
        }
        if !self.forced_triggers.is_empty() && !self.strategy.uses_detector() {
            return Err(Error::config(format!(
                "forced_triggers require a detector strategy, not {name}"
            )));
        }
        Ok(())
    }
}

/// The training attack at the budget scheduled for an epoch: ε is replaced
/// and α is scaled by the same ratio, so the attack's step geometry (a
/// full-budget single step, a quarter-budget PGD step) is preserved across
/// stages. A stage equal to the configured ε returns the config verbatim.
pub fn staged_attack(cfg: &AttackConfig, epsilon: f32) -> AttackConfig {
    let mut out = cfg.clone();
    out.alpha = cfg.alpha * (epsilon / cfg.epsilon);
    out.epsilon = epsilon;
    out
}

/// Attack for the phases where training temporarily (recovery windows) or
/// permanently (post-warmup) runs multi-step PGD: the evaluation attack's
/// step recipe restaged to the current training budget, single restart,
/// cross-entropy objective.
pub fn recovery_attack(eval: &AttackConfig, epsilon: f32) -> AttackConfig {
    let mut out = staged_attack(eval, epsilon);
    out.restarts = 1;
    out.loss = LossKind::CrossEntropy;
    out
}

/// Short human-readable name for an attack configuration, used in trace
/// records.
pub fn attack_label(cfg: &AttackConfig) -> String {
    if cfg.steps == 1 {
        if cfg.random_init { "rfgsm".to_string() } else { "fgsm".to_string() }
    } else if cfg.restarts > 1 {
        format!("pgd{}x{}", cfg.steps, cfg.restarts)
    } else {
        format!("pgd{}", cfg.steps)
    }
}

/// Epoch-end evaluation results, one per completed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub mean_loss: f32,
    pub clean: f32,
    pub robust: f32,
}

/// Weights captured at the best epoch-end robust accuracy seen so far.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub clean: f32,
    pub robust: f32,
    pub params: Vec<ArrayD<f32>>,
    pub buffers: Vec<ArrayD<f32>>,
}

impl BestSnapshot {
    fn capture(model: &dyn Classifier, epoch: usize, clean: f32, robust: f32) -> Self {
        BestSnapshot {
            epoch,
            clean,
            robust,
            params: model.params().to_vec(),
            buffers: model.buffers().into_iter().cloned().collect(),
        }
    }

    /// Write the stored tensors back into a model of the same architecture.
    pub fn restore(&self, model: &mut dyn Classifier) -> Result<()> {
        if model.params().len() != self.params.len() || model.buffers().len() != self.buffers.len()
        {
            return Err(Error::input(
                "snapshot tensor counts do not match the model".to_string(),
            ));
        }
        for (dst, src) in model.params_mut().iter_mut().zip(&self.params) {
            if dst.shape() != src.shape() {
                return Err(Error::input("snapshot parameter shape mismatch".to_string()));
            }
            dst.assign(src);
        }
        for (dst, src) in model.buffers_mut().into_iter().zip(&self.buffers) {
            if dst.shape() != src.shape() {
                return Err(Error::input("snapshot buffer shape mismatch".to_string()));
            }
            dst.assign(src);
        }
        Ok(())
    }
}

/// Everything a completed run reports back.
#[derive(Debug)]
pub struct TrainHistory {
    /// Every record that was sent to the metrics sink, in order.
    pub records: Vec<MetricsRecord>,
    pub epoch_evals: Vec<EpochEval>,
    /// Detector alarms, including forced ones, in firing order.
    pub triggers: Vec<TriggerEvent>,
    /// Present when `early_stop` was set.
    pub best: Option<BestSnapshot>,
    /// Final optimizer state, for checkpointing a resumable run.
    pub optimizer: SgdState,
    /// Wall-clock time per epoch. Kept out of the metrics records so those
    /// stay bit-reproducible.
    pub wall_ms_per_epoch: Vec<u64>,
    pub batches_total: usize,
    /// Parameter updates applied: one per batch, `replay_m` per batch for
    /// `free`.
    pub updates_total: usize,
    /// Batches whose training examples came from the multi-step attack.
    pub pgd_batches: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum BatchKind {
    Fast,
    Recovery,
    PgdPhase,
}

fn emit(
    records: &mut Vec<MetricsRecord>,
    sink: &mut dyn MetricsSink,
    record: MetricsRecord,
) -> Result<()> {
    sink.record(&record)?;
    records.push(record);
    Ok(())
}

fn check_model_data(model: &dyn Classifier, data: &Dataset, role: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::input(format!("{role} set is empty")));
    }
    if model.input_shape() != data.image_shape() {
        return Err(Error::input(format!(
            "model input {:?} does not match {role} images {:?}",
            model.input_shape(),
            data.image_shape()
        )));
    }
    if model.num_classes() != data.num_classes() as usize {
        return Err(Error::input(format!(
            "model has {} classes, {role} set has {}",
            model.num_classes(),
            data.num_classes()
        )));
    }
    Ok(())
}

/// One attack-then-descend update. Returns the training loss for the batch.
#[allow(clippy::too_many_arguments)]
fn adversarial_update(
    model: &mut dyn Classifier,
    opt: &mut SgdState,
    x: &ImageBatch,
    y: &LabelBatch,
    attack: &AttackConfig,
    lr: f32,
    epoch: usize,
    batch: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f32> {
    let delta = pgd_attack(model, x, y, attack, Mode::Train, rng)?;
    let x_adv = delta.apply(x);
    let (loss, grads) = model.loss_and_param_grads(&x_adv, y)?;
    check_finite(loss, &grads, epoch, batch)?;
    opt.apply(model, &grads, lr);
    Ok(loss)
}

/// The replay inner loop of the `free` strategy: `replays` passes over one
/// batch, each taking the parameter and input gradients from a single
/// backward pass, descending on the parameters and ascending the shared
/// perturbation, which persists across the replays. Returns the mean replay
/// loss and the final perturbation (for instrumentation; the caller discards
/// it, since the next batch starts from zero).
#[allow(clippy::too_many_arguments)]
pub fn free_batch_updates<F: Fn(usize) -> f32>(
    model: &mut dyn Classifier,
    opt: &mut SgdState,
    x: &ImageBatch,
    y: &LabelBatch,
    replays: usize,
    alpha: f32,
    epsilon: f32,
    lr_for_replay: F,
    epoch: usize,
    batch: usize,
) -> Result<(f32, Array4<f32>)> {
    if replays == 0 {
        return Err(Error::config("free replay count must be at least 1"));
    }
    let mut delta = Array4::zeros(x.array().raw_dim());
    let mut loss_sum = 0.0f64;
    for replay in 0..replays {
        let x_adv = ImageBatch::from_valid(x.array() + &delta);
        let (loss, grads, dx) = model.loss_param_and_input_grads(&x_adv, y)?;
        check_finite(loss, &grads, epoch, batch)?;
        opt.apply(model, &grads, lr_for_replay(replay));
        sign_ascent_step(&mut delta, &dx, alpha);
        project(&mut delta, epsilon, x);
        loss_sum += loss as f64;
    }
    Ok(((loss_sum / replays as f64) as f32, delta))
}

/// Robust accuracy on one randomly drawn held-out batch, the detector's
/// input signal. Scored at the staged training budget with frozen
/// normalization statistics.
fn detector_reading(
    model: &dyn Classifier,
    valid_set: &Dataset,
    config: &TrainConfig,
    epsilon: f32,
    epoch: usize,
    batch: usize,
) -> Result<f32> {
    let mut drng = rng::stream(config.seed, "detector", &[epoch as u64, batch as u64]);
    let take = config.batch_size.min(valid_set.len());
    let indices = rand::seq::index::sample(&mut drng, valid_set.len(), take).into_vec();
    let (vx, vy) = valid_set.batch(&indices);
    let signal = recovery_attack(&config.eval_attack, epsilon);
    let outcome = multi_restart_attack(model, &vx, &vy, &signal, Mode::Eval, &mut drng)?;
    Ok(outcome.surviving_fraction() as f32)
}

/// Observer invoked after each completed epoch with the live model and
/// optimizer, e.g. for periodic checkpoints. An error aborts training.
pub type EpochCallback<'a> = &'a mut dyn FnMut(usize, &dyn Classifier, &SgdState) -> Result<()>;

/// Run one training job. Every metrics record goes to `sink` as it is
/// produced (so an aborted run leaves its prefix behind) and is also
/// collected into the returned history.
pub fn train(
    model: &mut dyn Classifier,
    train_set: &Dataset,
    valid_set: &Dataset,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainHistory> {
    train_with_callback(model, train_set, valid_set, config, sink, None)
}

/// [`train`] with an optional per-epoch observer.
pub fn train_with_callback(
    model: &mut dyn Classifier,
    train_set: &Dataset,
    valid_set: &Dataset,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
    mut after_epoch: Option<EpochCallback<'_>>,
) -> Result<TrainHistory> {
    config.validate()?;
    check_model_data(model, train_set, "training")?;
    check_model_data(model, valid_set, "validation")?;

    let master = config.seed;
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let mut opt = SgdState::new(model, config.sgd)?;
    let mut detector = match &config.detector {
        Some(d) => Some(d.build()?),
        None => None,
    };
    let trace_subset = config.eval_every_batches.map(|_| {
        let n = valid_set.len().min(TRACE_SUBSET);
        valid_set.subset(&(0..n).collect::<Vec<_>>())
    });

    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut epoch_evals: Vec<EpochEval> = Vec::new();
    let mut wall_ms_per_epoch: Vec<u64> = Vec::new();
    let mut best: Option<BestSnapshot> = None;
    let mut batches_total = 0usize;
    let mut updates_total = 0usize;
    let mut pgd_batches = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let epsilon = config.epsilon_stages.epsilon_at(epoch);
        let in_pgd_phase = match config.strategy {
            Strategy::Pgd => true,
            Strategy::FastadvW => {
                epoch >= config.warmup_switch_epoch.expect("validated: fastadv_w has a switch")
            }
            _ => false,
        };
        let detector_on = detector.is_some() && !in_pgd_phase;
        let batches = shuffled_batches(
            train_set.len(),
            config.batch_size,
            &mut rng::stream(master, "shuffle", &[epoch as u64]),
        );
        let mut loss_sum = 0.0f64;
        let mut last_lr = config.lr_schedule.lr_at(epoch, 0, batches_per_epoch);

        for (b, indices) in batches.iter().enumerate() {
            if detector_on && config.forced_triggers.contains(&(epoch, b)) {
                let det = detector.as_mut().expect("detector_on implies a detector");
                det.force_trigger(epoch, b);
                let event = *det.triggers().last().expect("force_trigger logs an event");
                emit(&mut records, sink, MetricsRecord::trigger(&event))?;
            }

            let kind = if in_pgd_phase {
                BatchKind::PgdPhase
            } else if detector_on {
                match detector.as_mut().expect("detector_on implies a detector").choose_attack() {
                    AttackChoice::Pgd => BatchKind::Recovery,
                    AttackChoice::Fast => BatchKind::Fast,
                }
            } else {
                BatchKind::Fast
            };
            let phase = match kind {
                BatchKind::Fast => Phase::Warmup,
                BatchKind::Recovery => Phase::Recovery,
                BatchKind::PgdPhase => Phase::Pgd,
            };
            let attack = match (kind, config.strategy) {
                (BatchKind::Fast, _) | (BatchKind::PgdPhase, Strategy::Pgd) => {
                    staged_attack(&config.train_attack, epsilon)
                }
                _ => recovery_attack(&config.eval_attack, epsilon),
            };

            let (x, y) = train_set.batch(indices);
            let x = if config.augment {
                let mut images = x.into_array();
                augment_batch(
                    &mut images,
                    AUGMENT_PAD,
                    &mut rng::stream(master, "augment", &[epoch as u64, b as u64]),
                );
                ImageBatch::from_valid(images)
            } else {
                x
            };

            let batch_loss = if config.strategy == Strategy::Free {
                let m = config.replay_m.expect("validated: free has replay_m");
                // The replay grid refines the schedule: m replays advance the
                // clock as far as one plain batch would.
                let lr_for_replay =
                    |r: usize| config.lr_schedule.lr_at(epoch, b * m + r, batches_per_epoch * m);
                let (loss, _) = free_batch_updates(
                    model,
                    &mut opt,
                    &x,
                    &y,
                    m,
                    attack.alpha,
                    attack.epsilon,
                    lr_for_replay,
                    epoch,
                    b,
                )?;
                updates_total += m;
                last_lr = lr_for_replay(m - 1);
                loss
            } else {
                let lr = config.lr_schedule.lr_at(epoch, b, batches_per_epoch);
                let mut arng = rng::stream(master, "attack", &[epoch as u64, b as u64]);
                let loss =
                    adversarial_update(model, &mut opt, &x, &y, &attack, lr, epoch, b, &mut arng)?;
                updates_total += 1;
                last_lr = lr;
                loss
            };
            batches_total += 1;
            if kind != BatchKind::Fast {
                pgd_batches += 1;
            }
            loss_sum += batch_loss as f64;

            if detector_on {
                let det = detector.as_mut().expect("detector_on implies a detector");
                if det.due(b + 1) {
                    let reading = detector_reading(model, valid_set, config, epsilon, epoch, b)?;
                    let triggered = det.check(epoch, b, reading)?;
                    emit(
                        &mut records,
                        sink,
                        MetricsRecord::DetectorCheck { epoch, batch: b, reading, triggered },
                    )?;
                    if triggered {
                        let event = *det.triggers().last().expect("check logged the trigger");
                        emit(&mut records, sink, MetricsRecord::trigger(&event))?;
                    }
                }
            }

            if let Some(every) = config.eval_every_batches {
                if (b + 1) % every == 0 {
                    let subset = trace_subset.as_ref().expect("built when tracing is on");
                    let sample = trace_eval(
                        model,
                        subset,
                        &config.eval_attack,
                        rng::derive_seed(master, "trace", &[epoch as u64, b as u64]),
                    )?;
                    emit(
                        &mut records,
                        sink,
                        MetricsRecord::Trace {
                            epoch,
                            batch: b,
                            phase,
                            lr: last_lr,
                            epsilon,
                            clean: sample.clean,
                            robust: sample.robust,
                            attack: attack_label(&attack),
                            wall_ms: None,
                        },
                    )?;
                }
            }
        }

        let mean_loss = (loss_sum / batches.len().max(1) as f64) as f32;
        let clean = clean_accuracy(model, valid_set)?;
        let robust = robust_accuracy(
            model,
            valid_set,
            &config.eval_attack,
            rng::derive_seed(master, "epoch-eval", &[epoch as u64]),
        )?;
        emit(
            &mut records,
            sink,
            MetricsRecord::EpochEnd { epoch, mean_loss, lr: last_lr, epsilon, clean, robust },
        )?;
        epoch_evals.push(EpochEval { epoch, mean_loss, clean, robust });
        wall_ms_per_epoch.push(started.elapsed().as_millis() as u64);

        if config.early_stop && epoch >= early_stop_floor(config) {
            let better = best.as_ref().is_none_or(|b| robust > b.robust);
            if better {
                best = Some(BestSnapshot::capture(model, epoch, clean, robust));
            }
        }

        if let Some(callback) = after_epoch.as_mut() {
            callback(epoch, model, &opt)?;
        }
    }

    Ok(TrainHistory {
        records,
        epoch_evals,
        triggers: detector.map(|d| d.triggers().to_vec()).unwrap_or_default(),
        best,
        optimizer: opt,
        wall_ms_per_epoch,
        batches_total,
        updates_total,
        pgd_batches,
    })
}

/// First epoch eligible for checkpoint selection: `fastadv_w` only counts
/// its PGD phase, everything else the whole run.
fn early_stop_floor(config: &TrainConfig) -> usize {
    match config.strategy {
        Strategy::FastadvW => config.warmup_switch_epoch.unwrap_or(0),
        _ => 0,
    }
}

/// The epoch with the highest robust accuracy among `evals` at or after
/// `eligible_from`; ties go to the earliest epoch.
pub fn select_best(evals: &[EpochEval], eligible_from: usize) -> Result<usize> {
    let mut best: Option<&EpochEval> = None;
    for eval in evals.iter().filter(|e| e.epoch >= eligible_from) {
        if best.is_none_or(|b| eval.robust > b.robust) {
            best = Some(eval);
        }
    }
    best.map(|e| e.epoch).ok_or_else(|| {
        Error::input(format!("no epoch evaluations at or after epoch {eligible_from}"))
    })
}

/// Which epoch's weights a finished run should report: best robust accuracy,
/// restricted to the PGD phase for `fastadv_w`.
pub fn early_stop_select(history: &TrainHistory, config: &TrainConfig) -> Result<usize> {
    select_best(&history.epoch_evals, early_stop_floor(config))
}

/// One seed's outcome in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    /// First epoch whose end-of-epoch robust accuracy fell below the floor,
    /// or the epoch a run aborted on a non-finite loss; `None` for runs that
    /// never collapsed.
    pub collapse_epoch: Option<usize>,
    /// Whether any later epoch climbed back to or above the floor.
    pub recovered: bool,
    /// Best accuracies over the epochs before the collapse (the whole run
    /// when there was none); zero when the run collapsed immediately.
    pub best_clean: f32,
    pub best_robust: f32,
    /// Robust accuracy at the last completed epoch, zero if none completed.
    pub final_robust: f32,
}

/// Train one fresh model per seed and summarize collapse behavior. A run
/// that aborts on a non-finite loss is recorded as collapsing at the abort
/// epoch, with the epochs it completed first reconstructed from its metrics
/// stream.
pub fn seed_sweep(
    config: &TrainConfig,
    arch: &str,
    train_set: &Dataset,
    valid_set: &Dataset,
    seeds: &[u64],
    collapse_floor: f32,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let mut model = build_model(
            arch,
            train_set.image_shape(),
            train_set.num_classes() as usize,
            seed,
        )?;
        let mut sink = VecSink::default();
        let (evals, aborted_at) = match train(model.as_mut(), train_set, valid_set, &cfg, &mut sink)
        {
            Ok(history) => (history.epoch_evals, None),
            Err(Error::NonFinite { epoch, .. }) => {
                let evals = sink
                    .0
                    .iter()
                    .filter_map(|r| match *r {
                        MetricsRecord::EpochEnd { epoch, mean_loss, clean, robust, .. } => {
                            Some(EpochEval { epoch, mean_loss, clean, robust })
                        }
                        _ => None,
                    })
                    .collect();
                (evals, Some(epoch))
            }
            Err(e) => return Err(e),
        };
        let natural = evals.iter().find(|e| e.robust < collapse_floor).map(|e| e.epoch);
        let collapse_epoch = match (natural, aborted_at) {
            (Some(n), Some(a)) => Some(n.min(a)),
            (n, a) => n.or(a),
        };
        let window: Vec<&EpochEval> = match collapse_epoch {
            Some(c) => evals.iter().filter(|e| e.epoch < c).collect(),
            None => evals.iter().collect(),
        };
        let recovered = match collapse_epoch {
            Some(c) => evals.iter().any(|e| e.epoch > c && e.robust >= collapse_floor),
            None => false,
        };
        rows.push(SweepRow {
            seed,
            collapse_epoch,
            recovered,
            best_clean: window.iter().map(|e| e.clean).fold(0.0, f32::max),
            best_robust: window.iter().map(|e| e.robust).fold(0.0, f32::max),
            final_robust: evals.last().map_or(0.0, |e| e.robust),
        });
    }
    Ok(rows)
}
