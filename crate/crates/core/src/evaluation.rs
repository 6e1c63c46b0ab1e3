//! Clean and robust accuracy measurement.
//!
//! Robust accuracy is the fraction of examples still classified correctly
//! after a multi-restart PGD attack. Two flavors exist: the plain metric
//! scores the attacked input only, while the clean-pass variant additionally
//! requires the unattacked input to be correct (equivalent to giving the
//! attacker the zero perturbation as a free candidate), which guarantees
//! `robust <= clean` on the same examples.
//!
//! Every function here takes the model immutably: evaluation never changes
//! parameters or running statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{multi_restart_attack, AttackConfig};
use crate::data::Dataset;
use crate::model::{Classifier, LossKind, Mode};
use crate::rng;
use crate::tensor::argmax_classes;
use crate::{Error, Result};

/// Examples scored per forward pass; chunking is sequential and thus
/// deterministic.
const EVAL_BATCH: usize = 256;

/// PGD step size used by every evaluation attack at CIFAR budgets.
pub const EVAL_ALPHA: f32 = 2.0 / 255.0;

/// The cheap per-trace attack: 10-step PGD, one restart.
pub fn pgd10(epsilon: f32) -> AttackConfig {
    AttackConfig::pgd(epsilon, EVAL_ALPHA, 10)
}

/// The headline reporting attack: 50-step PGD with 10 restarts.
pub fn pgd50x10(epsilon: f32) -> AttackConfig {
    AttackConfig::pgd(epsilon, EVAL_ALPHA, 50).with_restarts(10)
}

/// Margin-loss PGD standing in for a C&W attack: 50 steps, one restart.
pub fn cw50(epsilon: f32) -> AttackConfig {
    AttackConfig::pgd(epsilon, EVAL_ALPHA, 50).with_loss(LossKind::CwMargin)
}

/// Fraction of the split classified correctly in evaluation mode.
pub fn clean_accuracy(model: &dyn Classifier, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    let mut correct = 0usize;
    for chunk in index_chunks(data.len()) {
        let (x, y) = data.batch(&chunk);
        let preds = argmax_classes(&model.forward(&x)?);
        correct += preds.iter().zip(y.labels()).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Fraction of the split classified correctly after the attack, scoring the
/// worst perturbation over all restarts. `epsilon = 0` short-circuits to
/// scoring the unperturbed inputs, which is exactly [`clean_accuracy`].
pub fn robust_accuracy(
    model: &dyn Classifier,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f32> {
    attacked_accuracy(model, data, cfg, seed, false)
}

/// Like [`robust_accuracy`] but an example also has to be correct on the
/// unattacked input, so the result can never exceed [`clean_accuracy`].
pub fn robust_accuracy_with_clean_pass(
    model: &dyn Classifier,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f32> {
    attacked_accuracy(model, data, cfg, seed, true)
}

fn attacked_accuracy(
    model: &dyn Classifier,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
    clean_pass: bool,
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    if cfg.epsilon == 0.0 {
        // Zero budget: the only admissible perturbation is zero, under both
        // scoring rules.
        return clean_accuracy(model, data);
    }
    cfg.validate()?;
    let mut robust = 0usize;
    for (b, chunk) in index_chunks(data.len()).into_iter().enumerate() {
        let (x, y) = data.batch(&chunk);
        let mut stream = rng::stream(seed, "eval", &[b as u64]);
        let outcome = multi_restart_attack(model, &x, &y, cfg, Mode::Eval, &mut stream)?;
        if clean_pass {
            let preds = argmax_classes(&model.forward(&x)?);
            for ((&fooled, &pred), &truth) in
                outcome.success.iter().zip(&preds).zip(y.labels())
            {
                if !fooled && pred == truth {
                    robust += 1;
                }
            }
        } else {
            robust += outcome.success.iter().filter(|&&s| !s).count();
        }
    }
    Ok(robust as f32 / data.len() as f32)
}

/// One point of a training-time accuracy trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub clean: f32,
    pub robust: f32,
}

/// Clean plus robust accuracy on a fixed subset, for dense in-training
/// traces. Callers pass the cheap attack ([`pgd10`]) so the overhead stays
/// bounded; the heavyweight battery is reserved for final reports.
pub fn trace_eval(
    model: &dyn Classifier,
    subset: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<TraceSample> {
    Ok(TraceSample {
        clean: clean_accuracy(model, subset)?,
        robust: robust_accuracy(model, subset, cfg, seed)?,
    })
}

/// Final evaluation report: clean accuracy plus one clean-pass robust
/// accuracy per battery attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub clean_accuracy: f32,
    /// Attack name → robust accuracy (clean-pass scoring).
    pub robust: BTreeMap<String, f32>,
    /// Attack name → the exact configuration used.
    pub attacks: BTreeMap<String, AttackConfig>,
    /// Attacks deliberately not run. FAB and AutoAttack-style ensembles are
    /// out of scope; listed here so report consumers see the omission rather
    /// than inferring it.
    pub excluded_attacks: Vec<String>,
    /// Checkpoint the model came from, when the caller tracks one.
    pub checkpoint: Option<String>,
}

/// The attacks the battery runs, with their report names.
pub fn battery_attacks(epsilon: f32) -> Vec<(&'static str, AttackConfig)> {
    vec![("pgd10", pgd10(epsilon)), ("pgd50x10", pgd50x10(epsilon)), ("cw50", cw50(epsilon))]
}

/// Runs the full attack battery (PGD-10, PGD-50×10, margin-loss PGD-50) at
/// budget `epsilon` and assembles the report. Fails on an empty split before
/// doing any work.
pub fn attack_battery(
    model: &dyn Classifier,
    data: &Dataset,
    epsilon: f32,
    seed: u64,
    checkpoint: Option<String>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    let clean = clean_accuracy(model, data)?;
    let mut robust = BTreeMap::new();
    let mut attacks = BTreeMap::new();
    for (name, cfg) in battery_attacks(epsilon) {
        let acc = robust_accuracy_with_clean_pass(model, data, &cfg, seed)?;
        robust.insert(name.to_string(), acc);
        attacks.insert(name.to_string(), cfg);
    }
    Ok(EvalReport {
        n_examples: data.len(),
        clean_accuracy: clean,
        robust,
        attacks,
        excluded_attacks: vec!["fab".to_string(), "autoattack".to_string()],
        checkpoint,
    })
}

fn index_chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<usize>>().chunks(EVAL_BATCH).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::model::{DeskCnn, LinearModel};
    use crate::optim::{SgdConfig, SgdState};
    use ndarray::Array4;

    fn blobs(seed: u64, n: usize, classes: u32) -> Dataset {
        synthetic_dataset(seed, &SyntheticSpec::blobs(n, (3, 8, 8), classes)).unwrap()
    }

    /// Zeroed weights and biases give constant logits, so argmax always says
    /// class 0 and accuracy is the class-0 frequency exactly.
    #[test]
    fn clean_accuracy_of_a_constant_model_is_the_majority_share() {
        let data = blobs(1, 100, 10);
        let mut model = LinearModel::new((3, 8, 8), 10, 0);
        for p in model.params_mut() {
            p.fill(0.0);
        }
        assert_eq!(clean_accuracy(&model, &data).unwrap(), 0.10);
    }

    #[test]
    fn clean_accuracy_reaches_one_on_a_memorized_set_and_ignores_duplication() {
        let data = blobs(2, 10, 2);
        let mut model = LinearModel::new((3, 8, 8), 2, 3);
        let mut opt = SgdState::new(&model, SgdConfig { momentum: 0.9, weight_decay: 0.0 }).unwrap();
        let (x, y) = data.full();
        for _ in 0..100 {
            let (_, grads) = model.loss_and_param_grads(&x, &y).unwrap();
            opt.apply(&mut model, &grads, 0.5);
        }
        assert_eq!(clean_accuracy(&model, &data).unwrap(), 1.0);

        let partial = data.subset(&[0, 1, 2, 3]);
        let doubled = data.subset(&[0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(
            clean_accuracy(&model, &partial).unwrap(),
            clean_accuracy(&model, &doubled).unwrap()
        );
    }

    #[test]
    fn empty_split_is_an_error_everywhere() {
        let empty = Dataset::new(Array4::zeros((0, 3, 8, 8)), vec![], 10).unwrap();
        let model = LinearModel::new((3, 8, 8), 10, 0);
        assert!(clean_accuracy(&model, &empty).is_err());
        assert!(robust_accuracy(&model, &empty, &pgd10(8.0 / 255.0), 0).is_err());
        assert!(attack_battery(&model, &empty, 8.0 / 255.0, 0, None).is_err());
    }

    #[test]
    fn zero_budget_robust_accuracy_equals_clean_exactly() {
        let data = blobs(4, 64, 2);
        let model = LinearModel::new((3, 8, 8), 2, 5);
        let mut cfg = pgd10(8.0 / 255.0);
        cfg.epsilon = 0.0;
        let clean = clean_accuracy(&model, &data).unwrap();
        assert_eq!(robust_accuracy(&model, &data, &cfg, 9).unwrap(), clean);
        assert_eq!(robust_accuracy_with_clean_pass(&model, &data, &cfg, 9).unwrap(), clean);
    }

    #[test]
    fn more_restarts_never_report_higher_robustness() {
        let data = blobs(5, 80, 2);
        let model = LinearModel::new((3, 8, 8), 2, 6);
        let eps = 8.0 / 255.0;
        let one = robust_accuracy(&model, &data, &AttackConfig::pgd(eps, EVAL_ALPHA, 5), 11).unwrap();
        let three = robust_accuracy(
            &model,
            &data,
            &AttackConfig::pgd(eps, EVAL_ALPHA, 5).with_restarts(3),
            11,
        )
        .unwrap();
        assert!(three <= one, "restarts=3 gave {three}, restarts=1 gave {one}");

        let clean = clean_accuracy(&model, &data).unwrap();
        let floor = robust_accuracy_with_clean_pass(
            &model,
            &data,
            &AttackConfig::pgd(eps, EVAL_ALPHA, 5),
            11,
        )
        .unwrap();
        assert!(floor <= clean, "clean-pass robust {floor} above clean {clean}");
        assert!(floor <= one + 1e-6);
    }

    #[test]
    fn robust_accuracy_replays_exactly_under_a_seed() {
        let data = blobs(6, 40, 2);
        let model = LinearModel::new((3, 8, 8), 2, 7);
        let cfg = pgd10(8.0 / 255.0);
        let a = robust_accuracy(&model, &data, &cfg, 21).unwrap();
        let b = robust_accuracy(&model, &data, &cfg, 21).unwrap();
        assert_eq!(a, b);
    }

    /// A linear decision stump with every example within epsilon of the
    /// boundary: clean accuracy is perfect, robust accuracy is zero, and a
    /// trace sample shows the collapse unmistakably.
    #[test]
    fn trace_sample_exposes_a_rigged_collapse() {
        let pixels = [0.52f32, 0.53, 0.48, 0.47];
        let labels = vec![0u32, 0, 1, 1];
        let images =
            Array4::from_shape_vec((4, 1, 1, 1), pixels.to_vec()).unwrap();
        let data = Dataset::new(images, labels, 2).unwrap();

        let mut model = LinearModel::new((1, 1, 1), 2, 0);
        // Class 0 iff pixel > 0.5, with margin 2|pixel - 0.5| < 2 * epsilon.
        model.params_mut()[0].fill(0.0);
        model.params_mut()[0][[0, 0]] = 1.0;
        model.params_mut()[0][[1, 0]] = -1.0;
        model.params_mut()[1][[0]] = -0.5;
        model.params_mut()[1][[1]] = 0.5;

        let sample = trace_eval(&model, &data, &pgd10(8.0 / 255.0), 3).unwrap();
        assert_eq!(sample.clean, 1.0);
        assert!(sample.robust < 0.05, "robust accuracy {} should collapse", sample.robust);
    }

    #[test]
    fn battery_reports_all_attacks_with_sane_ordering_and_documents_omissions() {
        let data = blobs(8, 60, 2);
        let mut model = LinearModel::new((3, 8, 8), 2, 9);
        let mut opt = SgdState::new(&model, SgdConfig { momentum: 0.9, weight_decay: 0.0 }).unwrap();
        let (x, y) = data.full();
        for _ in 0..60 {
            let (_, grads) = model.loss_and_param_grads(&x, &y).unwrap();
            opt.apply(&mut model, &grads, 0.5);
        }

        let report = attack_battery(&model, &data, 4.0 / 255.0, 13, Some("ckpt-3".into())).unwrap();
        assert_eq!(report.n_examples, 60);
        assert_eq!(report.checkpoint.as_deref(), Some("ckpt-3"));
        for name in ["pgd10", "pgd50x10", "cw50"] {
            let acc = report.robust[name];
            assert!((0.0..=1.0).contains(&acc));
            assert!(acc <= report.clean_accuracy, "{name}: {acc} > clean");
            assert_eq!(report.attacks[name].epsilon, 4.0 / 255.0);
        }
        assert!(
            report.robust["pgd50x10"] <= report.robust["pgd10"] + 1e-6,
            "stronger attack reported more robustness"
        );
        assert!(report.excluded_attacks.iter().any(|a| a == "fab"));

        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn evaluation_leaves_model_parameters_and_buffers_untouched() {
        let data = blobs(10, 24, 2);
        let mut model = DeskCnn::new((3, 8, 8), 2, 3, 4).unwrap();
        // Exercise train-mode machinery once so any lazily-initialized state
        // exists before the snapshot.
        let (x, y) = data.batch(&[0, 1, 2, 3]);
        model.loss_and_param_grads(&x, &y).unwrap();

        let params_before: Vec<Vec<u8>> =
            model.params().iter().map(bytes_of).collect();
        let buffers_before: Vec<Vec<u8>> =
            model.buffers().iter().map(|b| bytes_of(b)).collect();

        attack_battery(&model, &data, 8.0 / 255.0, 5, None).unwrap();

        let params_after: Vec<Vec<u8>> = model.params().iter().map(bytes_of).collect();
        let buffers_after: Vec<Vec<u8>> =
            model.buffers().iter().map(|b| bytes_of(b)).collect();
        assert_eq!(params_before, params_after, "evaluation moved parameters");
        assert_eq!(buffers_before, buffers_after, "evaluation moved buffers");
    }

    fn bytes_of(a: &ndarray::ArrayD<f32>) -> Vec<u8> {
        a.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
