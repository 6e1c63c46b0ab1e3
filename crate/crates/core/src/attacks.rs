//! Attack kernels: the fast single-step attack, its randomly-initialized
//! variant, multi-step projected gradient ascent, and multi-restart
//! evaluation attacks.
//!
//! Everything here is expressed as a perturbation `delta` added to a clean
//! batch. Two invariants hold for every attack output and are cheap enough
//! to assert in debug builds on every call:
//!
//! * `max |delta| <= epsilon`, and
//! * `x + delta` lies in `[0, 1]` elementwise, exactly, in `f32` arithmetic.
//!
//! [`project`] enforces both by clamping `delta` per pixel to
//! `[max(-eps, -x), min(eps, 1 - x)]`. The bounds are computed once from the
//! clean pixel, so projecting twice is a bit-exact no-op and the projected
//! magnitude never exceeds the input magnitude.

use ndarray::{Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Classifier, LossKind, Mode};
use crate::tensor::{argmax_classes, ImageBatch, LabelBatch};
use crate::{Error, Result};

/// Parameters of an ℓ∞ attack, in raw pixel units (so 8/255 means the same
/// thing it does in the literature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ budget.
    pub epsilon: f32,
    /// Per-step size.
    pub alpha: f32,
    /// Number of gradient steps.
    pub steps: usize,
    /// Number of independent restarts (only [`multi_restart_attack`] uses
    /// more than one).
    pub restarts: usize,
    /// Start from a uniform draw in the scaled ε-ball instead of zero.
    pub random_init: bool,
    /// Multiplier on ε for the uniform initialization.
    pub init_scale: f32,
    /// Objective whose gradient drives the ascent.
    pub loss: LossKind,
}

impl AttackConfig {
    /// Single sign step of size ε from the clean image.
    pub fn fgsm(epsilon: f32) -> Self {
        AttackConfig {
            epsilon,
            alpha: epsilon,
            steps: 1,
            restarts: 1,
            random_init: false,
            init_scale: 1.0,
            loss: LossKind::CrossEntropy,
        }
    }

    /// The fast training attack: uniform init over the full ε-ball, then one
    /// ε-sized sign step, projected back to the ball.
    pub fn rfgsm(epsilon: f32) -> Self {
        AttackConfig { random_init: true, ..AttackConfig::fgsm(epsilon) }
    }

    /// Multi-step projected gradient ascent with random initialization.
    pub fn pgd(epsilon: f32, alpha: f32, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            alpha,
            steps,
            restarts: 1,
            random_init: true,
            init_scale: 1.0,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config(format!(
                "attack epsilon must be in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::config(format!("attack alpha must be positive, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        if self.restarts == 0 {
            return Err(Error::config("attack needs at least one restart"));
        }
        if !(0.0..=1.0).contains(&self.init_scale) || self.init_scale.is_nan() {
            return Err(Error::config(format!(
                "init_scale must be in [0, 1], got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// An additive image perturbation tied to the batch it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    delta: Array4<f32>,
}

impl Perturbation {
    /// The all-zeros perturbation for a batch of the given dimensions.
    pub fn zeros(dim: (usize, usize, usize, usize)) -> Self {
        Perturbation { delta: Array4::zeros(dim) }
    }

    /// Wrap an already-projected delta. Debug builds re-check the image-range
    /// half of the invariant on [`apply`]; the ε bound is the caller's.
    ///
    /// [`apply`]: Perturbation::apply
    pub fn from_projected(delta: Array4<f32>) -> Self {
        Perturbation { delta }
    }

    pub fn delta(&self) -> &Array4<f32> {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut Array4<f32> {
        &mut self.delta
    }

    pub fn into_delta(self) -> Array4<f32> {
        self.delta
    }

    /// The adversarial batch `x + delta`.
    pub fn apply(&self, x: &ImageBatch) -> ImageBatch {
        ImageBatch::from_valid(x.array() + &self.delta)
    }

    /// Largest absolute entry.
    pub fn linf(&self) -> f32 {
        self.delta.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Uniform draw over `[-init_scale * eps, +init_scale * eps]` per pixel.
/// The result is *not* image-range clipped; compose with [`project`].
pub fn random_init<R: Rng + ?Sized>(
    dim: (usize, usize, usize, usize),
    epsilon: f32,
    init_scale: f32,
    rng: &mut R,
) -> Array4<f32> {
    let bound = init_scale * epsilon;
    if bound == 0.0 {
        return Array4::zeros(dim);
    }
    Array4::from_shape_simple_fn(dim, || rng.gen_range(-bound..=bound))
}

/// Clamp `delta` into the ε-ball intersected with the valid-image box, per
/// pixel: `delta := clamp(delta, max(-eps, -x), min(eps, 1 - x))`.
///
/// Both bounds bracket zero, so the feasible set is never empty, projecting
/// never increases a pixel's magnitude, and a second application returns the
/// input bit-for-bit. `x + delta` lands in `[0, 1]` exactly: the upper bound
/// `fl(1 - x)` satisfies `fl(x + fl(1 - x)) <= 1` in round-to-nearest `f32`
/// (exact by Sterbenz for `x >= 0.5`, within a half-ulp below the rounding
/// midpoint otherwise), and the lower bound gives `x + (-x) = 0` exactly.
pub fn project(delta: &mut Array4<f32>, epsilon: f32, x: &ImageBatch) {
    Zip::from(delta).and(x.array()).for_each(|d, &xv| {
        let lo = (-epsilon).max(-xv);
        let hi = epsilon.min(1.0 - xv);
        *d = d.clamp(lo, hi);
    });
}

fn sign0(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `delta += alpha * sign(grad)` elementwise, with `sign(0) = 0`. Leaves the
/// result unprojected; compose with [`project`].
pub fn sign_ascent_step(delta: &mut Array4<f32>, grad: &Array4<f32>, alpha: f32) {
    Zip::from(delta).and(grad).for_each(|d, &g| {
        *d += alpha * sign0(g);
    });
}

/// One projected ascent step in place: gradient of the objective at
/// `x + delta`, a sign step of size `alpha`, then [`project`].
///
/// `delta` must already satisfy the perturbation invariants (project any
/// hand-built value first), since the gradient is taken at `x + delta`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_step(
    model: &dyn Classifier,
    x: &ImageBatch,
    delta: &mut Array4<f32>,
    y: &LabelBatch,
    alpha: f32,
    epsilon: f32,
    loss: LossKind,
    mode: Mode,
) -> Result<()> {
    let adv = ImageBatch::from_valid(x.array() + &*delta);
    let grad = model.input_gradient(&adv, y, loss, mode)?;
    sign_ascent_step(delta, &grad, alpha);
    project(delta, epsilon, x);
    Ok(())
}

/// Full attack: optional random initialization, then `cfg.steps` projected
/// ascent steps. `rng` is consumed only when `cfg.random_init` is set.
///
/// `mode` selects the statistics the model normalizes with while under
/// attack: training-time attacks use [`Mode::Train`] (batch statistics, the
/// convention of the fast-training literature), evaluation attacks
/// [`Mode::Eval`]. Neither touches the model's running buffers.
pub fn pgd_attack<R: Rng + ?Sized>(
    model: &dyn Classifier,
    x: &ImageBatch,
    y: &LabelBatch,
    cfg: &AttackConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Perturbation> {
    cfg.validate()?;
    let dim = x.array().dim();
    let mut delta = if cfg.random_init {
        random_init(dim, cfg.epsilon, cfg.init_scale, rng)
    } else {
        Array4::zeros(dim)
    };
    // The first gradient is taken at x + delta, which must be a valid image.
    project(&mut delta, cfg.epsilon, x);
    for _ in 0..cfg.steps {
        pgd_step(model, x, &mut delta, y, cfg.alpha, cfg.epsilon, cfg.loss, mode)?;
    }
    debug_assert!(
        delta.iter().all(|&d| d.abs() <= cfg.epsilon),
        "attack left the epsilon ball"
    );
    Ok(Perturbation { delta })
}

/// Single sign step of size ε from the clean batch. Defined as (and therefore
/// bit-identical to) the one-step, full-stride, no-initialization attack.
pub fn fgsm(
    model: &dyn Classifier,
    x: &ImageBatch,
    y: &LabelBatch,
    epsilon: f32,
    mode: Mode,
) -> Result<Perturbation> {
    // Never sampled: the config below draws no randomness.
    let mut unused = crate::rng::stream(0, "attack", &[]);
    pgd_attack(model, x, y, &AttackConfig::fgsm(epsilon), mode, &mut unused)
}

/// Outcome of a multi-restart attack over one batch.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Per example: did any restart flip the prediction away from the label?
    pub success: Vec<bool>,
    /// Per example, the first successful delta, or the last attempt when
    /// every restart failed.
    pub worst: Perturbation,
}

impl AttackOutcome {
    /// Fraction of the batch that resisted every restart.
    pub fn surviving_fraction(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| !s).count() as f64 / self.success.len() as f64
    }
}

/// Run `cfg.restarts` independent attacks, drawing each initialization from
/// `rng` in sequence, and merge per-example results. An example counts as
/// successfully attacked when any restart misclassifies it; with one restart
/// this is exactly the [`pgd_attack`] success set.
pub fn multi_restart_attack<R: Rng + ?Sized>(
    model: &dyn Classifier,
    x: &ImageBatch,
    y: &LabelBatch,
    cfg: &AttackConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let mut success = vec![false; x.len()];
    let mut worst: Option<Array4<f32>> = None;
    for _ in 0..cfg.restarts {
        let attempt = pgd_attack(model, x, y, cfg, mode, rng)?;
        let pred = argmax_classes(&model.forward_mode(&attempt.apply(x), mode)?);
        let delta = attempt.into_delta();
        match worst.as_mut() {
            None => {
                for (flag, (&p, &t)) in success.iter_mut().zip(pred.iter().zip(y.labels())) {
                    *flag = p != t;
                }
                worst = Some(delta);
            }
            Some(w) => {
                for i in 0..x.len() {
                    if success[i] {
                        continue; // keep the first successful delta
                    }
                    w.index_axis_mut(ndarray::Axis(0), i)
                        .assign(&delta.index_axis(ndarray::Axis(0), i));
                    if pred[i] != y.labels()[i] {
                        success[i] = true;
                    }
                }
            }
        }
    }
    Ok(AttackOutcome {
        success,
        worst: Perturbation { delta: worst.expect("restarts >= 1 was validated") },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LinearModel};
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};

    const EPS: f32 = 8.0 / 255.0;

    /// Two-class model over a single pixel with hand-set weights, so the
    /// input gradient has a known sign everywhere.
    fn one_pixel_model(w0: f32, w1: f32) -> LinearModel {
        let mut m = LinearModel::new((1, 1, 1), 2, 0);
        m.params_mut()[0].assign(&Array2::from_shape_vec((2, 1), vec![w0, w1]).unwrap());
        m.params_mut()[1].assign(&Array1::from_vec(vec![0.0f32, 0.0]));
        m
    }

    fn batch_of(values: &[f32]) -> ImageBatch {
        let n = values.len();
        ImageBatch::new(Array4::from_shape_vec((n, 1, 1, 1), values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn config_validation_rejects_out_of_range_fields() {
        assert!(AttackConfig::fgsm(EPS).validate().is_ok());
        assert!(AttackConfig::fgsm(0.0).validate().is_err());
        assert!(AttackConfig::fgsm(1.5).validate().is_err());
        assert!(AttackConfig { alpha: 0.0, ..AttackConfig::fgsm(EPS) }.validate().is_err());
        assert!(AttackConfig { steps: 0, ..AttackConfig::fgsm(EPS) }.validate().is_err());
        assert!(AttackConfig { restarts: 0, ..AttackConfig::fgsm(EPS) }.validate().is_err());
        assert!(AttackConfig { init_scale: 1.2, ..AttackConfig::fgsm(EPS) }.validate().is_err());
        assert!(AttackConfig { init_scale: -0.1, ..AttackConfig::fgsm(EPS) }.validate().is_err());
    }

    #[test]
    fn random_init_follows_the_uniform_law() {
        // 10^5 draws from U[-eps, eps]: max within the bound, mean |delta|
        // within 2% of eps/2, and bit-identical under a replayed stream.
        let dim = (10, 10, 10, 100);
        let mut r = rng::stream(5, "attack", &[]);
        let d = random_init(dim, EPS, 1.0, &mut r);
        assert!(d.iter().all(|&v| v.abs() <= EPS));
        let mean_abs = d.iter().map(|&v| v.abs() as f64).sum::<f64>() / d.len() as f64;
        let expected = EPS as f64 / 2.0;
        assert!(
            (mean_abs - expected).abs() <= 0.02 * expected,
            "mean |delta| = {mean_abs}, want about {expected}"
        );
        let mut r2 = rng::stream(5, "attack", &[]);
        assert_eq!(d, random_init(dim, EPS, 1.0, &mut r2));
        // Degenerate scale draws nothing.
        assert!(random_init(dim, EPS, 0.0, &mut r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_clamps_to_ball_and_image_range() {
        let x = batch_of(&[0.5, 1.0, 0.0, 0.02]);
        let mut d = Array4::from_shape_vec(
            (4, 1, 1, 1),
            vec![2.0 * EPS, 0.5 * EPS, -0.5 * EPS, -EPS],
        )
        .unwrap();
        project(&mut d, EPS, &x);
        assert_eq!(d[[0, 0, 0, 0]], EPS); // ball clamp
        assert_eq!(d[[1, 0, 0, 0]], 0.0); // x = 1, positive delta dies
        assert_eq!(d[[2, 0, 0, 0]], 0.0); // x = 0, negative delta dies
        assert_eq!(d[[3, 0, 0, 0]], -0.02); // image range tighter than ball
    }

    #[test]
    fn projection_is_idempotent_and_contractive_on_random_tensors() {
        let mut r = rng::stream(6, "attack", &[]);
        for trial in 0..50u64 {
            let mut rr = rng::stream(6, "attack", &[trial]);
            let x = ImageBatch::new(Array4::from_shape_simple_fn((2, 3, 5, 5), || {
                rr.gen_range(0.0f32..=1.0)
            }))
            .unwrap();
            let raw = Array4::from_shape_simple_fn((2, 3, 5, 5), || r.gen_range(-0.3f32..0.3));
            let mut once = raw.clone();
            project(&mut once, EPS, &x);
            let mut twice = once.clone();
            project(&mut twice, EPS, &x);
            assert_eq!(once, twice, "projection must be a bit-exact fixed point");
            for (&p, &q) in once.iter().zip(raw.iter()) {
                assert!(p.abs() <= q.abs(), "projection grew |delta|: {q} -> {p}");
                assert!(p.abs() <= EPS);
            }
            // x + delta is a valid image, exactly.
            let _ = ImageBatch::new(x.array() + &once).unwrap();
        }
    }

    #[test]
    fn fgsm_takes_a_signed_step_on_a_known_gradient() {
        // Loss gradient w.r.t. the pixel is (p - onehot) . w, which is
        // strictly positive for w = (-2, +2) and label 0.
        let m = one_pixel_model(-2.0, 2.0);
        let x = batch_of(&[0.5]);
        let y = LabelBatch::new(vec![0], 2).unwrap();
        let p = fgsm(&m, &x, &y, 0.1, Mode::Eval).unwrap();
        assert_eq!(p.delta()[[0, 0, 0, 0]], 0.1);
        // Same gradient, pixel already at the ceiling: the step projects away.
        let x1 = batch_of(&[1.0]);
        let p1 = fgsm(&m, &x1, &y, 0.1, Mode::Eval).unwrap();
        assert_eq!(p1.delta()[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn fgsm_of_zero_gradient_is_zero() {
        // Identical weights for both classes: logits never separate, the
        // gradient vanishes, and sign(0) = 0 keeps the image clean.
        let m = one_pixel_model(0.7, 0.7);
        let x = batch_of(&[0.4]);
        let y = LabelBatch::new(vec![1], 2).unwrap();
        let p = fgsm(&m, &x, &y, EPS, Mode::Eval).unwrap();
        assert_eq!(p.delta()[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn fgsm_is_single_step_projected_ascent() {
        let m = build_model("desk_cnn_w2", (3, 8, 8), 4, 3).unwrap();
        let mut r = rng::stream(7, "test", &[]);
        let x = ImageBatch::new(Array4::from_shape_simple_fn((3, 3, 8, 8), || {
            r.gen_range(0.0f32..=1.0)
        }))
        .unwrap();
        let y = LabelBatch::new(vec![0, 2, 3], 4).unwrap();
        let direct = fgsm(m.as_ref(), &x, &y, EPS, Mode::Eval).unwrap();
        let mut unused = rng::stream(9, "attack", &[]);
        let via_pgd = pgd_attack(
            m.as_ref(),
            &x,
            &y,
            &AttackConfig::fgsm(EPS),
            Mode::Eval,
            &mut unused,
        )
        .unwrap();
        assert_eq!(direct.delta(), via_pgd.delta());
    }

    #[test]
    fn pgd_steps_do_not_decrease_the_loss_on_a_smooth_model() {
        let m = LinearModel::new((2, 4, 4), 3, 21);
        let mut r = rng::stream(22, "test", &[]);
        let x = ImageBatch::new(Array4::from_shape_simple_fn((4, 2, 4, 4), || {
            r.gen_range(0.2f32..0.8)
        }))
        .unwrap();
        let y = LabelBatch::new(vec![0, 1, 2, 0], 3).unwrap();
        let loss_at = |d: &Array4<f32>| {
            let adv = ImageBatch::new(x.array() + d).unwrap();
            crate::model::cross_entropy(&m.forward(&adv).unwrap(), &y)
        };
        let mut delta = Array4::zeros(x.array().dim());
        let mut prev = loss_at(&delta);
        for _ in 0..10 {
            pgd_step(&m, &x, &mut delta, &y, 1e-3, EPS, LossKind::CrossEntropy, Mode::Eval)
                .unwrap();
            let cur = loss_at(&delta);
            assert!(cur >= prev - 1e-6, "ascent step lowered the loss: {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn pgd_pins_delta_at_the_boundary_under_persistent_gradient() {
        // The one-pixel model's gradient is positive regardless of delta, so
        // the +eps face of the ball is a fixed point of the update.
        let m = one_pixel_model(-2.0, 2.0);
        let x = batch_of(&[0.5]);
        let y = LabelBatch::new(vec![0], 2).unwrap();
        let mut delta = Array4::from_elem((1, 1, 1, 1), EPS);
        pgd_step(&m, &x, &mut delta, &y, 2.0 / 255.0, EPS, LossKind::CrossEntropy, Mode::Eval)
            .unwrap();
        assert_eq!(delta[[0, 0, 0, 0]], EPS);
    }

    #[test]
    fn randomized_attacks_respect_budget_and_replay_determinism() {
        let m = build_model("desk_cnn_w2", (3, 8, 8), 4, 13).unwrap();
        let mut r = rng::stream(14, "test", &[]);
        let x = ImageBatch::new(Array4::from_shape_simple_fn((2, 3, 8, 8), || {
            r.gen_range(0.0f32..=1.0)
        }))
        .unwrap();
        let y = LabelBatch::new(vec![1, 3], 4).unwrap();
        for cfg in [
            AttackConfig::rfgsm(EPS),
            AttackConfig::pgd(EPS, 2.0 / 255.0, 10),
            AttackConfig::pgd(EPS, 2.0 / 255.0, 50),
        ] {
            let mut r1 = rng::stream(15, "attack", &[]);
            let p = pgd_attack(m.as_ref(), &x, &y, &cfg, Mode::Eval, &mut r1).unwrap();
            assert!(p.linf() <= EPS + 1e-7);
            let _ = ImageBatch::new(x.array() + p.delta()).unwrap();
            let mut r2 = rng::stream(15, "attack", &[]);
            let q = pgd_attack(m.as_ref(), &x, &y, &cfg, Mode::Eval, &mut r2).unwrap();
            assert_eq!(p.delta(), q.delta(), "replayed stream must reproduce the attack");
            let mut r3 = rng::stream(16, "attack", &[]);
            let s = pgd_attack(m.as_ref(), &x, &y, &cfg, Mode::Eval, &mut r3).unwrap();
            assert_ne!(p.delta(), s.delta(), "a different stream should move the init");
        }
    }

    #[test]
    fn more_restarts_only_grow_the_success_set() {
        let m = build_model("desk_cnn_w2", (3, 8, 8), 4, 23).unwrap();
        let mut r = rng::stream(24, "test", &[]);
        let x = ImageBatch::new(Array4::from_shape_simple_fn((16, 3, 8, 8), || {
            r.gen_range(0.0f32..=1.0)
        }))
        .unwrap();
        let y = LabelBatch::new((0..16).map(|i| (i % 4) as u32).collect(), 4).unwrap();
        let base = AttackConfig::pgd(EPS, 2.0 / 255.0, 5);

        let mut r1 = rng::stream(25, "attack", &[]);
        let one = multi_restart_attack(m.as_ref(), &x, &y, &base, Mode::Eval, &mut r1).unwrap();
        let mut r1b = rng::stream(25, "attack", &[]);
        let plain = pgd_attack(m.as_ref(), &x, &y, &base, Mode::Eval, &mut r1b).unwrap();
        let plain_pred = argmax_classes(&m.forward(&plain.apply(&x)).unwrap());
        for (i, &flag) in one.success.iter().enumerate() {
            assert_eq!(flag, plain_pred[i] != y.labels()[i], "restarts=1 is the plain attack");
        }

        let mut r5 = rng::stream(25, "attack", &[]);
        let five = multi_restart_attack(
            m.as_ref(),
            &x,
            &y,
            &base.clone().with_restarts(5),
            Mode::Eval,
            &mut r5,
        )
        .unwrap();
        for i in 0..16 {
            assert!(
                !one.success[i] || five.success[i],
                "restart merging lost a success at example {i}"
            );
            if one.success[i] {
                // First-success deltas are frozen, so restart 0's delta survives.
                assert_eq!(
                    five.worst.delta().index_axis(ndarray::Axis(0), i),
                    one.worst.delta().index_axis(ndarray::Axis(0), i)
                );
            }
        }
        assert!(five.worst.linf() <= EPS + 1e-7);
    }

    #[test]
    fn hopeless_model_is_fully_attacked() {
        // Biases force class 1 no matter the input; every label-0 example is
        // down before the attack starts.
        let mut m = one_pixel_model(0.0, 0.0);
        m.params_mut()[1].assign(&Array1::from_vec(vec![0.0f32, 5.0]));
        let x = batch_of(&[0.3, 0.6, 0.9]);
        let y = LabelBatch::new(vec![0, 0, 0], 2).unwrap();
        let mut r = rng::stream(26, "attack", &[]);
        let out =
            multi_restart_attack(&m, &x, &y, &AttackConfig::rfgsm(EPS), Mode::Eval, &mut r)
                .unwrap();
        assert!(out.success.iter().all(|&s| s));
        assert_abs_diff_eq!(out.surviving_fraction(), 0.0);
    }
}
