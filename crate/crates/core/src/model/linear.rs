//! Linear (softmax-regression) classifier on flattened pixels.
//!
//! Small enough for closed-form reasoning and finite-difference checks; used
//! throughout the test suite as the cheap stand-in model.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;

use super::layers::{linear_backward_input, linear_backward_params, linear_forward};
use super::{check_batch, loss_grad, loss_value, Classifier, LossKind, Mode};
use crate::error::Result;
use crate::rng;
use crate::tensor::{ImageBatch, LabelBatch, Logits};

/// `logits = W * flatten(x) + b`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    input_shape: (usize, usize, usize),
    num_classes: usize,
    /// `[weight (k, d), bias (k)]`.
    params: Vec<ArrayD<f32>>,
}

impl LinearModel {
    pub fn new(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Self {
        let (c, h, w) = input_shape;
        let d = c * h * w;
        let mut r = rng::stream(seed, "init", &[]);
        let scale = (1.0 / d as f32).sqrt();
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&[num_classes, d]), || {
            r.gen_range(-scale..scale)
        });
        let bias = ArrayD::zeros(IxDyn(&[num_classes]));
        LinearModel { input_shape, num_classes, params: vec![weight, bias] }
    }

    fn weight(&self) -> Array2<f32> {
        self.params[0].clone().into_dimensionality().unwrap()
    }

    fn bias(&self) -> Array1<f32> {
        self.params[1].clone().into_dimensionality().unwrap()
    }

    fn flatten(&self, x: &ImageBatch) -> Array2<f32> {
        let (c, h, w) = self.input_shape;
        x.array()
            .to_shape((x.len(), c * h * w))
            .expect("image batch is standard layout")
            .to_owned()
    }
}

impl Classifier for LinearModel {
    fn arch_id(&self) -> String {
        "linear".to_string()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn params(&self) -> &[ArrayD<f32>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [ArrayD<f32>] {
        &mut self.params
    }

    fn forward_mode(&self, x: &ImageBatch, _mode: Mode) -> Result<Logits> {
        check_batch(self, x, None)?;
        let flat = self.flatten(x);
        Ok(linear_forward(&flat.view(), &self.weight().view(), &self.bias().view()))
    }

    fn input_gradient(
        &self,
        x: &ImageBatch,
        y: &LabelBatch,
        loss: LossKind,
        mode: Mode,
    ) -> Result<Array4<f32>> {
        check_batch(self, x, Some(y))?;
        let logits = self.forward_mode(x, mode)?;
        let dlogits = loss_grad(loss, &logits, y);
        let dflat = linear_backward_input(&dlogits.view(), &self.weight().view());
        let (c, h, w) = self.input_shape;
        Ok(dflat
            .to_shape((x.len(), c, h, w))
            .expect("gradient is standard layout")
            .to_owned())
    }

    fn loss_and_param_grads(
        &mut self,
        x: &ImageBatch,
        y: &LabelBatch,
    ) -> Result<(f32, Vec<ArrayD<f32>>)> {
        check_batch(self, x, Some(y))?;
        let flat = self.flatten(x);
        let logits = linear_forward(&flat.view(), &self.weight().view(), &self.bias().view());
        let loss = loss_value(LossKind::CrossEntropy, &logits, y);
        let dlogits = loss_grad(LossKind::CrossEntropy, &logits, y);
        let (dw, db) = linear_backward_params(&dlogits.view(), &flat.view());
        Ok((loss, vec![dw.into_dyn(), db.into_dyn()]))
    }

    fn clone_box(&self) -> Box<dyn Classifier> {
        Box::new(self.clone())
    }
}
