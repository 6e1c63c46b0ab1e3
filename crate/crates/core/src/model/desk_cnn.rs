//! Desk-scale 4-layer CNN: three 3x3 convolutions, each normalized and
//! rectified, plus a linear head.
//!
//! The default width gives roughly 100k parameters at CIFAR dimensions --
//! small enough to train on one CPU core in minutes, large enough to exhibit
//! the catastrophic-overfitting dynamics the detector exists for. Batch
//! normalization after every convolution keeps the network trainable at the
//! high cyclic learning rates the fast schedules rely on; without it the
//! plain conv stack dies as soon as the rate climbs past ~1e-2.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::Rng;

use super::layers::{
    batchnorm_backward, batchnorm_forward, commit_bn_stats, conv_backward_input,
    conv_backward_params, conv_forward, linear_backward_input, linear_backward_params,
    linear_forward, relu_inplace, relu_mask_inplace, to_channel_major, BnBatchStats, BnCache,
    ConvSpec,
};
use super::{check_batch, loss_grad, loss_value, Classifier, LossKind, Mode};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ImageBatch, LabelBatch, Logits};

/// Default [`DeskCnn`] width (first-layer channels).
pub const DEFAULT_WIDTH: usize = 24;

/// Three conv -> batchnorm -> ReLU blocks (stride 1, 2, 2, all 3x3/pad 1)
/// plus a linear head. Convolutions are bias-free; the norm's shift plays
/// that role.
#[derive(Debug, Clone)]
pub struct DeskCnn {
    input_shape: (usize, usize, usize),
    num_classes: usize,
    width: usize,
    convs: [ConvSpec; 3],
    feat_hw: (usize, usize),
    /// `[w1, gamma1, beta1, w2, gamma2, beta2, w3, gamma3, beta3, fc_w, fc_b]`.
    params: Vec<ArrayD<f32>>,
    /// `[mean1, var1, mean2, var2, mean3, var3]` running statistics.
    buffers: Vec<ArrayD<f32>>,
}

/// Activations cached by the forward pass for backprop.
struct ForwardState {
    acts: [Array4<f32>; 3], // post-ReLU block outputs
    caches: [BnCache; 3],
    stats: [Option<BnBatchStats>; 3],
    cols: Option<[Array2<f32>; 3]>,
    flat: Array2<f32>,
    logits: Logits,
}

fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
}

impl DeskCnn {
    pub fn new(
        input_shape: (usize, usize, usize),
        num_classes: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        let (c, h, w) = input_shape;
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::config(format!(
                "desk_cnn needs height/width divisible by 4, got {h}x{w}"
            )));
        }
        if width == 0 {
            return Err(Error::config("desk_cnn width must be positive"));
        }
        let convs = [
            ConvSpec { in_c: c, out_c: width, ksize: 3, stride: 1, pad: 1 },
            ConvSpec { in_c: width, out_c: 2 * width, ksize: 3, stride: 2, pad: 1 },
            ConvSpec { in_c: 2 * width, out_c: 4 * width, ksize: 3, stride: 2, pad: 1 },
        ];
        let feat_hw = (h / 4, w / 4);
        let feat_dim = 4 * width * feat_hw.0 * feat_hw.1;
        let mut r = rng::stream(seed, "init", &[]);
        let mut params = Vec::with_capacity(11);
        let mut buffers = Vec::with_capacity(6);
        for sp in &convs {
            let fan_in = sp.in_c * sp.ksize * sp.ksize;
            params.push(he_uniform(&mut r, &[sp.out_c, sp.in_c, sp.ksize, sp.ksize], fan_in));
            params.push(ArrayD::ones(IxDyn(&[sp.out_c]))); // gamma
            params.push(ArrayD::zeros(IxDyn(&[sp.out_c]))); // beta
            buffers.push(ArrayD::zeros(IxDyn(&[sp.out_c]))); // running mean
            buffers.push(ArrayD::ones(IxDyn(&[sp.out_c]))); // running var
        }
        params.push(he_uniform(&mut r, &[num_classes, feat_dim], feat_dim));
        params.push(ArrayD::zeros(IxDyn(&[num_classes])));
        Ok(DeskCnn { input_shape, num_classes, width, convs, feat_hw, params, buffers })
    }

    fn conv_w(&self, i: usize) -> Array2<f32> {
        let sp = &self.convs[i];
        self.params[3 * i]
            .to_shape((sp.out_c, sp.in_c * sp.ksize * sp.ksize))
            .unwrap()
            .to_owned()
    }

    fn gamma(&self, i: usize) -> ArrayView1<'_, f32> {
        self.params[3 * i + 1].view().into_dimensionality().unwrap()
    }

    fn beta(&self, i: usize) -> ArrayView1<'_, f32> {
        self.params[3 * i + 2].view().into_dimensionality().unwrap()
    }

    fn running_mean(&self, i: usize) -> ArrayView1<'_, f32> {
        self.buffers[2 * i].view().into_dimensionality().unwrap()
    }

    fn running_var(&self, i: usize) -> ArrayView1<'_, f32> {
        self.buffers[2 * i + 1].view().into_dimensionality().unwrap()
    }

    fn fc_w(&self) -> ArrayView2<'_, f32> {
        self.params[9].view().into_dimensionality().unwrap()
    }

    fn fc_b(&self) -> ArrayView1<'_, f32> {
        self.params[10].view().into_dimensionality().unwrap()
    }

    fn run_forward(&self, x: &ImageBatch, batch_stats: bool, keep_cols: bool) -> ForwardState {
        let b = x.len();
        let mut acts: Vec<Array4<f32>> = Vec::with_capacity(3);
        let mut caches: Vec<BnCache> = Vec::with_capacity(3);
        let mut stats: Vec<Option<BnBatchStats>> = Vec::with_capacity(3);
        let mut cols: Vec<Array2<f32>> = Vec::with_capacity(3);
        for i in 0..3 {
            let w = self.conv_w(i);
            let zero_bias = Array1::<f32>::zeros(self.convs[i].out_c);
            let input = if i == 0 { x.array().view() } else { acts[i - 1].view() };
            let (pre, col) =
                conv_forward(&input, &w.view(), &zero_bias.view(), &self.convs[i]);
            let (mut y, cache, stat) = batchnorm_forward(
                &pre.view(),
                &self.gamma(i),
                &self.beta(i),
                &self.running_mean(i),
                &self.running_var(i),
                batch_stats,
            );
            relu_inplace(&mut y);
            if keep_cols {
                cols.push(col);
            }
            acts.push(y);
            caches.push(cache);
            stats.push(stat);
        }
        let feat_dim = 4 * self.width * self.feat_hw.0 * self.feat_hw.1;
        let flat = acts[2].to_shape((b, feat_dim)).unwrap().to_owned();
        let logits = linear_forward(&flat.view(), &self.fc_w(), &self.fc_b());
        ForwardState {
            acts: acts.try_into().map_err(|_| ()).unwrap(),
            caches: caches.try_into().map_err(|_| ()).unwrap(),
            stats: stats.try_into().map_err(|_| ()).unwrap(),
            cols: keep_cols.then(|| cols.try_into().map_err(|_| ()).unwrap()),
            flat,
            logits,
        }
    }

    /// Backward pass. Always produces the input gradient; produces parameter
    /// gradients too when the forward kept the im2col matrices.
    fn run_backward(
        &self,
        x: &ImageBatch,
        st: &ForwardState,
        dlogits: &Logits,
    ) -> (Array4<f32>, Option<Vec<ArrayD<f32>>>) {
        let b = x.len();
        let (fh, fw) = self.feat_hw;
        let want_params = st.cols.is_some();

        let dflat = linear_backward_input(&dlogits.view(), &self.fc_w());
        let fc_grads = want_params.then(|| {
            let (dw, db) = linear_backward_params(&dlogits.view(), &st.flat.view());
            (dw.into_dyn(), db.into_dyn())
        });
        let mut dcur = dflat.to_shape((b, 4 * self.width, fh, fw)).unwrap().to_owned();

        // Walk block3 -> block1, collecting [dw, dgamma, dbeta] per block.
        let (c_in, h, w) = self.input_shape;
        let in_dims = [(c_in, h, w), (self.width, h, w), (2 * self.width, h / 2, w / 2)];
        let mut block_grads: Vec<[ArrayD<f32>; 3]> = Vec::with_capacity(3);
        for i in (0..3).rev() {
            relu_mask_inplace(&mut dcur, &st.acts[i]);
            let (dbn, dgamma, dbeta) =
                batchnorm_backward(&dcur.view(), &st.caches[i], &self.gamma(i));
            let dy_cm = to_channel_major(&dbn.view());
            if let Some(cols) = &st.cols {
                let (dw, _) = conv_backward_params(&dy_cm.view(), &cols[i].view(), &self.convs[i]);
                let sp = &self.convs[i];
                let dw4 = dw
                    .to_shape((sp.out_c, sp.in_c, sp.ksize, sp.ksize))
                    .unwrap()
                    .to_owned();
                block_grads.push([dw4.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]);
            }
            let (ci, hi, wi) = in_dims[i];
            let wmat = self.conv_w(i);
            dcur = conv_backward_input(&dy_cm.view(), &wmat.view(), &self.convs[i], b, hi, wi);
            debug_assert_eq!(dcur.dim().1, ci);
        }

        let param_grads = fc_grads.map(|(fc_w, fc_b)| {
            let mut ordered = Vec::with_capacity(11);
            for g in block_grads.into_iter().rev() {
                ordered.extend(g);
            }
            ordered.push(fc_w);
            ordered.push(fc_b);
            ordered
        });
        (dcur, param_grads)
    }

    fn commit_stats(&mut self, st: &ForwardState) {
        for (i, stat) in st.stats.iter().enumerate() {
            if let Some(s) = stat {
                let (head, tail) = self.buffers.split_at_mut(2 * i + 1);
                commit_bn_stats(&mut head[2 * i], &mut tail[0], s);
            }
        }
    }
}

impl Classifier for DeskCnn {
    fn arch_id(&self) -> String {
        format!("desk_cnn_w{}", self.width)
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

    fn buffers(&self) -> Vec<&ArrayD<f32>> {
        self.buffers.iter().collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut ArrayD<f32>> {
        self.buffers.iter_mut().collect()
    }

    fn forward_mode(&self, x: &ImageBatch, mode: Mode) -> Result<Logits> {
        check_batch(self, x, None)?;
        Ok(self.run_forward(x, mode == Mode::Train, false).logits)
    }

    fn input_gradient(
        &self,
        x: &ImageBatch,
        y: &LabelBatch,
        loss: LossKind,
        mode: Mode,
    ) -> Result<Array4<f32>> {
        check_batch(self, x, Some(y))?;
        let st = self.run_forward(x, mode == Mode::Train, false);
        let dlogits = loss_grad(loss, &st.logits, y);
        Ok(self.run_backward(x, &st, &dlogits).0)
    }

    fn loss_and_param_grads(
        &mut self,
        x: &ImageBatch,
        y: &LabelBatch,
    ) -> Result<(f32, Vec<ArrayD<f32>>)> {
        check_batch(self, x, Some(y))?;
        let st = self.run_forward(x, true, true);
        let loss = loss_value(LossKind::CrossEntropy, &st.logits, y);
        let dlogits = loss_grad(LossKind::CrossEntropy, &st.logits, y);
        let (_, grads) = self.run_backward(x, &st, &dlogits);
        self.commit_stats(&st);
        Ok((loss, grads.expect("cols were kept")))
    }

    fn loss_param_and_input_grads(
        &mut self,
        x: &ImageBatch,
        y: &LabelBatch,
    ) -> Result<(f32, Vec<ArrayD<f32>>, Array4<f32>)> {
        check_batch(self, x, Some(y))?;
        let st = self.run_forward(x, true, true);
        let loss = loss_value(LossKind::CrossEntropy, &st.logits, y);
        let dlogits = loss_grad(LossKind::CrossEntropy, &st.logits, y);
        let (dx, grads) = self.run_backward(x, &st, &dlogits);
        self.commit_stats(&st);
        Ok((loss, grads.expect("cols were kept"), dx))
    }

    fn clone_box(&self) -> Box<dyn Classifier> {
        Box::new(self.clone())
    }
}
