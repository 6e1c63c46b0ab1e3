//! Pre-activation ResNet-18.
//!
//! The full-scale architecture behind the same [`Classifier`] contract as the
//! desk CNN. Convolutions carry no bias (batch norm provides the shift);
//! shortcut projections tap the pre-activated signal. Expect CPU training at
//! CIFAR scale to be slow -- this exists so full-scale configs are runnable,
//! not quick.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::Rng;

use super::layers::{
    batchnorm_forward, batchnorm_backward, commit_bn_stats, conv_backward_input,
    conv_backward_params, conv_forward, global_avg_pool, global_avg_pool_backward,
    linear_backward_input, linear_backward_params, linear_forward, relu_inplace,
    relu_mask_inplace, to_channel_major, BnBatchStats, BnCache, ConvSpec,
};
use super::{check_batch, loss_grad, loss_value, Classifier, LossKind, Mode};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ImageBatch, LabelBatch, Logits};

/// Channel plan per stage, two blocks each.
const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    in_c: usize,
    out_c: usize,
    stride: usize,
    has_projection: bool,
}

/// Pre-activation residual network (18-layer configuration).
#[derive(Debug, Clone)]
pub struct PreActResNet18 {
    input_shape: (usize, usize, usize),
    num_classes: usize,
    blocks: Vec<BlockSpec>,
    /// Stem conv, then per block `[bn1_g, bn1_b, conv1_w, bn2_g, bn2_b,
    /// conv2_w, (proj_w)]`, then final `[bn_g, bn_b, fc_w, fc_b]`.
    params: Vec<ArrayD<f32>>,
    /// Per block `[bn1_mean, bn1_var, bn2_mean, bn2_var]`, then final BN
    /// `[mean, var]`.
    buffers: Vec<ArrayD<f32>>,
    /// Index of each block's first parameter tensor.
    param_at: Vec<usize>,
}

struct BlockCache {
    h1: Array4<f32>,
    bn1: BnCache,
    bn1_stats: Option<BnBatchStats>,
    h2: Array4<f32>,
    bn2: BnCache,
    bn2_stats: Option<BnBatchStats>,
    col1: Option<Array2<f32>>,
    col2: Option<Array2<f32>>,
    col_proj: Option<Array2<f32>>,
    in_hw: (usize, usize),
}

struct ForwardState {
    stem_col: Option<Array2<f32>>,
    caches: Vec<BlockCache>,
    final_h: Array4<f32>,
    final_bn: BnCache,
    final_bn_stats: Option<BnBatchStats>,
    pooled: Array2<f32>,
    logits: Logits,
}

fn conv_spec(in_c: usize, out_c: usize, ksize: usize, stride: usize) -> ConvSpec {
    ConvSpec { in_c, out_c, ksize, stride, pad: ksize / 2 }
}

fn he_uniform(r: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || r.gen_range(-bound..bound))
}

impl PreActResNet18 {
    pub fn new(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let (c, h, w) = input_shape;
        if h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8 {
            return Err(Error::config(format!(
                "preact_resnet18 needs height/width divisible by 8, got {h}x{w}"
            )));
        }
        let mut blocks = Vec::new();
        let mut in_c = 64usize;
        for (si, &out_c) in STAGE_CHANNELS.iter().enumerate() {
            for bi in 0..2 {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let has_projection = stride != 1 || in_c != out_c;
                blocks.push(BlockSpec { in_c, out_c, stride, has_projection });
                in_c = out_c;
            }
        }

        let mut r = rng::stream(seed, "init", &[]);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut param_at = Vec::new();
        params.push(he_uniform(&mut r, &[64, c, 3, 3], c * 9));
        for b in &blocks {
            param_at.push(params.len());
            params.push(ArrayD::ones(IxDyn(&[b.in_c]))); // bn1 gamma
            params.push(ArrayD::zeros(IxDyn(&[b.in_c]))); // bn1 beta
            params.push(he_uniform(&mut r, &[b.out_c, b.in_c, 3, 3], b.in_c * 9));
            params.push(ArrayD::ones(IxDyn(&[b.out_c]))); // bn2 gamma
            params.push(ArrayD::zeros(IxDyn(&[b.out_c]))); // bn2 beta
            params.push(he_uniform(&mut r, &[b.out_c, b.out_c, 3, 3], b.out_c * 9));
            if b.has_projection {
                params.push(he_uniform(&mut r, &[b.out_c, b.in_c, 1, 1], b.in_c));
            }
            buffers.push(ArrayD::zeros(IxDyn(&[b.in_c])));
            buffers.push(ArrayD::ones(IxDyn(&[b.in_c])));
            buffers.push(ArrayD::zeros(IxDyn(&[b.out_c])));
            buffers.push(ArrayD::ones(IxDyn(&[b.out_c])));
        }
        param_at.push(params.len());
        let last_c = *STAGE_CHANNELS.last().unwrap();
        params.push(ArrayD::ones(IxDyn(&[last_c])));
        params.push(ArrayD::zeros(IxDyn(&[last_c])));
        params.push(he_uniform(&mut r, &[num_classes, last_c], last_c));
        params.push(ArrayD::zeros(IxDyn(&[num_classes])));
        buffers.push(ArrayD::zeros(IxDyn(&[last_c])));
        buffers.push(ArrayD::ones(IxDyn(&[last_c])));

        Ok(PreActResNet18 { input_shape, num_classes, blocks, params, buffers, param_at })
    }

    fn vec1(&self, idx: usize) -> ArrayView1<'_, f32> {
        self.params[idx].view().into_dimensionality().unwrap()
    }

    fn conv_w(&self, idx: usize) -> Array2<f32> {
        let shape = self.params[idx].shape().to_vec();
        self.params[idx]
            .to_shape((shape[0], shape[1] * shape[2] * shape[3]))
            .unwrap()
            .to_owned()
    }

    fn buf1(&self, idx: usize) -> ArrayView1<'_, f32> {
        self.buffers[idx].view().into_dimensionality().unwrap()
    }

    fn block_forward(
        &self,
        bi: usize,
        x: &Array4<f32>,
        batch_stats: bool,
        keep_cols: bool,
    ) -> (Array4<f32>, BlockCache) {
        let b = &self.blocks[bi];
        let p = self.param_at[bi];
        let (_, _, h, w) = x.dim();
        let (bn1_out, bn1, bn1_stats) = batchnorm_forward(
            &x.view(),
            &self.vec1(p),
            &self.vec1(p + 1),
            &self.buf1(4 * bi),
            &self.buf1(4 * bi + 1),
            batch_stats,
        );
        let mut h1 = bn1_out;
        relu_inplace(&mut h1);

        let sp1 = conv_spec(b.in_c, b.out_c, 3, b.stride);
        let w1 = self.conv_w(p + 2);
        let zero_bias1 = Array1::<f32>::zeros(b.out_c);
        let (conv1_out, col1) = conv_forward(&h1.view(), &w1.view(), &zero_bias1.view(), &sp1);

        let (bn2_out, bn2, bn2_stats) = batchnorm_forward(
            &conv1_out.view(),
            &self.vec1(p + 3),
            &self.vec1(p + 4),
            &self.buf1(4 * bi + 2),
            &self.buf1(4 * bi + 3),
            batch_stats,
        );
        let mut h2 = bn2_out;
        relu_inplace(&mut h2);

        let sp2 = conv_spec(b.out_c, b.out_c, 3, 1);
        let w2 = self.conv_w(p + 5);
        let (mut out, col2) = conv_forward(&h2.view(), &w2.view(), &zero_bias1.view(), &sp2);

        let col_proj = if b.has_projection {
            let spp = conv_spec(b.in_c, b.out_c, 1, b.stride);
            let wp = self.conv_w(p + 6);
            let (proj, colp) = conv_forward(&h1.view(), &wp.view(), &zero_bias1.view(), &spp);
            out += &proj;
            keep_cols.then_some(colp)
        } else {
            out += x;
            None
        };

        let cache = BlockCache {
            h1,
            bn1,
            bn1_stats,
            h2,
            bn2,
            bn2_stats,
            col1: keep_cols.then_some(col1),
            col2: keep_cols.then_some(col2),
            col_proj,
            in_hw: (h, w),
        };
        (out, cache)
    }

    /// Backward through one block. Returns gradient w.r.t. the block input;
    /// appends parameter gradients (same order as the block's params) to
    /// `grads` when columns were kept.
    fn block_backward(
        &self,
        bi: usize,
        dout: &Array4<f32>,
        cache: &BlockCache,
        grads: Option<&mut Vec<ArrayD<f32>>>,
    ) -> Array4<f32> {
        let b = &self.blocks[bi];
        let p = self.param_at[bi];
        let (h, w) = cache.in_hw;
        let batch = dout.dim().0;

        // conv2 branch (stride 1, so its input spatial size equals dout's).
        let mut d_h2_in = {
            let dy_cm = to_channel_major(&dout.view());
            let sp2 = conv_spec(b.out_c, b.out_c, 3, 1);
            let w2 = self.conv_w(p + 5);
            conv_backward_input(&dy_cm.view(), &w2.view(), &sp2, batch, dout.dim().2, dout.dim().3)
        };
        relu_mask_inplace(&mut d_h2_in, &cache.h2);
        let (d_conv1_out, dg2, db2) =
            batchnorm_backward(&d_h2_in.view(), &cache.bn2, &self.vec1(p + 3));

        // conv1 branch back to h1.
        let sp1 = conv_spec(b.in_c, b.out_c, 3, b.stride);
        let w1 = self.conv_w(p + 2);
        let dy1_cm = to_channel_major(&d_conv1_out.view());
        let mut d_h1 = conv_backward_input(&dy1_cm.view(), &w1.view(), &sp1, batch, h, w);

        // Projection branch adds into d_h1; identity branch adds into dx later.
        if b.has_projection {
            let spp = conv_spec(b.in_c, b.out_c, 1, b.stride);
            let wp = self.conv_w(p + 6);
            let dproj_cm = to_channel_major(&dout.view());
            d_h1 += &conv_backward_input(&dproj_cm.view(), &wp.view(), &spp, batch, h, w);
        }
        relu_mask_inplace(&mut d_h1, &cache.h1);
        let (mut dx, dg1, db1) = batchnorm_backward(&d_h1.view(), &cache.bn1, &self.vec1(p));
        if !b.has_projection {
            dx += dout;
        }

        if let Some(grads) = grads {
            let dy_cm = to_channel_major(&dout.view());
            let sp2 = conv_spec(b.out_c, b.out_c, 3, 1);
            let (dw2, _) =
                conv_backward_params(&dy_cm.view(), &cache.col2.as_ref().unwrap().view(), &sp2);
            let (dw1, _) =
                conv_backward_params(&dy1_cm.view(), &cache.col1.as_ref().unwrap().view(), &sp1);
            grads.push(dg1.into_dyn());
            grads.push(db1.into_dyn());
            grads.push(
                dw1.to_shape((b.out_c, b.in_c, 3, 3)).unwrap().to_owned().into_dyn(),
            );
            grads.push(dg2.into_dyn());
            grads.push(db2.into_dyn());
            grads.push(
                dw2.to_shape((b.out_c, b.out_c, 3, 3)).unwrap().to_owned().into_dyn(),
            );
            if b.has_projection {
                let spp = conv_spec(b.in_c, b.out_c, 1, b.stride);
                let (dwp, _) = conv_backward_params(
                    &dy_cm.view(),
                    &cache.col_proj.as_ref().unwrap().view(),
                    &spp,
                );
                grads.push(
                    dwp.to_shape((b.out_c, b.in_c, 1, 1)).unwrap().to_owned().into_dyn(),
                );
            }
        }
        dx
    }

    fn run_forward(&self, x: &ImageBatch, batch_stats: bool, keep_cols: bool) -> ForwardState {
        let (c_in, _, _) = self.input_shape;
        let stem_sp = conv_spec(c_in, 64, 3, 1);
        let stem_w = self.conv_w(0);
        let zero64 = Array1::<f32>::zeros(64);
        let (stem_out, stem_col) =
            conv_forward(&x.array().view(), &stem_w.view(), &zero64.view(), &stem_sp);

        let mut cur = stem_out;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for bi in 0..self.blocks.len() {
            let (out, cache) = self.block_forward(bi, &cur, batch_stats, keep_cols);
            caches.push(cache);
            cur = out;
        }

        let pf = self.param_at[self.blocks.len()];
        let nb = 4 * self.blocks.len();
        let (bn_out, final_bn, final_bn_stats) = batchnorm_forward(
            &cur.view(),
            &self.vec1(pf),
            &self.vec1(pf + 1),
            &self.buf1(nb),
            &self.buf1(nb + 1),
            batch_stats,
        );
        let mut final_h = bn_out;
        relu_inplace(&mut final_h);
        let pooled = global_avg_pool(&final_h.view());
        let fc_w: ArrayView2<f32> = self.params[pf + 2].view().into_dimensionality().unwrap();
        let logits = linear_forward(&pooled.view(), &fc_w, &self.vec1(pf + 3));

        ForwardState {
            stem_col: keep_cols.then_some(stem_col),
            caches,
            final_h,
            final_bn,
            final_bn_stats,
            pooled,
            logits,
        }
    }

    /// Full backward. Returns (input gradient, parameter gradients in params
    /// order when requested).
    fn run_backward(
        &self,
        x: &ImageBatch,
        st: &ForwardState,
        dlogits: &Logits,
        want_params: bool,
    ) -> (Array4<f32>, Option<Vec<ArrayD<f32>>>) {
        let pf = self.param_at[self.blocks.len()];
        let fc_w: ArrayView2<f32> = self.params[pf + 2].view().into_dimensionality().unwrap();
        let d_pooled = linear_backward_input(&dlogits.view(), &fc_w);
        let (fh, fw) = (st.final_h.dim().2, st.final_h.dim().3);
        let mut d_final = global_avg_pool_backward(&d_pooled.view(), fh, fw);
        relu_mask_inplace(&mut d_final, &st.final_h);
        let (mut dcur, dgf, dbf) =
            batchnorm_backward(&d_final.view(), &st.final_bn, &self.vec1(pf));

        // Head gradients (collected in reverse walk order, reassembled later).
        let mut tail_grads: Vec<ArrayD<f32>> = Vec::new();
        if want_params {
            let (dw_fc, db_fc) = linear_backward_params(&dlogits.view(), &st.pooled.view());
            tail_grads.push(dgf.into_dyn());
            tail_grads.push(dbf.into_dyn());
            tail_grads.push(dw_fc.into_dyn());
            tail_grads.push(db_fc.into_dyn());
        }

        let mut block_grads: Vec<Vec<ArrayD<f32>>> = Vec::new();
        for bi in (0..self.blocks.len()).rev() {
            if want_params {
                let mut g = Vec::new();
                dcur = self.block_backward(bi, &dcur, &st.caches[bi], Some(&mut g));
                block_grads.push(g);
            } else {
                dcur = self.block_backward(bi, &dcur, &st.caches[bi], None);
            }
        }

        // Stem.
        let (_, _, h, w) = x.array().dim();
        let stem_sp = conv_spec(self.input_shape.0, 64, 3, 1);
        let stem_w = self.conv_w(0);
        let dstem_cm = to_channel_major(&dcur.view());
        let dx =
            conv_backward_input(&dstem_cm.view(), &stem_w.view(), &stem_sp, x.len(), h, w);

        let grads = want_params.then(|| {
            let mut out: Vec<ArrayD<f32>> = Vec::with_capacity(self.params.len());
            let (dw_stem, _) = conv_backward_params(
                &dstem_cm.view(),
                &st.stem_col.as_ref().unwrap().view(),
                &stem_sp,
            );
            out.push(
                dw_stem
                    .to_shape((64, self.input_shape.0, 3, 3))
                    .unwrap()
                    .to_owned()
                    .into_dyn(),
            );
            for g in block_grads.into_iter().rev() {
                out.extend(g);
            }
            out.extend(tail_grads);
            debug_assert_eq!(out.len(), self.params.len());
            out
        });
        (dx, grads)
    }

    fn commit_stats(&mut self, st: &ForwardState) {
        for (bi, cache) in st.caches.iter().enumerate() {
            if let Some(s) = &cache.bn1_stats {
                let (head, tail) = self.buffers.split_at_mut(4 * bi + 1);
                commit_bn_stats(&mut head[4 * bi], &mut tail[0], s);
            }
            if let Some(s) = &cache.bn2_stats {
                let (head, tail) = self.buffers.split_at_mut(4 * bi + 3);
                commit_bn_stats(&mut head[4 * bi + 2], &mut tail[0], s);
            }
        }
        if let Some(s) = &st.final_bn_stats {
            let nb = 4 * self.blocks.len();
            let (head, tail) = self.buffers.split_at_mut(nb + 1);
            commit_bn_stats(&mut head[nb], &mut tail[0], s);
        }
    }
}

impl Classifier for PreActResNet18 {
    fn arch_id(&self) -> String {
        "preact_resnet18".to_string()
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
        Ok(self.run_backward(x, &st, &dlogits, false).0)
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
        let (_, grads) = self.run_backward(x, &st, &dlogits, true);
        self.commit_stats(&st);
        Ok((loss, grads.expect("param gradients requested")))
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
        let (dx, grads) = self.run_backward(x, &st, &dlogits, true);
        self.commit_stats(&st);
        Ok((loss, grads.expect("param gradients requested"), dx))
    }

    fn clone_box(&self) -> Box<dyn Classifier> {
        Box::new(self.clone())
    }
}
