//! Local-global convolution block.
//!
//! Augments a 3x3 convolution with a residual global branch: the input is
//! fused with its globally pooled summary, mixed by a 1x1 convolution,
//! and read by two attention heads of different character. One produces H
//! per-head softmax maps over spatial positions, the other a single
//! sigmoid gate map. Per-head attention-weighted context vectors are
//! broadcast back across space through the gate, projected by a 1x1
//! convolution, and batch normalized. The normalization scale starts at
//! 0.0001 on every channel, so a freshly wrapped block is transparent: its
//! output tracks the plain convolution until training grows the branch.
//!
//! The branch is computed at input resolution, so the block requires the
//! shape-preserving conv geometry (3x3, stride 1, padding 1); those are
//! the convolutions [`wrap_model`] replaces.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{init_normal, BatchNorm2dLayer, Conv2dLayer, Layer, Model};
use crate::tensor::{Tape, Tensor, TensorId};

/// Initial batch-norm scale of the global branch.
pub const BN_SCALE_INIT: f64 = 1e-4;

/// Attention head count used when a config does not choose one.
pub const DEFAULT_HEADS: usize = 4;

#[derive(Debug, Clone)]
pub struct LgConvBlock {
    /// Kernel of the wrapped convolution, `[co, ci, 3, 3]`.
    pub local_kernel: Tensor,
    pub local_bias: Tensor,
    /// 1x1 mixing conv over the input concatenated with its pooled
    /// summary, `[ci, 2ci, 1, 1]`.
    pub mix_kernel: Tensor,
    pub mix_bias: Tensor,
    /// 1x1 conv producing `heads` spatial attention maps, `[H, ci, 1, 1]`.
    pub attn_kernel: Tensor,
    pub attn_bias: Tensor,
    /// 1x1 conv producing the broadcast sigmoid gate, `[1, ci, 1, 1]`.
    pub gate_kernel: Tensor,
    pub gate_bias: Tensor,
    /// Final 1x1 projection, `[co, H*ci, 1, 1]`.
    pub proj_kernel: Tensor,
    pub bn: BatchNorm2dLayer,
    pub heads: usize,
}

impl LgConvBlock {
    /// Wrap an existing convolution, reusing its kernel and bias values
    /// for the local branch. The conv must be 3x3 stride 1 padding 1.
    pub fn from_conv(conv: &Conv2dLayer, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !conv.is_wrappable() {
            return Err(Error::InvalidArgument(alloc::format!(
                "only 3x3 stride-1 padding-1 convolutions can host a global branch, \
                 got kernel {:?} stride {} padding {}",
                conv.kernel.shape(),
                conv.stride,
                conv.padding
            )));
        }
        if heads == 0 {
            return Err(Error::InvalidArgument(
                "attention needs at least one head".into(),
            ));
        }
        let co = conv.kernel.shape()[0];
        let ci = conv.kernel.shape()[1];
        let mix_std = math::sqrt(2.0 / (2 * ci) as f64);
        let attn_std = math::sqrt(2.0 / ci as f64);
        let proj_std = math::sqrt(2.0 / (heads * ci) as f64);
        Ok(Self {
            local_kernel: conv.kernel.clone(),
            local_bias: conv.bias.clone(),
            mix_kernel: init_normal(vec![ci, 2 * ci, 1, 1], mix_std, rng).with_grad(),
            mix_bias: Tensor::zeros(vec![ci]).with_grad(),
            attn_kernel: init_normal(vec![heads, ci, 1, 1], attn_std, rng).with_grad(),
            attn_bias: Tensor::zeros(vec![heads]).with_grad(),
            gate_kernel: init_normal(vec![1, ci, 1, 1], attn_std, rng).with_grad(),
            gate_bias: Tensor::zeros(vec![1]).with_grad(),
            proj_kernel: init_normal(vec![co, heads * ci, 1, 1], proj_std, rng).with_grad(),
            bn: BatchNorm2dLayer::with_scale(co, BN_SCALE_INIT),
            heads,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.local_kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.local_kernel.shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.local_kernel,
            &self.local_bias,
            &self.mix_kernel,
            &self.mix_bias,
            &self.attn_kernel,
            &self.attn_bias,
            &self.gate_kernel,
            &self.gate_bias,
            &self.proj_kernel,
            &self.bn.scale,
            &self.bn.shift,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.local_kernel,
            &mut self.local_bias,
            &mut self.mix_kernel,
            &mut self.mix_bias,
            &mut self.attn_kernel,
            &mut self.attn_bias,
            &mut self.gate_kernel,
            &mut self.gate_bias,
            &mut self.proj_kernel,
            &mut self.bn.scale,
            &mut self.bn.shift,
        ]
    }

    /// Consumes this block's parameter ids from `bound` at `cursor`, in
    /// `params()` order.
    pub(crate) fn forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        bound: &[TensorId],
        cursor: &mut usize,
        train: bool,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "block expects [n,{},h,w] input, got {s:?}",
                self.in_channels()
            )));
        }
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let mut take = || {
            let id = bound[*cursor];
            *cursor += 1;
            id
        };
        let (lk, lb) = (take(), take());
        let (mk, mb) = (take(), take());
        let (ak, ab) = (take(), take());
        let (gk, gb) = (take(), take());
        let pk = take();
        let (bn_scale, bn_shift) = (take(), take());

        let local = tape.conv2d(x, lk, 1, 1)?;
        let local = tape.add_channel_bias(local, lb)?;

        let pooled = tape.global_avg_pool(x)?;
        let pooled_b = tape.broadcast_spatial(pooled, h, w)?;
        let fused = tape.concat_channels(x, pooled_b)?;
        let mix = tape.conv2d(fused, mk, 1, 0)?;
        let mix = tape.add_channel_bias(mix, mb)?;
        let mix = tape.clamp_min(mix, 0.0)?;

        let attn_logits = tape.conv2d(mix, ak, 1, 0)?;
        let attn_logits = tape.add_channel_bias(attn_logits, ab)?;
        let attn_flat = tape.reshape(attn_logits, vec![n, self.heads, h * w])?;
        let attn = tape.softmax_axis(attn_flat, 2)?;

        let gate_logits = tape.conv2d(mix, gk, 1, 0)?;
        let gate_logits = tape.add_channel_bias(gate_logits, gb)?;
        let gate = tape.sigmoid(gate_logits)?;

        let mix_flat = tape.reshape(mix, vec![n, ci, h * w])?;
        let mix_t = tape.transpose_last2(mix_flat)?;
        let ctx = tape.bmm(attn, mix_t)?;
        let ctx_flat = tape.reshape(ctx, vec![n, self.heads * ci])?;
        let modulated = tape.outer_broadcast_mul(ctx_flat, gate)?;

        let proj = tape.conv2d(modulated, pk, 1, 0)?;
        let branch = self.bn.forward(tape, proj, bn_scale, bn_shift, train)?;
        tape.add(local, branch)
    }

    /// Attention maps for inspection: per-head spatial softmax weights
    /// `[n, H, h*w]` and the sigmoid gate `[n, h*w]`. Runs the branch in
    /// eval mode on a scratch tape.
    pub fn attention_maps(&mut self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec())?;
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "block expects [n,{},h,w] input, got {s:?}",
                self.in_channels()
            )));
        }
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let pooled = tape.global_avg_pool(xid)?;
        let pooled_b = tape.broadcast_spatial(pooled, h, w)?;
        let fused = tape.concat_channels(xid, pooled_b)?;
        let mk = tape.leaf(&self.mix_kernel);
        let mb = tape.leaf(&self.mix_bias);
        let mix = tape.conv2d(fused, mk, 1, 0)?;
        let mix = tape.add_channel_bias(mix, mb)?;
        let mix = tape.clamp_min(mix, 0.0)?;
        let ak = tape.leaf(&self.attn_kernel);
        let ab = tape.leaf(&self.attn_bias);
        let attn_logits = tape.conv2d(mix, ak, 1, 0)?;
        let attn_logits = tape.add_channel_bias(attn_logits, ab)?;
        let attn_flat = tape.reshape(attn_logits, vec![n, self.heads, h * w])?;
        let attn = tape.softmax_axis(attn_flat, 2)?;
        let gk = tape.leaf(&self.gate_kernel);
        let gb = tape.leaf(&self.gate_bias);
        let gate_logits = tape.conv2d(mix, gk, 1, 0)?;
        let gate_logits = tape.add_channel_bias(gate_logits, gb)?;
        let gate = tape.sigmoid(gate_logits)?;
        let _ = ci;
        Ok((tape.values(attn).to_vec(), tape.values(gate).to_vec()))
    }
}

/// Parameters a global branch adds on top of its local convolution.
pub fn global_branch_param_count(in_channels: usize, out_channels: usize, heads: usize) -> usize {
    let ci = in_channels;
    let co = out_channels;
    let h = heads;
    // mix conv + bias, attention conv + bias, gate conv + bias,
    // projection conv, normalization scale + shift
    ci * 2 * ci + ci + h * ci + h + ci + 1 + co * h * ci + 2 * co
}

/// Replace every shape-preserving 3x3 convolution in the model with a
/// global-context block that reuses its kernel. Other layers are left
/// untouched. New parameters are drawn deterministically from `rng`;
/// `heads` below 1 is raised to 1.
pub fn wrap_model(model: &mut Model, heads: usize, rng: &mut ChaCha8Rng) {
    let heads = heads.max(1);
    for layer in &mut model.layers {
        if let Layer::Conv2d(conv) = layer {
            if conv.is_wrappable() {
                let block = LgConvBlock::from_conv(conv, heads, rng)
                    .expect("wrappable conv accepted by from_conv");
                *layer = Layer::LgConv(Box::new(block));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelSpec};
    use rand::SeedableRng;

    fn random_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_normal(vec![n, c, h, w], 1.0, &mut rng)
    }

    fn conv_only_output(conv: &Conv2dLayer, x: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let k = tape.leaf(&conv.kernel);
        let b = tape.leaf(&conv.bias);
        let y = tape.conv2d(xid, k, conv.stride, conv.padding).unwrap();
        let y = tape.add_channel_bias(y, b).unwrap();
        tape.values(y).to_vec()
    }

    fn run_block(
        block: &mut LgConvBlock,
        tape: &mut Tape,
        x: TensorId,
        train: bool,
    ) -> (TensorId, Vec<TensorId>) {
        let bound: Vec<TensorId> = block.params().iter().map(|p| tape.leaf(p)).collect();
        let mut cursor = 0;
        let y = block.forward(tape, x, &bound, &mut cursor, train).unwrap();
        assert_eq!(cursor, bound.len());
        (y, bound)
    }

    fn block_output(block: &mut LgConvBlock, x: &Tensor, train: bool) -> Vec<f64> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let (y, _) = run_block(block, &mut tape, xid, train);
        tape.values(y).to_vec()
    }

    #[test]
    fn fresh_block_tracks_the_plain_convolution() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conv = Conv2dLayer::new(3, 5, 3, 1, 1, &mut rng);
            let mut block = LgConvBlock::from_conv(&conv, 2, &mut rng).unwrap();
            let x = random_input(2, 3, 6, 6, seed + 100);
            let plain = conv_only_output(&conv, &x);
            let wrapped = block_output(&mut block, &x, false);
            let sup_plain = plain.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let sup_diff = plain
                .iter()
                .zip(&wrapped)
                .fold(0.0f64, |m, (p, w)| m.max((p - w).abs()));
            let rel = sup_diff / (sup_plain + 1e-8);
            assert!(rel <= 1e-3, "seed {seed}: relative deviation {rel}");
        }
    }

    #[test]
    fn zero_scale_makes_the_branch_vanish_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2dLayer::new(2, 4, 3, 1, 1, &mut rng);
        let mut block = LgConvBlock::from_conv(&conv, 3, &mut rng).unwrap();
        for v in block.bn.scale.values_mut() {
            *v = 0.0;
        }
        let x = random_input(2, 2, 5, 5, 42);
        let plain = conv_only_output(&conv, &x);
        let wrapped = block_output(&mut block, &x, false);
        for (p, w) in plain.iter().zip(&wrapped) {
            assert_eq!(p.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn attention_heads_normalize_and_gate_stays_open() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2dLayer::new(3, 3, 3, 1, 1, &mut rng);
        let mut block = LgConvBlock::from_conv(&conv, 4, &mut rng).unwrap();
        let x = random_input(2, 3, 4, 4, 77);
        let (attn, gate) = block.attention_maps(&x).unwrap();
        let hw = 16;
        for lane in attn.chunks(hw) {
            let sum: f64 = lane.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "head weights sum to {sum}");
            assert!(lane.iter().all(|&v| v >= 0.0));
        }
        assert!(gate.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn block_output_shape_matches_local_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let conv = Conv2dLayer::new(2, 7, 3, 1, 1, &mut rng);
        let mut block = LgConvBlock::from_conv(&conv, 2, &mut rng).unwrap();
        let x = random_input(3, 2, 5, 4, 1);
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let (y, bound) = run_block(&mut block, &mut tape, xid, true);
        assert_eq!(tape.shape(y), &[3, 7, 5, 4]);
        assert_eq!(bound.len(), block.params().len());
    }

    #[test]
    fn wrapping_skips_models_without_3x3_convs() {
        let spec = ModelSpec::Mlp {
            input_dim: 4,
            hidden: vec![3],
            categories: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = build_model(&spec, &mut rng).unwrap();
        let before = model.param_values();
        wrap_model(&mut model, 4, &mut rng);
        assert_eq!(model.param_values(), before);
    }

    #[test]
    fn wrapping_adds_exactly_the_documented_parameter_count() {
        let spec = ModelSpec::Cnn {
            in_channels: 2,
            channels: vec![4, 6],
            categories: 3,
            lgconv: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = build_model(&spec, &mut rng).unwrap();
        let before = model.num_params();
        wrap_model(&mut model, 2, &mut rng);
        let expected = before
            + global_branch_param_count(2, 4, 2)
            + global_branch_param_count(4, 6, 2);
        assert_eq!(model.num_params(), expected);
    }

    #[test]
    fn wrapping_preserves_kernels_and_model_outputs() {
        let spec = ModelSpec::Cnn {
            in_channels: 1,
            channels: vec![3, 3],
            categories: 2,
            lgconv: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut plain = build_model(&spec, &mut rng).unwrap();
        let mut wrapped = plain.clone();
        wrap_model(&mut wrapped, 2, &mut rng);

        let x = random_input(2, 1, 6, 6, 3);
        let run = |m: &mut Model| {
            let mut tape = Tape::new();
            let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
            let (y, _) = m.forward(&mut tape, xid, false).unwrap();
            tape.values(y).to_vec()
        };
        let a = run(&mut plain);
        let b = run(&mut wrapped);
        let sup_a = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sup_diff = a
            .iter()
            .zip(&b)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(sup_diff / (sup_a + 1e-8) <= 1e-3);
    }

    #[test]
    fn gradients_reach_the_global_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2dLayer::new(2, 3, 3, 1, 1, &mut rng);
        let mut block = LgConvBlock::from_conv(&conv, 2, &mut rng).unwrap();
        let x = random_input(2, 2, 4, 4, 8);
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let (y, bound) = run_block(&mut block, &mut tape, xid, true);
        let s = tape.sigmoid(y).unwrap();
        let loss = tape.mean_all(s).unwrap();
        tape.backward(loss).unwrap();
        // mix kernel is bound third; its gradient must carry signal
        let mix_grad = tape.grad(bound[2]).unwrap();
        assert!(mix_grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn from_conv_rejects_non_preserving_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = Conv2dLayer::new(2, 3, 3, 2, 1, &mut rng);
        assert!(LgConvBlock::from_conv(&conv, 2, &mut rng).is_err());
        let conv1 = Conv2dLayer::new(2, 3, 1, 1, 0, &mut rng);
        assert!(LgConvBlock::from_conv(&conv1, 2, &mut rng).is_err());
    }
}
