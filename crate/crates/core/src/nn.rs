//! Model layers and model construction.
//!
//! A [`Model`] is a flat stack of [`Layer`]s. Parameters live in the
//! layers as plain [`Tensor`]s; each forward pass copies them onto the
//! step's [`Tape`] as leaves and returns the leaf ids in parameter order,
//! so optimizers can pair `params_mut()` with the gradients read back
//! from the tape.
//!
//! `params()`, `params_mut()`, and the forward binding all traverse
//! parameters in the same fixed order: layer by layer, then slot order
//! within the layer. Keep the three in sync when touching any of them.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lgconv::LgConvBlock;
use crate::math;
use crate::tensor::{Tape, Tensor, TensorId};

/// Gaussian-initialized tensor with the given standard deviation.
pub(crate) fn init_normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, values).expect("gaussian samples are finite")
}

/// Fully connected layer; `weight` is `[in, out]` so the forward pass is
/// `x @ weight + bias`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = math::sqrt(2.0 / input as f64);
        Self {
            weight: init_normal(vec![input, output], std, rng).with_grad(),
            bias: Tensor::zeros(vec![output]).with_grad(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel_size * kernel_size;
        let std = math::sqrt(2.0 / fan_in as f64);
        Self {
            kernel: init_normal(
                vec![out_channels, in_channels, kernel_size, kernel_size],
                std,
                rng,
            )
            .with_grad(),
            bias: Tensor::zeros(vec![out_channels]).with_grad(),
            stride,
            padding,
        }
    }

    /// True for the 3x3 stride-1 padding-1 geometry that keeps spatial
    /// dims, the shape the global-context block can wrap.
    pub fn is_wrappable(&self) -> bool {
        let s = self.kernel.shape();
        s[2] == 3 && s[3] == 3 && self.stride == 1 && self.padding == 1
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2dLayer {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2dLayer {
    pub fn new(channels: usize) -> Self {
        Self::with_scale(channels, 1.0)
    }

    /// Batch norm whose scale starts at `scale_init` on every channel.
    pub fn with_scale(channels: usize, scale_init: f64) -> Self {
        Self {
            scale: Tensor::full(vec![channels], scale_init).with_grad(),
            shift: Tensor::zeros(vec![channels]).with_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub(crate) fn forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        train: bool,
    ) -> Result<TensorId> {
        tape.batchnorm2d(
            x,
            scale,
            shift,
            &mut self.running_mean,
            &mut self.running_var,
            self.momentum,
            self.eps,
            train,
        )
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2dLayer),
    BatchNorm2d(BatchNorm2dLayer),
    Relu,
    GlobalAvgPool,
    Flatten,
    LgConv(Box<LgConvBlock>),
}

impl Layer {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(c) => vec![&c.kernel, &c.bias],
            Layer::BatchNorm2d(b) => vec![&b.scale, &b.shift],
            Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => Vec::new(),
            Layer::LgConv(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(c) => vec![&mut c.kernel, &mut c.bias],
            Layer::BatchNorm2d(b) => vec![&mut b.scale, &mut b.shift],
            Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => Vec::new(),
            Layer::LgConv(b) => b.params_mut(),
        }
    }

    /// Non-trainable state: batch-norm running mean/var pairs.
    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::BatchNorm2d(b) => vec![&b.running_mean, &b.running_var],
            Layer::LgConv(b) => vec![&b.bn.running_mean, &b.bn.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm2d(b) => vec![&mut b.running_mean, &mut b.running_var],
            Layer::LgConv(b) => vec![&mut b.bn.running_mean, &mut b.bn.running_var],
            _ => Vec::new(),
        }
    }

    /// Consumes this layer's parameter ids from `bound` at `cursor`, in
    /// `params()` order.
    fn forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        bound: &[TensorId],
        cursor: &mut usize,
        train: bool,
    ) -> Result<TensorId> {
        let mut take = || {
            let id = bound[*cursor];
            *cursor += 1;
            id
        };
        match self {
            Layer::Linear(_) => {
                let w = take();
                let b = take();
                let y = tape.matmul(x, w)?;
                tape.add_bias2d(y, b)
            }
            Layer::Conv2d(c) => {
                let k = take();
                let b = take();
                let y = tape.conv2d(x, k, c.stride, c.padding)?;
                tape.add_channel_bias(y, b)
            }
            Layer::BatchNorm2d(bn) => {
                let scale = take();
                let shift = take();
                bn.forward(tape, x, scale, shift, train)
            }
            Layer::Relu => tape.clamp_min(x, 0.0),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Flatten => {
                let s = tape.shape(x).to_vec();
                if s.len() < 2 {
                    return Err(Error::ShapeMismatch(alloc::format!(
                        "flatten needs a batch dim, got {s:?}"
                    )));
                }
                let rest: usize = s[1..].iter().product();
                tape.reshape(x, vec![s[0], rest])
            }
            Layer::LgConv(block) => block.forward(tape, x, bound, cursor, train),
        }
    }
}

/// Stack of layers producing per-category logits.
#[derive(Debug, Clone, Default)]
pub struct Model {
    pub layers: Vec<Layer>,
}

impl Model {
    /// Copy every parameter onto `tape` as a leaf, in `params()` order.
    pub fn bind_params(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params().iter().map(|p| tape.leaf(p)).collect()
    }

    /// Run the model against an existing parameter binding. Several
    /// forward passes on one tape may share a binding; their gradients
    /// then accumulate on the same leaves.
    pub fn forward_bound(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        bound: &[TensorId],
        train: bool,
    ) -> Result<TensorId> {
        let expected = self.params().len();
        if bound.len() != expected {
            return Err(Error::InvalidArgument(alloc::format!(
                "model has {expected} parameters, binding has {}",
                bound.len()
            )));
        }
        let mut cursor = 0;
        let mut cur = x;
        for layer in &mut self.layers {
            cur = layer.forward(tape, cur, bound, &mut cursor, train)?;
        }
        Ok(cur)
    }

    /// Bind parameters and run the model. Returns the output id and the
    /// bound parameter leaf ids in `params()` order.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        train: bool,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let bound = self.bind_params(tape);
        let out = self.forward_bound(tape, x, &bound, train)?;
        Ok((out, bound))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Snapshot of all parameter buffers, in `params()` order.
    pub fn param_values(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| p.values().to_vec()).collect()
    }

    pub fn load_param_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "expected {} parameter buffers, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.numel() != v.len() {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "parameter of {} values loaded with {}",
                    p.numel(),
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(alloc::format!(
                    "loaded parameter contains {bad}"
                )));
            }
            p.values_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// Snapshot of batch-norm running statistics, in layer order.
    pub fn buffer_values(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| l.buffers())
            .map(|b| b.clone())
            .collect()
    }

    pub fn load_buffer_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut buffers: Vec<&mut Vec<f64>> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.buffers_mut())
            .collect();
        if buffers.len() != values.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "expected {} running-stat buffers, got {}",
                buffers.len(),
                values.len()
            )));
        }
        for (b, v) in buffers.iter_mut().zip(values) {
            if b.len() != v.len() {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "running-stat buffer of {} values loaded with {}",
                    b.len(),
                    v.len()
                )));
            }
            b.clone_from(v);
        }
        Ok(())
    }
}

/// Architecture description, small enough to live in a config file.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ModelSpec {
    /// Fully connected net over flat feature vectors.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        categories: usize,
    },
    /// Small conv net: per stage 3x3 conv (stride 1, padding 1), batch
    /// norm, relu; then global average pooling and a linear head.
    /// `lgconv` swaps every 3x3 conv for the global-context block.
    Cnn {
        in_channels: usize,
        channels: Vec<usize>,
        categories: usize,
        #[cfg_attr(feature = "serde", serde(default))]
        lgconv: bool,
    },
}

impl ModelSpec {
    pub fn categories(&self) -> usize {
        match self {
            ModelSpec::Mlp { categories, .. } | ModelSpec::Cnn { categories, .. } => *categories,
        }
    }
}

/// Build a model with deterministic initialization drawn from `rng`.
pub fn build_model(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model> {
    match spec {
        ModelSpec::Mlp {
            input_dim,
            hidden,
            categories,
        } => {
            if *input_dim == 0 || *categories == 0 || hidden.iter().any(|&h| h == 0) {
                return Err(Error::InvalidArgument(
                    "model dimensions must be positive".into(),
                ));
            }
            let mut layers = Vec::new();
            let mut prev = *input_dim;
            for &h in hidden {
                layers.push(Layer::Linear(Linear::new(prev, h, rng)));
                layers.push(Layer::Relu);
                prev = h;
            }
            layers.push(Layer::Linear(Linear::new(prev, *categories, rng)));
            Ok(Model { layers })
        }
        ModelSpec::Cnn {
            in_channels,
            channels,
            categories,
            lgconv,
        } => {
            if *in_channels == 0 || *categories == 0 || channels.is_empty() {
                return Err(Error::InvalidArgument(
                    "conv net needs positive channel counts and at least one stage".into(),
                ));
            }
            if channels.iter().any(|&c| c == 0) {
                return Err(Error::InvalidArgument(
                    "model dimensions must be positive".into(),
                ));
            }
            let mut layers = Vec::new();
            let mut prev = *in_channels;
            for &ch in channels {
                layers.push(Layer::Conv2d(Conv2dLayer::new(prev, ch, 3, 1, 1, rng)));
                layers.push(Layer::BatchNorm2d(BatchNorm2dLayer::new(ch)));
                layers.push(Layer::Relu);
                prev = ch;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(Layer::Linear(Linear::new(prev, *categories, rng)));
            let mut model = Model { layers };
            if *lgconv {
                crate::lgconv::wrap_model(&mut model, crate::lgconv::DEFAULT_HEADS, rng);
            }
            Ok(model)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_forward_shapes_and_param_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ModelSpec::Mlp {
            input_dim: 5,
            hidden: vec![4],
            categories: 3,
        };
        let mut model = build_model(&spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 5], vec![0.1; 10]).unwrap();
        let (out, bound) = model.forward(&mut tape, x, true).unwrap();
        assert_eq!(tape.shape(out), &[2, 3]);
        assert_eq!(bound.len(), model.params().len());
    }

    #[test]
    fn cnn_forward_produces_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ModelSpec::Cnn {
            in_channels: 1,
            channels: vec![4, 6],
            categories: 3,
            lgconv: false,
        };
        let mut model = build_model(&spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 1, 6, 6], vec![0.5; 72]).unwrap();
        let (out, _) = model.forward(&mut tape, x, true).unwrap();
        assert_eq!(tape.shape(out), &[2, 3]);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let spec = ModelSpec::Mlp {
            input_dim: 6,
            hidden: vec![8, 4],
            categories: 2,
        };
        let m1 = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let m2 = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m1.param_values(), m2.param_values());
    }

    #[test]
    fn param_state_round_trip() {
        let spec = ModelSpec::Cnn {
            in_channels: 2,
            channels: vec![3],
            categories: 4,
            lgconv: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = build_model(&spec, &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let b = build_model(&spec, &mut rng2).unwrap();
        a.load_param_values(&b.param_values()).unwrap();
        a.load_buffer_values(&b.buffer_values()).unwrap();
        assert_eq!(a.param_values(), b.param_values());
    }

    #[test]
    fn load_rejects_wrong_arity() {
        let spec = ModelSpec::Mlp {
            input_dim: 3,
            hidden: vec![],
            categories: 2,
        };
        let mut model = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(model.load_param_values(&[vec![1.0]]).is_err());
    }
}
