//! Forward kernels and their vector-Jacobian products.
//!
//! Every kernel iterates in a fixed row-major order so repeated runs over
//! identical inputs are bit-identical. Backward contributions are computed
//! per input and summed into the input's gradient by the tape driver.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::tape::{Op, Tape, TensorId};

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

impl Tape {
    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{what} must be 2-d, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    fn dims4(&self, id: TensorId, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(id);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{what} must be 4-d, got {s:?}"
            )));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{what} needs matching shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::ShapeMismatch(alloc::format!(
                "matmul inner dims differ: {ka} vs {kb}"
            )));
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..ka {
                let x = av[i * ka + kk];
                let row = kk * n;
                for j in 0..n {
                    out[i * n + j] += x * bv[row + j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", vec![m, n], out, rg, Op::Matmul { a, b })
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch(alloc::format!(
                "bmm expects [B,m,k] x [B,k,n], got {sa:?} and {sb:?}"
            )));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0; bs * m * n];
        for t in 0..bs {
            let ao = t * m * k;
            let bo = t * k * n;
            let oo = t * m * n;
            for i in 0..m {
                for kk in 0..k {
                    let x = av[ao + i * k + kk];
                    for j in 0..n {
                        out[oo + i * n + j] += x * bv[bo + kk * n + j];
                    }
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("bmm", vec![bs, m, n], out, rg, Op::Bmm { a, b })
    }

    /// Cross-correlation with zero padding: `x [n,ci,h,w]`, `k [o,ci,kh,kw]`.
    /// Kernel sides are restricted to 1 or 3.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (n, ci, h, w) = self.dims4(x, "conv input")?;
        let (o, cik, kh, kw) = self.dims4(k, "conv kernel")?;
        if cik != ci {
            return Err(Error::ShapeMismatch(alloc::format!(
                "conv kernel expects {ci} input channels, got {cik}"
            )));
        }
        if !(kh == 1 || kh == 3) || !(kw == 1 || kw == 3) {
            return Err(Error::InvalidArgument(alloc::format!(
                "conv kernel sides must be 1 or 3, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch(alloc::format!(
                "conv kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let xv = self.values(x);
        let kv = self.values(k);
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < padding || iy - padding >= h {
                                    continue;
                                }
                                let iy = iy - padding;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < padding || ix - padding >= w {
                                        continue;
                                    }
                                    let ix = ix - padding;
                                    acc += xv[((b * ci + ic) * h + iy) * w + ix]
                                        * kv[((oc * ci + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(k);
        self.push_checked(
            "conv2d",
            vec![n, o, oh, ow],
            out,
            rg,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
        )
    }

    /// `[n,c,h,w] -> [n,c,1,1]`, mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.dims4(x, "pool input")?;
        let xv = self.values(x);
        let hw = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let mut acc = 0.0;
                for i in 0..h * w {
                    acc += xv[base + i];
                }
                out[b * c + ch] = acc / hw;
            }
        }
        let rg = self.requires_grad(x);
        self.push_checked(
            "global_avg_pool",
            vec![n, c, 1, 1],
            out,
            rg,
            Op::GlobalAvgPool { x },
        )
    }

    /// Per-channel batch normalization over `[n,c,h,w]`.
    ///
    /// Train mode normalizes by batch statistics (population variance) and
    /// folds them into the running buffers as
    /// `running = (1 - momentum) * running + momentum * batch`. Eval mode
    /// normalizes by the running buffers and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        momentum: f64,
        eps: f64,
        train: bool,
    ) -> Result<TensorId> {
        let (n, c, h, w) = self.dims4(x, "batchnorm input")?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::ShapeMismatch(alloc::format!(
                "batchnorm scale/shift must be [{c}], got {:?} and {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch(alloc::format!(
                "batchnorm running buffers must hold {c} channels"
            )));
        }
        let xv = self.values(x).to_vec();
        let sv = self.values(scale).to_vec();
        let bv = self.values(shift).to_vec();
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        if train {
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * h * w;
                    for i in 0..h * w {
                        acc += xv[base + i];
                    }
                }
                let mu = acc / m;
                let mut var = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * h * w;
                    for i in 0..h * w {
                        let d = xv[base + i] - mu;
                        var += d * d;
                    }
                }
                let var = var / m;
                running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
                running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var;
                mean[ch] = mu;
                inv_std[ch] = 1.0 / math::sqrt(var + eps);
            }
        } else {
            for ch in 0..c {
                mean[ch] = running_mean[ch];
                inv_std[ch] = 1.0 / math::sqrt(running_var[ch] + eps);
            }
        }
        let mut out = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in 0..h * w {
                    out[base + i] = (xv[base + i] - mean[ch]) * inv_std[ch] * sv[ch] + bv[ch];
                }
            }
        }
        let rg =
            self.requires_grad(x) || self.requires_grad(scale) || self.requires_grad(shift);
        self.push_checked(
            "batchnorm2d",
            vec![n, c, h, w],
            out,
            rg,
            Op::BatchNorm2d {
                x,
                scale,
                shift,
                mean,
                inv_std,
                train,
            },
        )
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| math::sigmoid(v)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("sigmoid", shape, out, rg, Op::Sigmoid { x })
    }

    /// `log(sigmoid(x))`, computed as `-softplus(-x)` so large negative
    /// inputs stay finite.
    pub fn log_sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| math::log_sigmoid(v))
            .collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("log_sigmoid", shape, out, rg, Op::LogSigmoid { x })
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(v) = self.values(x).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(alloc::format!(
                "log of non-positive value {v}"
            )));
        }
        let out: Vec<f64> = self.values(x).iter().map(|&v| math::ln(v)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("log", shape, out, rg, Op::Log { x })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| math::exp(v)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("exp", shape, out, rg, Op::Exp { x })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let xv = self.values(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |j: usize| (o * len + j) * inner + r;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xv[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = math::exp(xv[at(j)] - mx);
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push_checked("softmax", shape, out, rg, Op::SoftmaxAxis { x, axis })
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let xv = self.values(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let mut acc = 0.0;
                for j in 0..len {
                    acc += xv[(o * len + j) * inner + r];
                }
                out[o * inner + r] = acc / len as f64;
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.requires_grad(x);
        self.push_checked("mean_axis", new_shape, out, rg, Op::MeanAxis { x, axis })
    }

    /// Population standard deviation along `axis`; the axis is removed.
    pub fn std_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let xv = self.values(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let at = |j: usize| (o * len + j) * inner + r;
                let mut mu = 0.0;
                for j in 0..len {
                    mu += xv[at(j)];
                }
                mu /= len as f64;
                let mut var = 0.0;
                for j in 0..len {
                    let d = xv[at(j)] - mu;
                    var += d * d;
                }
                out[o * inner + r] = math::sqrt(var / len as f64);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.requires_grad(x);
        self.push_checked("std_axis", new_shape, out, rg, Op::StdAxis { x, axis })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.values(x);
        let mut acc = 0.0;
        for &v in xv {
            acc += v;
        }
        let out = vec![acc / xv.len() as f64];
        let rg = self.requires_grad(x);
        self.push_checked("mean_all", Vec::new(), out, rg, Op::MeanAll { x })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.values(x);
        let mut acc = 0.0;
        for &v in xv {
            acc += v;
        }
        let rg = self.requires_grad(x);
        self.push_checked("sum_all", Vec::new(), vec![acc], rg, Op::SumAll { x })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("add", shape, out, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("sub", shape, out, rg, Op::Sub { a, b })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", shape, out, rg, Op::Mul { a, b })
    }

    pub fn neg(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| -v).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("neg", shape, out, rg, Op::Neg { x })
    }

    pub fn scalar_mul(&mut self, x: TensorId, k: f64) -> Result<TensorId> {
        if !k.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "scalar_mul factor must be finite, got {k}"
            )));
        }
        let out: Vec<f64> = self.values(x).iter().map(|&v| v * k).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("scalar_mul", shape, out, rg, Op::ScalarMul { x, k })
    }

    /// `max(x, min)` elementwise.
    pub fn clamp_min(&mut self, x: TensorId, min: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| v.max(min)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("clamp_min", shape, out, rg, Op::ClampMin { x, min })
    }

    /// `x [m,n] + bias [n]`, broadcast over rows.
    pub fn add_bias2d(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "bias input")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch(alloc::format!(
                "bias must be [{n}], got {:?}",
                self.shape(bias)
            )));
        }
        let xv = self.values(x);
        let bv = self.values(bias);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] + bv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push_checked("add_bias2d", vec![m, n], out, rg, Op::AddBias2d { x, bias })
    }

    /// `x [n,c,h,w] + bias [c]`, broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.dims4(x, "bias input")?;
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch(alloc::format!(
                "channel bias must be [{c}], got {:?}",
                self.shape(bias)
            )));
        }
        let xv = self.values(x);
        let bv = self.values(bias);
        let mut out = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in 0..h * w {
                    out[base + i] = xv[base + i] + bv[ch];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push_checked(
            "add_channel_bias",
            vec![n, c, h, w],
            out,
            rg,
            Op::AddChannelBias { x, bias },
        )
    }

    /// Same buffer, new shape; element count must match.
    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if new_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "reshape dimensions must be positive".into(),
            ));
        }
        if numel != self.numel(x) {
            return Err(Error::ShapeMismatch(alloc::format!(
                "cannot reshape {:?} into {:?}",
                self.shape(x),
                new_shape
            )));
        }
        let out = self.values(x).to_vec();
        let rg = self.requires_grad(x);
        self.push_checked("reshape", new_shape, out, rg, Op::Reshape { x })
    }

    /// Swap the last two axes of a tensor with at least two dims.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "transpose needs at least 2 dims, got {shape:?}"
            )));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let xv = self.values(x);
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = xv[o + i * n + j];
                }
            }
        }
        let mut new_shape = shape;
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let rg = self.requires_grad(x);
        self.push_checked("transpose", new_shape, out, rg, Op::TransposeLast2 { x })
    }

    /// Concatenate along the channel axis: `[n,c1,h,w] ++ [n,c2,h,w]`.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, c1, h, w) = self.dims4(a, "concat lhs")?;
        let (n2, c2, h2, w2) = self.dims4(b, "concat rhs")?;
        if n != n2 || h != h2 || w != w2 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "concat needs matching batch/spatial dims: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.values(a);
        let bv = self.values(b);
        let c = c1 + c2;
        let mut out = vec![0.0; n * c * h * w];
        for bi in 0..n {
            for ch in 0..c1 {
                let src = (bi * c1 + ch) * h * w;
                let dst = (bi * c + ch) * h * w;
                out[dst..dst + h * w].copy_from_slice(&av[src..src + h * w]);
            }
            for ch in 0..c2 {
                let src = (bi * c2 + ch) * h * w;
                let dst = (bi * c + c1 + ch) * h * w;
                out[dst..dst + h * w].copy_from_slice(&bv[src..src + h * w]);
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(
            "concat_channels",
            vec![n, c, h, w],
            out,
            rg,
            Op::ConcatChannels { a, b },
        )
    }

    /// Tile `[n,c,1,1]` across a spatial extent to `[n,c,h,w]`.
    pub fn broadcast_spatial(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let (n, c, h1, w1) = self.dims4(x, "broadcast input")?;
        if h1 != 1 || w1 != 1 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "broadcast source must be [n,c,1,1], got {:?}",
                self.shape(x)
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(
                "broadcast extent must be positive".into(),
            ));
        }
        let xv = self.values(x);
        let mut out = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let v = xv[b * c + ch];
                let base = (b * c + ch) * h * w;
                for i in 0..h * w {
                    out[base + i] = v;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push_checked(
            "broadcast_spatial",
            vec![n, c, h, w],
            out,
            rg,
            Op::BroadcastSpatial { x },
        )
    }

    /// `out[n,k,y,x] = v[n,k] * m[n,0,y,x]`: per-sample outer product of a
    /// feature vector with a spatial map.
    pub fn outer_broadcast_mul(&mut self, v: TensorId, m: TensorId) -> Result<TensorId> {
        let (n, k) = self.dims2(v, "outer lhs")?;
        let (n2, c, h, w) = self.dims4(m, "outer rhs")?;
        if n != n2 || c != 1 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "outer rhs must be [{n},1,h,w], got {:?}",
                self.shape(m)
            )));
        }
        let vv = self.values(v);
        let mv = self.values(m);
        let mut out = vec![0.0; n * k * h * w];
        for b in 0..n {
            for kk in 0..k {
                let x = vv[b * k + kk];
                let src = b * h * w;
                let dst = (b * k + kk) * h * w;
                for i in 0..h * w {
                    out[dst + i] = x * mv[src + i];
                }
            }
        }
        let rg = self.requires_grad(v) || self.requires_grad(m);
        self.push_checked(
            "outer_broadcast_mul",
            vec![n, k, h, w],
            out,
            rg,
            Op::OuterBroadcastMul { v, m },
        )
    }

    /// Extract one column of a `[n,c]` matrix as a `[n]` vector.
    pub fn select_column(&mut self, x: TensorId, col: usize) -> Result<TensorId> {
        let (n, c) = self.dims2(x, "select input")?;
        if col >= c {
            return Err(Error::InvalidArgument(alloc::format!(
                "column {col} out of range for {c} columns"
            )));
        }
        let xv = self.values(x);
        let out: Vec<f64> = (0..n).map(|i| xv[i * c + col]).collect();
        let rg = self.requires_grad(x);
        self.push_checked("select_column", vec![n], out, rg, Op::SelectColumn { x, col })
    }

    /// Gather elements of a `[n]` vector by index; duplicates are allowed
    /// and accumulate gradient.
    pub fn gather(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "gather input must be 1-d, got {s:?}"
            )));
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather with empty index set".into()));
        }
        let n = s[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(alloc::format!(
                "gather index {bad} out of range for length {n}"
            )));
        }
        let xv = self.values(x);
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.requires_grad(x);
        self.push_checked(
            "gather",
            vec![idx.len()],
            out,
            rg,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Gradient contributions of node `i` to each of its inputs.
    pub(crate) fn vjp(&self, i: usize) -> Vec<(TensorId, Vec<f64>)> {
        let node = &self.nodes[i];
        let up = &node.grad;
        let mut out: Vec<(TensorId, Vec<f64>)> = Vec::new();
        let mut emit = |id: TensorId, g: Vec<f64>| {
            if self.requires_grad(id) {
                out.push((id, g));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.values(*a);
                let bv = self.values(*b);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let u = up[i * n + j];
                            for kk in 0..k {
                                da[i * k + kk] += u * bv[kk * n + j];
                            }
                        }
                    }
                    emit(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let x = av[i * k + kk];
                            for j in 0..n {
                                db[kk * n + j] += x * up[i * n + j];
                            }
                        }
                    }
                    emit(*b, db);
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let av = self.values(*a);
                let bv = self.values(*b);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for t in 0..bs {
                        for i in 0..m {
                            for j in 0..n {
                                let u = up[(t * m + i) * n + j];
                                for kk in 0..k {
                                    da[(t * m + i) * k + kk] += u * bv[(t * k + kk) * n + j];
                                }
                            }
                        }
                    }
                    emit(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for t in 0..bs {
                        for i in 0..m {
                            for kk in 0..k {
                                let x = av[(t * m + i) * k + kk];
                                for j in 0..n {
                                    db[(t * k + kk) * n + j] += x * up[(t * m + i) * n + j];
                                }
                            }
                        }
                    }
                    emit(*b, db);
                }
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let (n, ci, h, w) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2], s[3])
                };
                let (o, _, kh, kw) = {
                    let s = self.shape(*k);
                    (s[0], s[1], s[2], s[3])
                };
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let xv = self.values(*x);
                let kv = self.values(*k);
                let need_dx = self.requires_grad(*x);
                let need_dk = self.requires_grad(*k);
                let mut dx = vec![0.0; if need_dx { xv.len() } else { 0 }];
                let mut dk = vec![0.0; if need_dk { kv.len() } else { 0 }];
                for b in 0..n {
                    for oc in 0..o {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let u = up[((b * o + oc) * oh + oy) * ow + ox];
                                if u == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        if iy < *padding || iy - padding >= h {
                                            continue;
                                        }
                                        let iy = iy - padding;
                                        for kx in 0..kw {
                                            let ix = ox * stride + kx;
                                            if ix < *padding || ix - padding >= w {
                                                continue;
                                            }
                                            let ix = ix - padding;
                                            let xi = ((b * ci + ic) * h + iy) * w + ix;
                                            let ki = ((oc * ci + ic) * kh + ky) * kw + kx;
                                            if need_dx {
                                                dx[xi] += u * kv[ki];
                                            }
                                            if need_dk {
                                                dk[ki] += u * xv[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_dx {
                    emit(*x, dx);
                }
                if need_dk {
                    emit(*k, dk);
                }
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2], s[3])
                };
                let hw = (h * w) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ch in 0..c {
                        let g = up[b * c + ch] / hw;
                        let base = (b * c + ch) * h * w;
                        for i in 0..h * w {
                            dx[base + i] = g;
                        }
                    }
                }
                emit(*x, dx);
            }
            Op::BatchNorm2d {
                x,
                scale,
                shift,
                mean,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2], s[3])
                };
                let m = (n * h * w) as f64;
                let xv = self.values(*x);
                let sv = self.values(*scale);
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ch in 0..c {
                    for b in 0..n {
                        let base = (b * c + ch) * h * w;
                        for i in 0..h * w {
                            let xhat = (xv[base + i] - mean[ch]) * inv_std[ch];
                            dscale[ch] += up[base + i] * xhat;
                            dshift[ch] += up[base + i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for ch in 0..c {
                        let a = sv[ch] * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * h * w;
                            for i in 0..h * w {
                                if *train {
                                    let xhat = (xv[base + i] - mean[ch]) * inv_std[ch];
                                    dx[base + i] = a
                                        * (up[base + i]
                                            - dshift[ch] / m
                                            - xhat * dscale[ch] / m);
                                } else {
                                    dx[base + i] = a * up[base + i];
                                }
                            }
                        }
                    }
                    emit(*x, dx);
                }
                emit(*scale, dscale);
                emit(*shift, dshift);
            }
            Op::Sigmoid { x } => {
                let g: Vec<f64> = node
                    .values
                    .iter()
                    .zip(up)
                    .map(|(&s, &u)| u * s * (1.0 - s))
                    .collect();
                emit(*x, g);
            }
            Op::LogSigmoid { x } => {
                let g: Vec<f64> = self
                    .values(*x)
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| u * math::sigmoid(-v))
                    .collect();
                emit(*x, g);
            }
            Op::Log { x } => {
                let g: Vec<f64> = self
                    .values(*x)
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| u / v)
                    .collect();
                emit(*x, g);
            }
            Op::Exp { x } => {
                let g: Vec<f64> = node
                    .values
                    .iter()
                    .zip(up)
                    .map(|(&e, &u)| u * e)
                    .collect();
                emit(*x, g);
            }
            Op::SoftmaxAxis { x, axis } => {
                let shape = &node.shape;
                let (outer, len, inner) = axis_split(shape, *axis).expect("validated in forward");
                let sv = &node.values;
                let mut dx = vec![0.0; sv.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + r;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += up[at(j)] * sv[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = sv[at(j)] * (up[at(j)] - dot);
                        }
                    }
                }
                emit(*x, dx);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis).expect("validated in forward");
                let mut dx = vec![0.0; self.numel(*x)];
                for o in 0..outer {
                    for r in 0..inner {
                        let g = up[o * inner + r] / len as f64;
                        for j in 0..len {
                            dx[(o * len + j) * inner + r] = g;
                        }
                    }
                }
                emit(*x, dx);
            }
            Op::StdAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis).expect("validated in forward");
                let xv = self.values(*x);
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + r;
                        let s = node.values[o * inner + r];
                        if s == 0.0 {
                            continue;
                        }
                        let mut mu = 0.0;
                        for j in 0..len {
                            mu += xv[at(j)];
                        }
                        mu /= len as f64;
                        let g = up[o * inner + r] / (len as f64 * s);
                        for j in 0..len {
                            dx[at(j)] = g * (xv[at(j)] - mu);
                        }
                    }
                }
                emit(*x, dx);
            }
            Op::MeanAll { x } => {
                let n = self.numel(*x);
                let g = up[0] / n as f64;
                emit(*x, vec![g; n]);
            }
            Op::SumAll { x } => {
                let n = self.numel(*x);
                emit(*x, vec![up[0]; n]);
            }
            Op::Add { a, b } => {
                emit(*a, up.clone());
                emit(*b, up.clone());
            }
            Op::Sub { a, b } => {
                emit(*a, up.clone());
                emit(*b, up.iter().map(|&u| -u).collect());
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let g: Vec<f64> = self
                        .values(*b)
                        .iter()
                        .zip(up)
                        .map(|(&y, &u)| u * y)
                        .collect();
                    emit(*a, g);
                }
                if self.requires_grad(*b) {
                    let g: Vec<f64> = self
                        .values(*a)
                        .iter()
                        .zip(up)
                        .map(|(&x, &u)| u * x)
                        .collect();
                    emit(*b, g);
                }
            }
            Op::Neg { x } => {
                emit(*x, up.iter().map(|&u| -u).collect());
            }
            Op::ScalarMul { x, k } => {
                emit(*x, up.iter().map(|&u| u * k).collect());
            }
            Op::ClampMin { x, min } => {
                let g: Vec<f64> = self
                    .values(*x)
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| if v > *min { u } else { 0.0 })
                    .collect();
                emit(*x, g);
            }
            Op::AddBias2d { x, bias } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                emit(*x, up.clone());
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += up[i * n + j];
                        }
                    }
                    emit(*bias, db);
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (n, c, h, w) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2], s[3])
                };
                emit(*x, up.clone());
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            for i in 0..h * w {
                                db[ch] += up[base + i];
                            }
                        }
                    }
                    emit(*bias, db);
                }
            }
            Op::Reshape { x } => {
                emit(*x, up.clone());
            }
            Op::TransposeLast2 { x } => {
                let shape = self.shape(*x);
                let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch: usize = shape[..shape.len() - 2].iter().product();
                let mut dx = vec![0.0; up.len()];
                for b in 0..batch {
                    let o = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            dx[o + i * n + j] = up[o + j * m + i];
                        }
                    }
                }
                emit(*x, dx);
            }
            Op::ConcatChannels { a, b } => {
                let (n, c1, h, w) = {
                    let s = self.shape(*a);
                    (s[0], s[1], s[2], s[3])
                };
                let c2 = self.shape(*b)[1];
                let c = c1 + c2;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * c1 * h * w];
                    for bi in 0..n {
                        for ch in 0..c1 {
                            let src = (bi * c + ch) * h * w;
                            let dst = (bi * c1 + ch) * h * w;
                            da[dst..dst + h * w].copy_from_slice(&up[src..src + h * w]);
                        }
                    }
                    emit(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * c2 * h * w];
                    for bi in 0..n {
                        for ch in 0..c2 {
                            let src = (bi * c + c1 + ch) * h * w;
                            let dst = (bi * c2 + ch) * h * w;
                            db[dst..dst + h * w].copy_from_slice(&up[src..src + h * w]);
                        }
                    }
                    emit(*b, db);
                }
            }
            Op::BroadcastSpatial { x } => {
                let (n, c) = {
                    let s = self.shape(*x);
                    (s[0], s[1])
                };
                let (h, w) = (node.shape[2], node.shape[3]);
                let mut dx = vec![0.0; n * c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let mut acc = 0.0;
                        for i in 0..h * w {
                            acc += up[base + i];
                        }
                        dx[b * c + ch] = acc;
                    }
                }
                emit(*x, dx);
            }
            Op::OuterBroadcastMul { v, m } => {
                let (n, k) = (self.shape(*v)[0], self.shape(*v)[1]);
                let (h, w) = (node.shape[2], node.shape[3]);
                let vv = self.values(*v);
                let mv = self.values(*m);
                if self.requires_grad(*v) {
                    let mut dv = vec![0.0; n * k];
                    for b in 0..n {
                        for kk in 0..k {
                            let base = (b * k + kk) * h * w;
                            let src = b * h * w;
                            let mut acc = 0.0;
                            for i in 0..h * w {
                                acc += up[base + i] * mv[src + i];
                            }
                            dv[b * k + kk] = acc;
                        }
                    }
                    emit(*v, dv);
                }
                if self.requires_grad(*m) {
                    let mut dm = vec![0.0; n * h * w];
                    for b in 0..n {
                        for kk in 0..k {
                            let base = (b * k + kk) * h * w;
                            let x = vv[b * k + kk];
                            let dst = b * h * w;
                            for i in 0..h * w {
                                dm[dst + i] += up[base + i] * x;
                            }
                        }
                    }
                    emit(*m, dm);
                }
            }
            Op::SelectColumn { x, col } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    dx[i * c + col] = up[i];
                }
                emit(*x, dx);
            }
            Op::Gather { x, idx } => {
                let n = self.numel(*x);
                let mut dx = vec![0.0; n];
                for (j, &src) in idx.iter().enumerate() {
                    dx[src] += up[j];
                }
                emit(*x, dx);
            }
        }
        out
    }
}
