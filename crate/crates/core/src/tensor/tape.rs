use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Recorded operation, holding input ids and whatever forward state the
/// backward pass needs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        k: TensorId,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    /// Normalization statistics are saved from the forward pass: in train
    /// mode the batch mean and inverse stddev, in eval mode the running
    /// ones. `train` selects which backward rule applies.
    BatchNorm2d {
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Sigmoid {
        x: TensorId,
    },
    LogSigmoid {
        x: TensorId,
    },
    Log {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    SoftmaxAxis {
        x: TensorId,
        axis: usize,
    },
    MeanAxis {
        x: TensorId,
        axis: usize,
    },
    /// Population standard deviation along one axis. Zero deviation gets
    /// a zero subgradient.
    StdAxis {
        x: TensorId,
        axis: usize,
    },
    MeanAll {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Neg {
        x: TensorId,
    },
    ScalarMul {
        x: TensorId,
        k: f64,
    },
    /// `max(x, min)`; the gradient is zero at and below the clamp point.
    ClampMin {
        x: TensorId,
        min: f64,
    },
    AddBias2d {
        x: TensorId,
        bias: TensorId,
    },
    AddChannelBias {
        x: TensorId,
        bias: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    TransposeLast2 {
        x: TensorId,
    },
    Bmm {
        a: TensorId,
        b: TensorId,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    BroadcastSpatial {
        x: TensorId,
    },
    /// `out[n,k,y,x] = v[n,k] * m[n,0,y,x]`.
    OuterBroadcastMul {
        v: TensorId,
        m: TensorId,
    },
    SelectColumn {
        x: TensorId,
        col: usize,
    },
    Gather {
        x: TensorId,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) grad: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Append-only record of a forward computation.
///
/// One tape owns one training step: record the forward pass, call
/// [`Tape::backward`] once, read gradients, then drop the tape. A second
/// backward on the same tape is an error.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copy a tensor onto the tape as a leaf, preserving its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf))
    }

    pub fn constant_scalar(&mut self, value: f64) -> TensorId {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        let n = values.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Push a computed node, rejecting non-finite outputs so numeric
    /// blowups surface at the op that caused them.
    pub(crate) fn push_checked(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<TensorId> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "{name} produced non-finite value {v}"
            )));
        }
        Ok(self.push(shape, values, requires_grad, op))
    }

    pub(crate) fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].values.len()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let n = self.node(id);
        if n.values.len() != 1 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    /// Gradient buffer of a node. Only meaningful after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Result<&[f64]> {
        if !self.consumed {
            return Err(Error::Tape(String::from(
                "gradients requested before backward",
            )));
        }
        Ok(&self.nodes[id.0].grad)
    }

    pub(crate) fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reverse sweep from a scalar loss. Accumulates gradients into every
    /// node that requires them; callable once per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Tape(String::from("backward on an empty tape")));
        }
        if self.consumed {
            return Err(Error::Tape(String::from(
                "backward called twice on one tape; rebuild the forward pass first",
            )));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(String::from("loss id not on this tape")));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Tape(String::from(
                "loss does not depend on any tensor that requires gradients",
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.vjp(i);
            for (TensorId(j), g) in contributions {
                debug_assert!(j < i, "tape inputs must precede their consumers");
                let dst = &mut self.nodes[j].grad;
                for (d, s) in dst.iter_mut().zip(&g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}
