//! Central finite-difference verification of every differentiable op and
//! every loss, at random points.
//!
//! The loss checks hold all stop-gradient quantities (re-balance factor,
//! temperature, MixUp targets and draws) at their base-point values while
//! coordinates are perturbed. That frozen function is precisely the one
//! the backward pass differentiates, so agreement there validates the
//! gradients training actually uses.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::LabelMatrix;
use crate::error::{Error, Result};
use crate::lgconv::LgConvBlock;
use crate::losses::{
    adaptive_temperature, draw_mixup, mixup_reg_terms_with_targets, mixup_targets, pn_bce_loss,
    pn_risk, rebalance_factor, upu_risk, var_loss_category, BatchView,
};
use crate::math;
use crate::nn::{build_model, Conv2dLayer, Model, ModelSpec};
use crate::tensor::{Tape, Tensor, TensorId};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
// relative-error denominator floor; below this magnitude the finite
// difference is dominated by rounding and the comparison turns absolute
const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub component: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> Vec<&GradcheckEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = math::abs(analytic)
        .max(math::abs(numeric))
        .max(DENOM_FLOOR);
    math::abs(analytic - numeric) / denom
}

/// Compares an analytic gradient against central finite differences of
/// `f` at `at`. The closures may be called many times; they must be pure
/// functions of their argument.
pub fn gradcheck_case(
    name: &str,
    at: &[f64],
    tolerance: f64,
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    g: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<GradcheckEntry> {
    let analytic = g(at)?;
    if analytic.len() != at.len() {
        return Err(Error::InvalidArgument(format!(
            "{name}: gradient has {} coordinates for {} inputs",
            analytic.len(),
            at.len()
        )));
    }
    let mut coords = at.to_vec();
    let mut max_rel = 0.0f64;
    for k in 0..at.len() {
        let orig = coords[k];
        coords[k] = orig + FD_STEP;
        let fp = f(&coords)?;
        coords[k] = orig - FD_STEP;
        let fm = f(&coords)?;
        coords[k] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic[k], numeric));
    }
    Ok(GradcheckEntry {
        component: String::from(name),
        max_rel_err: max_rel,
        pass: max_rel <= tolerance,
    })
}

/// A component whose scalar output and leaf gradients come from one graph
/// builder: the builder receives the flat coordinates and returns the
/// scalar node plus the leaves the coordinates were split into.
pub fn gradcheck_graph(
    name: &str,
    at: &[f64],
    tolerance: f64,
    build: &dyn Fn(&mut Tape, &[f64]) -> Result<(TensorId, Vec<TensorId>)>,
) -> Result<GradcheckEntry> {
    let mut f = |coords: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, coords)?;
        tape.scalar_value(loss)
    };
    let mut g = |coords: &[f64]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (loss, leaves) = build(&mut tape, coords)?;
        tape.backward(loss)?;
        let mut out = Vec::with_capacity(coords.len());
        for id in leaves {
            out.extend_from_slice(tape.grad(id)?);
        }
        Ok(out)
    };
    gradcheck_case(name, at, tolerance, &mut f, &mut g)
}

// splits flat coordinates into differentiable leaves of the given shapes
fn leaves(tape: &mut Tape, coords: &[f64], shapes: &[&[usize]]) -> Result<Vec<TensorId>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let len: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), coords[offset..offset + len].to_vec())?.with_grad();
        out.push(tape.leaf(&t));
        offset += len;
    }
    if offset != coords.len() {
        return Err(Error::InvalidArgument(format!(
            "{} coordinates for shapes holding {offset}",
            coords.len()
        )));
    }
    Ok(out)
}

// fixed-weight readout turning any tensor into a scalar; weights break
// the symmetry a plain sum would leave unchecked
fn readout(tape: &mut Tape, x: TensorId, weights: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(shape, weights.to_vec())?;
    let prod = tape.mul(x, w)?;
    tape.sum_all(prod)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

// magnitudes in [0.1, 1.1] with random sign, keeping clamp kinks and log
// domain edges at a safe distance
fn signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.1);
            if rng.random_range(0.0..1.0) < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect()
}

struct Suite {
    entries: Vec<GradcheckEntry>,
    points: usize,
    rng: ChaCha8Rng,
}

impl Suite {
    // runs one component at `points` random points and records the worst;
    // the builder factory sees the sampled point so frozen-constant
    // components can fix their stop-gradient values there
    fn graph(
        &mut self,
        name: &str,
        dim: usize,
        sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<f64>,
        build_for_point: &mut dyn FnMut(
            &mut ChaCha8Rng,
            &[f64],
        )
            -> Box<dyn Fn(&mut Tape, &[f64]) -> Result<(TensorId, Vec<TensorId>)>>,
    ) -> Result<()> {
        let mut worst = GradcheckEntry {
            component: String::from(name),
            max_rel_err: 0.0,
            pass: true,
        };
        for _ in 0..self.points {
            let at = sampler(&mut self.rng);
            debug_assert_eq!(at.len(), dim, "{name} sampler dimension");
            let build = build_for_point(&mut self.rng, &at);
            let entry = gradcheck_graph(name, &at, TOLERANCE, build.as_ref())?;
            if entry.max_rel_err > worst.max_rel_err {
                worst.max_rel_err = entry.max_rel_err;
                worst.pass = entry.pass;
            }
        }
        self.entries.push(worst);
        Ok(())
    }
}

/// Runs the whole gradient-verification suite: every tape op that carries
/// gradients, the composed model forwards, and every loss (the PU
/// objective in plain, re-balanced, fixed- and adaptive-temperature, and
/// MixUp-regularized form). `points` random points per component.
pub fn standard_suite(points: usize, seed: u64) -> Result<GradcheckReport> {
    let mut suite = Suite {
        entries: Vec::new(),
        points,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    ops(&mut suite)?;
    composites(&mut suite)?;
    losses(&mut suite)?;
    Ok(GradcheckReport {
        entries: suite.entries,
        tolerance: TOLERANCE,
    })
}

fn ops(suite: &mut Suite) -> Result<()> {
    // each closure draws its fixed readout weights per point, then builds
    // the same graph for every FD evaluation at that point
    suite.graph(
        "op/matmul",
        12,
        &mut |rng| uniform(rng, 12, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 4, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3], &[3, 2]])?;
                let y = tape.matmul(ids[0], ids[1])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/bmm",
        24,
        &mut |rng| uniform(rng, 24, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 8, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 2, 3], &[2, 3, 2]])?;
                let y = tape.bmm(ids[0], ids[1])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/conv2d_3x3",
        68,
        &mut |rng| uniform(rng, 68, -1.5, 1.5),
        &mut |rng, _at| {
            let w = uniform(rng, 32, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[1, 2, 4, 4], &[2, 2, 3, 3]])?;
                let y = tape.conv2d(ids[0], ids[1], 1, 1)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/conv2d_1x1",
        24,
        &mut |rng| uniform(rng, 24, -1.5, 1.5),
        &mut |rng, _at| {
            let w = uniform(rng, 27, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[1, 2, 3, 3], &[3, 2, 1, 1]])?;
                let y = tape.conv2d(ids[0], ids[1], 1, 0)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/global_avg_pool",
        36,
        &mut |rng| uniform(rng, 36, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 4, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 2, 3, 3]])?;
                let y = tape.global_avg_pool(ids[0])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/batchnorm2d_train",
        20,
        &mut |rng| uniform(rng, 20, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 16, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 2, 2, 2], &[2], &[2]])?;
                let mut rm = vec![0.0; 2];
                let mut rv = vec![1.0; 2];
                let y =
                    tape.batchnorm2d(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5, true)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/batchnorm2d_eval",
        20,
        &mut |rng| uniform(rng, 20, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 16, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 2, 2, 2], &[2], &[2]])?;
                let mut rm = vec![0.1, -0.2];
                let mut rv = vec![1.3, 0.7];
                let y =
                    tape.batchnorm2d(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5, false)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    for (name, which) in [
        ("op/sigmoid", 0usize),
        ("op/log_sigmoid", 1),
        ("op/exp", 2),
        ("op/neg", 3),
    ] {
        suite.graph(
            name,
            5,
            &mut |rng| uniform(rng, 5, -2.0, 2.0),
            &mut |rng, _at| {
                let w = uniform(rng, 5, -1.0, 1.0);
                Box::new(move |tape, coords| {
                    let ids = leaves(tape, coords, &[&[5]])?;
                    let y = match which {
                        0 => tape.sigmoid(ids[0])?,
                        1 => tape.log_sigmoid(ids[0])?,
                        2 => tape.exp(ids[0])?,
                        _ => tape.neg(ids[0])?,
                    };
                    Ok((readout(tape, y, &w)?, ids))
                })
            },
        )?;
    }
    suite.graph(
        "op/log",
        4,
        &mut |rng| uniform(rng, 4, 0.3, 3.0),
        &mut |rng, _at| {
            let w = uniform(rng, 4, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[4]])?;
                let y = tape.log(ids[0])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/softmax_axis",
        6,
        &mut |rng| uniform(rng, 6, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 6, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3]])?;
                let y = tape.softmax_axis(ids[0], 1)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/mean_axis",
        6,
        &mut |rng| uniform(rng, 6, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 3, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3]])?;
                let y = tape.mean_axis(ids[0], 0)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/std_axis",
        12,
        &mut |rng| uniform(rng, 12, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 3, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[3, 4]])?;
                let y = tape.std_axis(ids[0], 1)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    for (name, which) in [("op/mean_all", 0usize), ("op/sum_all", 1)] {
        suite.graph(
            name,
            6,
            &mut |rng| uniform(rng, 6, -2.0, 2.0),
            &mut |_, _at| {
                Box::new(move |tape, coords| {
                    let ids = leaves(tape, coords, &[&[6]])?;
                    let y = match which {
                        0 => tape.mean_all(ids[0])?,
                        _ => tape.sum_all(ids[0])?,
                    };
                    Ok((y, ids))
                })
            },
        )?;
    }
    for (name, which) in [("op/add", 0usize), ("op/sub", 1), ("op/mul", 2)] {
        suite.graph(
            name,
            8,
            &mut |rng| uniform(rng, 8, -2.0, 2.0),
            &mut |rng, _at| {
                let w = uniform(rng, 4, -1.0, 1.0);
                Box::new(move |tape, coords| {
                    let ids = leaves(tape, coords, &[&[4], &[4]])?;
                    let y = match which {
                        0 => tape.add(ids[0], ids[1])?,
                        1 => tape.sub(ids[0], ids[1])?,
                        _ => tape.mul(ids[0], ids[1])?,
                    };
                    Ok((readout(tape, y, &w)?, ids))
                })
            },
        )?;
    }
    suite.graph(
        "op/scalar_mul",
        4,
        &mut |rng| uniform(rng, 4, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 4, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[4]])?;
                let y = tape.scalar_mul(ids[0], 1.7)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/clamp_min",
        6,
        &mut |rng| signed_away_from_zero(rng, 6),
        &mut |rng, _at| {
            let w = uniform(rng, 6, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[6]])?;
                let y = tape.clamp_min(ids[0], 0.0)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/add_bias2d",
        9,
        &mut |rng| uniform(rng, 9, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 6, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3], &[3]])?;
                let y = tape.add_bias2d(ids[0], ids[1])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/add_channel_bias",
        10,
        &mut |rng| uniform(rng, 10, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 8, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[1, 2, 2, 2], &[2]])?;
                let y = tape.add_channel_bias(ids[0], ids[1])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/reshape",
        6,
        &mut |rng| uniform(rng, 6, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 6, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3]])?;
                let y = tape.reshape(ids[0], vec![3, 2])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/transpose_last2",
        6,
        &mut |rng| uniform(rng, 6, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 6, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3]])?;
                let y = tape.transpose_last2(ids[0])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/concat_channels",
        12,
        &mut |rng| uniform(rng, 12, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 12, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[1, 1, 2, 2], &[1, 2, 2, 2]])?;
                let y = tape.concat_channels(ids[0], ids[1])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/broadcast_spatial",
        6,
        &mut |rng| uniform(rng, 6, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 24, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3, 1, 1]])?;
                let y = tape.broadcast_spatial(ids[0], 2, 2)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/outer_broadcast_mul",
        14,
        &mut |rng| uniform(rng, 14, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 24, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[2, 3], &[2, 1, 2, 2]])?;
                let y = tape.outer_broadcast_mul(ids[0], ids[1])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/select_column",
        6,
        &mut |rng| uniform(rng, 6, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 3, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[3, 2]])?;
                let y = tape.select_column(ids[0], 1)?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    suite.graph(
        "op/gather",
        5,
        &mut |rng| uniform(rng, 5, -2.0, 2.0),
        &mut |rng, _at| {
            let w = uniform(rng, 4, -1.0, 1.0);
            Box::new(move |tape, coords| {
                let ids = leaves(tape, coords, &[&[5]])?;
                // duplicate index checks gradient accumulation
                let y = tape.gather(ids[0], &[0, 2, 2, 4])?;
                Ok((readout(tape, y, &w)?, ids))
            })
        },
    )?;
    Ok(())
}

// loads flat coordinates into a model's parameter tensors
fn set_params_from(model: &mut Model, coords: &[f64]) -> Result<()> {
    let mut offset = 0;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut chunks = Vec::with_capacity(sizes.len());
    for len in sizes {
        chunks.push(coords[offset..offset + len].to_vec());
        offset += len;
    }
    if offset != coords.len() {
        return Err(Error::InvalidArgument(format!(
            "{} coordinates for a model holding {offset} parameters",
            coords.len()
        )));
    }
    model.load_param_values(&chunks)
}

fn composites(suite: &mut Suite) -> Result<()> {
    // the attention block alone, gradients w.r.t. input and every block
    // parameter, batch statistics active
    {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(suite.rng.random());
        let conv = Conv2dLayer::new(2, 2, 3, 1, 1, &mut seed_rng);
        let block = LgConvBlock::from_conv(&conv, 2, &mut seed_rng)?;
        let param_dim: usize = block.params().iter().map(|p| p.numel()).sum();
        let dim = 32 + param_dim;
        suite.graph(
            "block/lgconv_train",
            dim,
            &mut |rng| uniform(rng, dim, -1.0, 1.0),
            &mut |rng, _at| {
                let w = uniform(rng, 32, -1.0, 1.0);
                let conv_inner = {
                    let mut r = ChaCha8Rng::seed_from_u64(31);
                    Conv2dLayer::new(2, 2, 3, 1, 1, &mut r)
                };
                Box::new(move |tape: &mut Tape, coords: &[f64]| {
                    let mut r = ChaCha8Rng::seed_from_u64(32);
                    let mut block = LgConvBlock::from_conv(&conv_inner, 2, &mut r)?;
                    let x = Tensor::new(vec![1, 2, 4, 4], coords[..32].to_vec())?.with_grad();
                    let xid = tape.leaf(&x);
                    let mut offset = 32;
                    let mut bound = vec![xid];
                    for p in block.params_mut() {
                        let len = p.numel();
                        let t = Tensor::new(
                            p.shape().to_vec(),
                            coords[offset..offset + len].to_vec(),
                        )?
                        .with_grad();
                        bound.push(tape.leaf(&t));
                        offset += len;
                    }
                    let mut cursor = 1;
                    let y = block.forward(tape, xid, &bound, &mut cursor, true)?;
                    Ok((readout(tape, y, &w)?, bound))
                })
            },
        )?;
    }

    // a full MLP forward w.r.t. its parameters
    {
        let spec = ModelSpec::Mlp {
            input_dim: 4,
            hidden: vec![5],
            categories: 3,
        };
        let mut r = ChaCha8Rng::seed_from_u64(40);
        let probe = build_model(&spec, &mut r)?;
        let dim = probe.num_params();
        suite.graph(
            "model/mlp_forward",
            dim,
            &mut |rng| uniform(rng, dim, -1.0, 1.0),
            &mut |rng, _at| {
                let x_vals = uniform(rng, 8, -1.0, 1.0);
                let w = uniform(rng, 6, -1.0, 1.0);
                let spec = spec.clone();
                Box::new(move |tape: &mut Tape, coords: &[f64]| {
                    let mut r = ChaCha8Rng::seed_from_u64(41);
                    let mut model = build_model(&spec, &mut r)?;
                    set_params_from(&mut model, coords)?;
                    let x = tape.constant(vec![2, 4], x_vals.clone())?;
                    let bound = model.bind_params(tape);
                    let y = model.forward_bound(tape, x, &bound, true)?;
                    Ok((readout(tape, y, &w)?, bound))
                })
            },
        )?;
    }

    // the full conv stack used in training, attention block included
    {
        let spec = ModelSpec::Cnn {
            in_channels: 1,
            channels: vec![2],
            categories: 2,
            lgconv: true,
        };
        let mut r = ChaCha8Rng::seed_from_u64(50);
        let probe = build_model(&spec, &mut r)?;
        let dim = probe.num_params();
        suite.graph(
            "model/cnn_lgconv_forward",
            dim,
            &mut |rng| uniform(rng, dim, -1.0, 1.0),
            &mut |rng, _at| {
                let x_vals = uniform(rng, 2 * 36, -1.0, 1.0);
                let w = uniform(rng, 4, -1.0, 1.0);
                let spec = spec.clone();
                Box::new(move |tape: &mut Tape, coords: &[f64]| {
                    let mut r = ChaCha8Rng::seed_from_u64(51);
                    let mut model = build_model(&spec, &mut r)?;
                    set_params_from(&mut model, coords)?;
                    let x = tape.constant(vec![2, 1, 6, 6], x_vals.clone())?;
                    let bound = model.bind_params(tape);
                    let y = model.forward_bound(tape, x, &bound, true)?;
                    Ok((readout(tape, y, &w)?, bound))
                })
            },
        )?;
    }
    Ok(())
}

// labels with at least one positive per category so every loss term is
// exercised
fn labels_with_positives(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
    with_negatives: bool,
) -> LabelMatrix {
    let mut entries = vec![0i8; n * c];
    for (k, e) in entries.iter_mut().enumerate() {
        let roll = rng.random_range(0.0..1.0);
        *e = if roll < 0.4 {
            1
        } else if with_negatives && roll < 0.7 {
            -1
        } else {
            0
        };
        let _ = k;
    }
    for cat in 0..c {
        let row = rng.random_range(0..n);
        entries[row * c + cat] = 1;
    }
    LabelMatrix::new(n, c, entries).expect("valid labels")
}

fn losses(suite: &mut Suite) -> Result<()> {
    {
        let mut label_rng = ChaCha8Rng::seed_from_u64(suite.rng.random());
        suite.graph(
            "loss/pn_bce",
            12,
            &mut |rng| uniform(rng, 12, -2.0, 2.0),
            &mut |_, _at| {
                let labels = labels_with_positives(&mut label_rng, 4, 3, true);
                Box::new(move |tape: &mut Tape, coords: &[f64]| {
                    let ids = leaves(tape, coords, &[&[4, 3]])?;
                    let view = BatchView::new(tape, ids[0], &labels)?;
                    let loss = pn_bce_loss(tape, &view)?;
                    Ok((loss, ids))
                })
            },
        )?;
    }
    suite.graph(
        "loss/pn_risk",
        9,
        &mut |rng| uniform(rng, 9, -2.0, 2.0),
        &mut |_, _at| {
            Box::new(move |tape: &mut Tape, coords: &[f64]| {
                let ids = leaves(tape, coords, &[&[5], &[4]])?;
                let loss = pn_risk(tape, ids[0], ids[1], 0.3)?;
                Ok((loss, ids))
            })
        },
    )?;
    suite.graph(
        "loss/upu_risk",
        12,
        &mut |rng| uniform(rng, 12, -2.0, 2.0),
        &mut |_, _at| {
            Box::new(move |tape: &mut Tape, coords: &[f64]| {
                let ids = leaves(tape, coords, &[&[5], &[7]])?;
                let loss = upu_risk(tape, ids[0], ids[1], 0.3)?;
                Ok((loss, ids))
            })
        },
    )?;
    {
        let mut label_rng = ChaCha8Rng::seed_from_u64(suite.rng.random());
        suite.graph(
            "loss/var_fixed_tau",
            10,
            &mut |rng| uniform(rng, 10, -2.0, 2.0),
            &mut |_, _at| {
                let labels = labels_with_positives(&mut label_rng, 5, 2, false);
                Box::new(move |tape: &mut Tape, coords: &[f64]| {
                    let ids = leaves(tape, coords, &[&[5, 2]])?;
                    let view = BatchView::new(tape, ids[0], &labels)?;
                    let a = var_loss_category(tape, &view, 0, 0.8, 0.6)?;
                    let b = var_loss_category(tape, &view, 1, 0.8, 0.6)?;
                    let loss = tape.add(a.term, b.term)?;
                    Ok((loss, ids))
                })
            },
        )?;
    }
    {
        // adaptive temperature and re-balance factor frozen at the base
        // point: the stop-gradient contract makes that the differentiated
        // function
        let mut label_rng = ChaCha8Rng::seed_from_u64(suite.rng.random());
        suite.graph(
            "loss/var_adaptive_frozen",
            10,
            &mut |rng| uniform(rng, 10, -2.0, 2.0),
            &mut |_, at| {
                let labels = labels_with_positives(&mut label_rng, 5, 2, false);
                // freeze at the sampled base point
                let (taus, pfs) = {
                    let mut tape = Tape::new();
                    let t = Tensor::new(vec![5, 2], at.to_vec()).expect("base point");
                    let id = tape.leaf(&t);
                    let view = BatchView::new(&tape, id, &labels).expect("view");
                    let taus: Vec<f64> = (0..2)
                        .map(|c| adaptive_temperature(&tape, &view, c, 1.0, 1e-3))
                        .collect();
                    let pfs: Vec<f64> = (0..2)
                        .map(|c| rebalance_factor(&tape, &view, c, 1.0))
                        .collect();
                    (taus, pfs)
                };
                Box::new(move |tape: &mut Tape, coords: &[f64]| {
                    let ids = leaves(tape, coords, &[&[5, 2]])?;
                    let view = BatchView::new(tape, ids[0], &labels)?;
                    let a = var_loss_category(tape, &view, 0, pfs[0], taus[0])?;
                    let b = var_loss_category(tape, &view, 1, pfs[1], taus[1])?;
                    let loss = tape.add(a.term, b.term)?;
                    Ok((loss, ids))
                })
            },
        )?;
    }
    {
        // the full objective w.r.t. model parameters, all features on:
        // re-balance, adaptive temperature, and the MixUp term, with every
        // stop-gradient quantity frozen at the base point
        let spec = ModelSpec::Mlp {
            input_dim: 4,
            hidden: vec![4],
            categories: 2,
        };
        let mut r = ChaCha8Rng::seed_from_u64(60);
        let probe = build_model(&spec, &mut r)?;
        let dim = probe.num_params();
        let mut fixture_rng = ChaCha8Rng::seed_from_u64(suite.rng.random());
        suite.graph(
            "loss/pu_mlc_frozen",
            dim,
            &mut |rng| uniform(rng, dim, -0.8, 0.8),
            &mut |_, at| {
                let labels = labels_with_positives(&mut fixture_rng, 4, 2, false);
                let feat_vals = uniform(&mut fixture_rng, 16, -1.0, 1.0);
                let features = Tensor::new(vec![4, 4], feat_vals).expect("features");
                let spec = spec.clone();
                // base-point pass fixing draws, targets, factors, and
                // temperatures
                let (draws, targets, pfs, taus) = {
                    let mut r = ChaCha8Rng::seed_from_u64(61);
                    let mut model = build_model(&spec, &mut r).expect("model");
                    set_params_from(&mut model, at).expect("load");
                    let mut tape = Tape::new();
                    let x = tape
                        .constant(vec![4, 4], features.values().to_vec())
                        .expect("x");
                    let (logits, _) = model.forward(&mut tape, x, true).expect("forward");
                    let view = BatchView::new(&tape, logits, &labels).expect("view");
                    let mut draw_rng = ChaCha8Rng::seed_from_u64(62);
                    let mut draws = Vec::new();
                    for cat in 0..2 {
                        if let Some(d) =
                            draw_mixup(&view, cat, 0.3, &mut draw_rng).expect("draw")
                        {
                            draws.push(d);
                        }
                    }
                    let targets = mixup_targets(&tape, &view, &draws).expect("targets");
                    let pfs: Vec<f64> = (0..2)
                        .map(|c| rebalance_factor(&tape, &view, c, 1.0))
                        .collect();
                    let taus: Vec<f64> = (0..2)
                        .map(|c| adaptive_temperature(&tape, &view, c, 1.0, 1e-3))
                        .collect();
                    (draws, targets, pfs, taus)
                };
                let features = features.clone();
                Box::new(move |tape: &mut Tape, coords: &[f64]| {
                    let mut r = ChaCha8Rng::seed_from_u64(61);
                    let mut model = build_model(&spec, &mut r)?;
                    set_params_from(&mut model, coords)?;
                    let x = tape.constant(vec![4, 4], features.values().to_vec())?;
                    let bound = model.bind_params(tape);
                    let logits = model.forward_bound(tape, x, &bound, true)?;
                    let view = BatchView::new(tape, logits, &labels)?;
                    let mut total: Option<TensorId> = None;
                    for cat in 0..2 {
                        let vt = var_loss_category(tape, &view, cat, pfs[cat], taus[cat])?;
                        total = Some(match total {
                            Some(t) => tape.add(t, vt.term)?,
                            None => vt.term,
                        });
                    }
                    let reg_terms = mixup_reg_terms_with_targets(
                        tape, &view, &features, &mut model, &bound, &draws, &targets,
                    )?;
                    for t in reg_terms {
                        let weighted = tape.scalar_mul(t, 1.0)?;
                        total = Some(tape.add(total.unwrap(), weighted)?);
                    }
                    Ok((total.unwrap(), bound))
                })
            },
        )?;
    }
    Ok(())
}
