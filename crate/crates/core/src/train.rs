//! Optimizers and the training loop binding model, losses, and data,
//! with full-state capture for deterministic checkpoint/resume.
//!
//! Determinism contract: everything random flows from one ChaCha8 stream
//! seeded by the config (model init, epoch shuffles, MixUp draws), batch
//! order and reduction order are fixed, so equal (config, dataset) pairs
//! produce bit-identical parameters and history.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{Dataset, MaskSetting, MaskSpec};
use crate::error::{Error, Result};
use crate::losses::{pn_bce_loss, pu_mlc_loss, BatchView, CategoryTerms, PuLossConfig};
use crate::metrics::evaluate;
use crate::nn::{build_model, Model, ModelSpec};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OptimizerSpec {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerSpec {
    /// Adam with the usual constants.
    pub fn default_adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "momentum must be in [0,1), got {momentum}"
                    )));
                }
            }
            Self::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "adam betas must be in [0,1), got ({beta1}, {beta2})"
                    )));
                }
                if !(epsilon > 0.0) || !epsilon.is_finite() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "adam epsilon must be finite and > 0, got {epsilon}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// First/second moment buffers per parameter tensor plus the shared step
/// counter; the whole state round-trips through checkpoints.
pub struct Optimizer {
    spec: OptimizerSpec,
    learning_rate: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, learning_rate: f64, param_sizes: &[usize]) -> Result<Self> {
        spec.validate()?;
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        let m = param_sizes.iter().map(|&s| vec![0.0; s]).collect();
        let v = match spec {
            OptimizerSpec::Sgd { .. } => Vec::new(),
            OptimizerSpec::Adam { .. } => param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        };
        Ok(Self {
            spec,
            learning_rate,
            step_count: 0,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step_count: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let sizes: Vec<usize> = self.m.iter().map(Vec::len).collect();
        let m_ok = m.len() == sizes.len() && m.iter().zip(&sizes).all(|(b, &s)| b.len() == s);
        let v_ok = match self.spec {
            OptimizerSpec::Sgd { .. } => v.is_empty(),
            OptimizerSpec::Adam { .. } => {
                v.len() == sizes.len() && v.iter().zip(&sizes).all(|(b, &s)| b.len() == s)
            }
        };
        if !m_ok || !v_ok {
            return Err(Error::InvalidArgument(
                "optimizer state does not match the model's parameter layout".into(),
            ));
        }
        self.step_count = step_count;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update over all parameters. Gradients arrive in `params()`
    /// order; reads and writes follow that same order.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) -> Result<()> {
        let mut params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} gradient sets for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        match self.spec {
            OptimizerSpec::Sgd { momentum } => {
                for (i, p) in params.iter_mut().enumerate() {
                    let g = &grads[i];
                    if g.len() != p.numel() {
                        return Err(Error::ShapeMismatch(alloc::format!(
                            "gradient {i} has {} values for {} parameters",
                            g.len(),
                            p.numel()
                        )));
                    }
                    let buf = &mut self.m[i];
                    for (k, value) in p.values_mut().iter_mut().enumerate() {
                        buf[k] = momentum * buf[k] + g[k];
                        *value -= self.learning_rate * buf[k];
                    }
                }
            }
            OptimizerSpec::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step_count as i32;
                let bias1 = 1.0 - crate::math::powf(beta1, t as f64);
                let bias2 = 1.0 - crate::math::powf(beta2, t as f64);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = &grads[i];
                    if g.len() != p.numel() {
                        return Err(Error::ShapeMismatch(alloc::format!(
                            "gradient {i} has {} values for {} parameters",
                            g.len(),
                            p.numel()
                        )));
                    }
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for (k, value) in p.values_mut().iter_mut().enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let m_hat = m[k] / bias1;
                        let v_hat = v[k] / bias2;
                        *value -= self.learning_rate * m_hat / (crate::math::sqrt(v_hat) + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Objective selector: the PU objective for positive-only training, or
/// plain BCE over known entries for the supervised baselines.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    #[default]
    PuMlc,
    PnBce,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub loss: PuLossConfig,
    pub mask: MaskSpec,
    pub model: ModelSpec,
    /// Evaluate on the held-out set every this many epochs; 0 disables.
    pub eval_every: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub loss_kind: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch_size must be >= 2; batch statistics over a singleton are degenerate".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        if !(self.mask.ratio > 0.0 && self.mask.ratio <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "mask ratio must be in (0,1], got {}",
                self.mask.ratio
            )));
        }
        Ok(())
    }
}

/// One epoch of the history table.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub mean_var: f64,
    pub mean_reg: f64,
    pub mean_tau: f64,
    pub mean_pfactor: f64,
    pub map: Option<f64>,
    pub of1: Option<f64>,
    pub cf1: Option<f64>,
}

/// ChaCha8 stream position, sufficient to resume generation exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training as if never interrupted.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
    pub optimizer_step: u64,
    pub optimizer_m: Vec<Vec<f64>>,
    pub optimizer_v: Vec<Vec<f64>>,
    pub rng: RngState,
}

pub struct TrainOutput {
    pub model: Model,
    /// Records for the epochs this call ran (resumes exclude the past).
    pub history: Vec<EpochRecord>,
}

fn capture_state(
    epoch: usize,
    model: &Model,
    optimizer: &Optimizer,
    rng: &ChaCha8Rng,
) -> TrainState {
    let (m, v) = optimizer.moments();
    TrainState {
        epoch,
        params: model.param_values(),
        buffers: model.buffer_values(),
        optimizer_step: optimizer.step_count(),
        optimizer_m: m.to_vec(),
        optimizer_v: v.to_vec(),
        rng: RngState::capture(rng),
    }
}

/// Trains from scratch. See [`train_from`] for resume and per-epoch
/// snapshot hooks.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    eval_set: Option<&Dataset>,
) -> Result<TrainOutput> {
    train_from(config, dataset, eval_set, None, &mut |_, _| Ok(()))
}

/// The full training loop. `resume` continues from a captured state as
/// if the run had never stopped; `on_epoch` sees the post-epoch state and
/// record (checkpoint writers hook in here).
///
/// The dataset must already carry the config's mask. Under the
/// positive-only setting every batch is asserted free of explicit
/// negatives. A non-finite loss aborts with the failing epoch, category,
/// and term in the error.
pub fn train_from(
    config: &TrainConfig,
    dataset: &Dataset,
    eval_set: Option<&Dataset>,
    resume: Option<&TrainState>,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    match dataset.mask {
        None => {
            return Err(Error::InvalidArgument(
                "dataset is unmasked; apply the configured mask first (FULL_PN keeps every label)"
                    .into(),
            ))
        }
        Some(m) if m != config.mask => {
            return Err(Error::InvalidArgument(alloc::format!(
                "dataset mask {m:?} differs from the configured mask {:?}",
                config.mask
            )))
        }
        Some(_) => {}
    }
    let n = dataset.n_samples();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least 2 samples".into(),
        ));
    }
    if config.eval_every > 0 && eval_set.is_none() {
        return Err(Error::InvalidArgument(
            "eval_every > 0 requires a held-out evaluation dataset".into(),
        ));
    }
    if config.model.categories() != dataset.n_categories() {
        return Err(Error::InvalidArgument(alloc::format!(
            "model emits {} categories, dataset has {}",
            config.model.categories(),
            dataset.n_categories()
        )));
    }

    let pu_setting = config.mask.setting == MaskSetting::PositiveOnly;
    let mut rng;
    let mut model;
    let mut optimizer;
    let start_epoch;
    match resume {
        None => {
            rng = ChaCha8Rng::seed_from_u64(config.seed);
            model = build_model(&config.model, &mut rng)?;
            let sizes: Vec<usize> = model.param_values().iter().map(Vec::len).collect();
            optimizer = Optimizer::new(config.optimizer, config.learning_rate, &sizes)?;
            start_epoch = 1;
        }
        Some(state) => {
            if state.epoch >= config.epochs {
                return Err(Error::InvalidArgument(alloc::format!(
                    "checkpoint already covers epoch {}, config stops at {}",
                    state.epoch,
                    config.epochs
                )));
            }
            // model geometry comes from the spec; the throwaway stream
            // only feeds the initializer that loading then overwrites
            let mut scratch = ChaCha8Rng::seed_from_u64(0);
            model = build_model(&config.model, &mut scratch)?;
            model.load_param_values(&state.params)?;
            model.load_buffer_values(&state.buffers)?;
            let sizes: Vec<usize> = model.param_values().iter().map(Vec::len).collect();
            optimizer = Optimizer::new(config.optimizer, config.learning_rate, &sizes)?;
            optimizer.restore(
                state.optimizer_step,
                state.optimizer_m.clone(),
                state.optimizer_v.clone(),
            )?;
            rng = state.rng.restore();
            start_epoch = state.epoch + 1;
        }
    }

    let mut history = Vec::with_capacity(config.epochs - (start_epoch - 1));
    for epoch in start_epoch..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sums = BatchSums::default();
        for chunk in order.chunks(config.batch_size) {
            // batch statistics need at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let feats = dataset.gather_features(chunk)?;
            let labels = dataset.labels.gather_rows(chunk)?;
            if pu_setting && labels.has_negatives() {
                return Err(Error::Label(alloc::format!(
                    "positive-only batch at epoch {epoch} contains explicit negatives"
                )));
            }
            let mut tape = Tape::new();
            let x = tape.constant(feats.shape().to_vec(), feats.values().to_vec())?;
            let bound = model.bind_params(&mut tape);
            let logits = model.forward_bound(&mut tape, x, &bound, true)?;
            let view = BatchView::new(&tape, logits, &labels)?;
            let (total, cats) = match config.loss_kind {
                LossKind::PuMlc => {
                    let breakdown = pu_mlc_loss(
                        &mut tape,
                        &view,
                        &feats,
                        &mut model,
                        &bound,
                        &config.loss,
                        &mut rng,
                    )
                    .map_err(|e| diverged(epoch, e))?;
                    (breakdown.total, Some(breakdown.categories))
                }
                LossKind::PnBce => {
                    let total = pn_bce_loss(&mut tape, &view).map_err(|e| diverged(epoch, e))?;
                    (total, None)
                }
            };
            let total_val = tape.scalar_value(total)?;
            tape.backward(total)?;
            let grads: Vec<Vec<f64>> = bound
                .iter()
                .map(|&id| tape.grad(id).map(<[f64]>::to_vec))
                .collect::<Result<_>>()?;
            optimizer.step(&mut model, &grads)?;
            sums.absorb(total_val, cats.as_deref());
        }
        let mut record = sums.into_record(epoch);
        if config.eval_every > 0 && epoch % config.eval_every == 0 {
            let report = evaluate(&mut model, eval_set.unwrap(), 0.5)?;
            record.map = Some(report.map);
            record.of1 = Some(report.of1);
            record.cf1 = Some(report.cf1);
        }
        let state = capture_state(epoch, &model, &optimizer, &rng);
        on_epoch(&state, &record)?;
        history.push(record);
    }
    Ok(TrainOutput { model, history })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => {
            Error::NonFinite(alloc::format!("loss diverged at epoch {epoch}: {msg}"))
        }
        Error::Domain(msg) => {
            Error::NonFinite(alloc::format!("loss diverged at epoch {epoch}: {msg}"))
        }
        other => other,
    }
}

#[derive(Default)]
struct BatchSums {
    batches: usize,
    total: f64,
    var: f64,
    reg: f64,
    tau: f64,
    pfactor: f64,
}

impl BatchSums {
    fn absorb(&mut self, total: f64, cats: Option<&[CategoryTerms]>) {
        self.batches += 1;
        self.total += total;
        match cats {
            Some(cats) => {
                let c = cats.len() as f64;
                self.var += cats.iter().map(|t| t.var_value).sum::<f64>() / c;
                self.reg += cats.iter().map(|t| t.reg_value).sum::<f64>() / c;
                self.tau += cats.iter().map(|t| t.tau).sum::<f64>() / c;
                self.pfactor += cats.iter().map(|t| t.p_factor).sum::<f64>() / c;
            }
            // supervised baseline: the whole loss is one term
            None => {
                self.var += total;
                self.tau += 1.0;
                self.pfactor += 1.0;
            }
        }
    }

    fn into_record(self, epoch: usize) -> EpochRecord {
        let b = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            total_loss: self.total / b,
            mean_var: self.var / b,
            mean_reg: self.reg / b,
            mean_tau: self.tau / b,
            mean_pfactor: self.pfactor / b,
            map: None,
            of1: None,
            cf1: None,
        }
    }
}

/// Sweep cell outcome: the evaluation numbers, or the error text for
/// cells that failed (the sweep continues past failures).
pub struct SweepCell {
    pub gamma: f64,
    pub alpha: f64,
    pub ratio: f64,
    pub seed: u64,
    pub map: Option<f64>,
    pub of1: Option<f64>,
    pub cf1: Option<f64>,
    pub error: Option<String>,
}

/// Grid sweep over (gamma, alpha, ratio, seed) in deterministic
/// lexicographic order. Each cell re-masks the base dataset at the cell's
/// ratio and seed, trains, and evaluates on the held-out set.
pub fn sweep(
    base: &TrainConfig,
    dataset_full: &Dataset,
    eval_set: &Dataset,
    gammas: &[f64],
    alphas: &[f64],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    if gammas.is_empty() || alphas.is_empty() || ratios.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep grid axes must be non-empty".into(),
        ));
    }
    if dataset_full.mask.is_some() {
        return Err(Error::InvalidArgument(
            "sweep needs the unmasked dataset; cells apply their own masks".into(),
        ));
    }
    let mut cells = Vec::new();
    for &gamma in gammas {
        for &alpha in alphas {
            for &ratio in ratios {
                for &seed in seeds {
                    let cell = run_cell(base, dataset_full, eval_set, gamma, alpha, ratio, seed);
                    cells.push(match cell {
                        Ok(c) => c,
                        Err(e) => SweepCell {
                            gamma,
                            alpha,
                            ratio,
                            seed,
                            map: None,
                            of1: None,
                            cf1: None,
                            error: Some(alloc::format!("{e}")),
                        },
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn run_cell(
    base: &TrainConfig,
    dataset_full: &Dataset,
    eval_set: &Dataset,
    gamma: f64,
    alpha: f64,
    ratio: f64,
    seed: u64,
) -> Result<SweepCell> {
    let mask = MaskSpec::new(base.mask.setting, ratio, seed)?;
    let mut config = base.clone();
    config.loss.gamma = gamma;
    config.loss.alpha = alpha;
    config.mask = mask;
    config.seed = seed;
    let masked = crate::datasets::apply_mask(dataset_full, &mask)?;
    let out = train(&config, &masked, Some(eval_set))?;
    let report = evaluate(
        &mut { out.model },
        eval_set,
        0.5,
    )?;
    Ok(SweepCell {
        gamma,
        alpha,
        ratio,
        seed,
        map: Some(report.map),
        of1: Some(report.of1),
        cf1: Some(report.cf1),
        error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{apply_mask, generate_synthetic_vectors, MaskSetting};
    use crate::losses::TemperatureMode;

    fn tiny_dataset(seed: u64) -> Dataset {
        generate_synthetic_vectors(24, 6, 3, seed, 2.0).unwrap()
    }

    fn pu_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-2,
            optimizer: OptimizerSpec::default_adam(),
            seed,
            loss: PuLossConfig::default(),
            mask: MaskSpec::new(MaskSetting::PositiveOnly, 0.5, 7).unwrap(),
            model: ModelSpec::Mlp {
                input_dim: 6,
                hidden: vec![8],
                categories: 3,
            },
            eval_every: 0,
            loss_kind: LossKind::PuMlc,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        for optimizer in [
            OptimizerSpec::Sgd { momentum: 0.9 },
            OptimizerSpec::default_adam(),
        ] {
            let full = tiny_dataset(1);
            let mut config = pu_config(1);
            config.learning_rate = 0.0;
            config.optimizer = optimizer;
            let masked = apply_mask(&full, &config.mask).unwrap();
            let out = train(&config, &masked, None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let fresh = build_model(&config.model, &mut rng).unwrap();
            assert_eq!(out.model.param_values(), fresh.param_values());
        }
    }

    #[test]
    fn identical_config_and_seed_reproduce_bitwise() {
        let full = tiny_dataset(2);
        let config = pu_config(2);
        let masked = apply_mask(&full, &config.mask).unwrap();
        let a = train(&config, &masked, None).unwrap();
        let b = train(&config, &masked, None).unwrap();
        let pa = a.model.param_values();
        let pb = b.model.param_values();
        for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let full = tiny_dataset(3);
        let mut config = pu_config(3);
        config.epochs = 4;
        let masked = apply_mask(&full, &config.mask).unwrap();
        let uninterrupted = train(&config, &masked, None).unwrap();

        let mut snapshot = None;
        train_from(&config, &masked, None, None, &mut |state, _| {
            if state.epoch == 2 {
                snapshot = Some(state.clone());
            }
            Ok(())
        })
        .unwrap();
        let resumed = train_from(
            &config,
            &masked,
            None,
            snapshot.as_ref(),
            &mut |_, _| Ok(()),
        )
        .unwrap();
        let pa = uninterrupted.model.param_values();
        let pb = resumed.model.param_values();
        for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(&uninterrupted.history[2..], &resumed.history[..]);
    }

    #[test]
    fn training_reduces_the_loss() {
        let full = tiny_dataset(4);
        let mut config = pu_config(4);
        config.epochs = 20;
        let masked = apply_mask(&full, &config.mask).unwrap();
        let out = train(&config, &masked, None).unwrap();
        let first = out.history.first().unwrap().total_loss;
        let last = out.history.last().unwrap().total_loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn positive_only_batches_reject_explicit_negatives() {
        let full = tiny_dataset(5);
        let config = pu_config(5);
        // forge a dataset that claims the PU mask but kept a negative
        let mut broken = apply_mask(&full, &config.mask).unwrap();
        let mut entries = Vec::new();
        for i in 0..broken.labels.n_samples() {
            for c in 0..broken.labels.n_categories() {
                entries.push(broken.labels.get(i, c));
            }
        }
        entries[0] = -1;
        broken.labels = crate::datasets::LabelMatrix::new(
            broken.labels.n_samples(),
            broken.labels.n_categories(),
            entries,
        )
        .unwrap();
        let err = match train(&config, &broken, None) {
            Err(e) => e,
            Ok(_) => panic!("forged negative labels were accepted"),
        };
        assert!(alloc::format!("{err}").contains("negatives"));
    }

    #[test]
    fn unmasked_or_mismatched_dataset_is_rejected() {
        let full = tiny_dataset(6);
        let config = pu_config(6);
        assert!(train(&config, &full, None).is_err());
        let other_mask = MaskSpec::new(MaskSetting::PositiveOnly, 0.25, 7).unwrap();
        let masked = apply_mask(&full, &other_mask).unwrap();
        assert!(train(&config, &masked, None).is_err());
    }

    #[test]
    fn divergence_reports_epoch_and_term() {
        let full = tiny_dataset(7);
        let mut config = pu_config(7);
        config.learning_rate = 1e6;
        config.optimizer = OptimizerSpec::Sgd { momentum: 0.0 };
        config.epochs = 10;
        config.loss.temperature = TemperatureMode::Off;
        let masked = apply_mask(&full, &config.mask).unwrap();
        let err = match train(&config, &masked, None) {
            Err(e) => e,
            Ok(_) => panic!("expected the run to diverge"),
        };
        let msg = alloc::format!("{err}");
        assert!(msg.contains("epoch"), "unexpected error: {msg}");
    }

    #[test]
    fn eval_epochs_fill_metric_columns() {
        let full = tiny_dataset(8);
        let mut config = pu_config(8);
        config.epochs = 4;
        config.eval_every = 2;
        let masked = apply_mask(&full, &config.mask).unwrap();
        let eval_set = tiny_dataset(80);
        let out = train(&config, &masked, Some(&eval_set)).unwrap();
        for record in &out.history {
            if record.epoch % 2 == 0 {
                assert!(record.map.is_some());
            } else {
                assert!(record.map.is_none());
            }
        }
    }

    #[test]
    fn supervised_baseline_trains_on_full_labels() {
        let full = tiny_dataset(9);
        let mut config = pu_config(9);
        config.loss_kind = LossKind::PnBce;
        config.mask = MaskSpec::new(MaskSetting::FullPn, 1.0, 7).unwrap();
        config.epochs = 20;
        let masked = apply_mask(&full, &config.mask).unwrap();
        let out = train(&config, &masked, None).unwrap();
        let first = out.history.first().unwrap().total_loss;
        let last = out.history.last().unwrap().total_loss;
        assert!(last < first);
    }

    #[test]
    fn singleton_sweep_grid_matches_direct_run() {
        let full = tiny_dataset(10);
        let eval_set = tiny_dataset(100);
        let base = pu_config(10);
        let cells = sweep(
            &base,
            &full,
            &eval_set,
            &[base.loss.gamma],
            &[base.loss.alpha],
            &[0.5],
            &[7],
        )
        .unwrap();
        assert_eq!(cells.len(), 1);
        let cell = &cells[0];
        assert!(cell.error.is_none());

        let mask = MaskSpec::new(base.mask.setting, 0.5, 7).unwrap();
        let mut config = base.clone();
        config.mask = mask;
        config.seed = 7;
        let masked = apply_mask(&full, &mask).unwrap();
        let out = train(&config, &masked, Some(&eval_set)).unwrap();
        let report = evaluate(&mut { out.model }, &eval_set, 0.5).unwrap();
        assert_eq!(cell.map, Some(report.map));
    }

    #[test]
    fn sweep_records_cell_failures_and_continues() {
        let full = tiny_dataset(11);
        let eval_set = tiny_dataset(110);
        let base = pu_config(11);
        // gamma -1 fails config validation inside its cell only
        let cells = sweep(&base, &full, &eval_set, &[-1.0, 0.0], &[1.0], &[0.5], &[7]).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells[0].error.is_some());
        assert!(cells[1].error.is_none());
    }

    #[test]
    fn grid_order_is_lexicographic_and_complete() {
        let full = tiny_dataset(12);
        let eval_set = tiny_dataset(120);
        let mut base = pu_config(12);
        base.epochs = 1;
        let cells = sweep(
            &base,
            &full,
            &eval_set,
            &[0.0, 0.5, 1.0],
            &[1.0],
            &[0.1, 0.5],
            &[7],
        )
        .unwrap();
        assert_eq!(cells.len(), 6);
        let got: Vec<(f64, f64)> = cells.iter().map(|c| (c.gamma, c.ratio)).collect();
        assert_eq!(
            got,
            vec![
                (0.0, 0.1),
                (0.0, 0.5),
                (0.5, 0.1),
                (0.5, 0.5),
                (1.0, 0.1),
                (1.0, 0.5)
            ]
        );
    }

    #[test]
    fn rng_state_round_trip_preserves_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let _: [u64; 5] = core::array::from_fn(|_| rand::Rng::random(&mut rng));
        let state = RngState::capture(&rng);
        let expect: [u64; 8] = core::array::from_fn(|_| rand::Rng::random(&mut rng));
        let mut restored = state.restore();
        let got: [u64; 8] = core::array::from_fn(|_| rand::Rng::random(&mut restored));
        assert_eq!(expect, got);
    }
}
