//! Loss functions: supervised baselines, prior-based PU risks, and the
//! prior-free variational PU objective with re-balancing, adaptive
//! temperature, and MixUp consistency regularization.
//!
//! Conventions shared by every loss here: logits live on the tape as an
//! `[N, C]` node; per-category positive sets come from the label matrix;
//! the unlabeled set of a category is the ENTIRE batch, positives
//! included. The re-balance factor and the temperature are computed from
//! raw tape values and enter the graph as plain constants, so no gradient
//! flows through either.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::datasets::LabelMatrix;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Model;
use crate::tensor::{Tape, Tensor, TensorId};

/// How the per-category logit divisor is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", rename_all = "snake_case"))]
pub enum TemperatureMode {
    /// `clamp(alpha * population_std(logits), tau_floor, 1)` per batch.
    Adaptive,
    /// Constant divisor in `(0, 1]`.
    Fixed { tau: f64 },
    /// No scaling; identical to `Fixed { tau: 1.0 }`.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PuLossConfig {
    /// Re-balance exponent; 0 disables re-weighting.
    pub gamma: f64,
    /// Temperature scale on the batch logit spread.
    pub alpha: f64,
    /// Lower clamp for the temperature; keeps the divisor positive when a
    /// batch's logits are constant.
    pub tau_floor: f64,
    /// Weight of the MixUp consistency term; 0 disables it.
    pub lambda: f64,
    /// Beta(b, b) parameter for MixUp interpolation draws.
    pub mix_beta: f64,
    pub temperature: TemperatureMode,
}

impl Default for PuLossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha: 1.0,
            tau_floor: 1e-3,
            lambda: 1.0,
            mix_beta: 0.3,
            temperature: TemperatureMode::Adaptive,
        }
    }
}

impl PuLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if !(self.tau_floor > 0.0 && self.tau_floor <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "tau_floor must be in (0,1], got {}",
                self.tau_floor
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.mix_beta > 0.0) || !self.mix_beta.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "mix_beta must be finite and > 0, got {}",
                self.mix_beta
            )));
        }
        if let TemperatureMode::Fixed { tau } = self.temperature {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "fixed temperature must be in (0,1], got {tau}"
                )));
            }
        }
        Ok(())
    }
}

/// One batch as the losses see it: logits on the tape plus the label
/// matrix that defines per-category positive/negative index sets. The
/// unlabeled set of every category is the whole batch.
pub struct BatchView<'a> {
    pub logits: TensorId,
    pub labels: &'a LabelMatrix,
}

impl<'a> BatchView<'a> {
    pub fn new(tape: &Tape, logits: TensorId, labels: &'a LabelMatrix) -> Result<Self> {
        let shape = tape.shape(logits);
        if shape != [labels.n_samples(), labels.n_categories()] {
            return Err(Error::ShapeMismatch(alloc::format!(
                "logits {shape:?} do not match labels {}x{}",
                labels.n_samples(),
                labels.n_categories()
            )));
        }
        Ok(Self { logits, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.n_samples()
    }

    pub fn n_categories(&self) -> usize {
        self.labels.n_categories()
    }

    pub fn positives(&self, category: usize) -> Vec<usize> {
        self.labels.indices_where(category, 1)
    }

    pub fn negatives(&self, category: usize) -> Vec<usize> {
        self.labels.indices_where(category, -1)
    }
}

// names the failing category and term in numeric errors so training
// aborts carry actionable diagnostics
fn term_context(category: usize, term: &str, e: Error) -> Error {
    let place = if category == usize::MAX {
        alloc::format!("{term} term")
    } else {
        alloc::format!("category {category} {term} term")
    };
    match e {
        Error::NonFinite(msg) => Error::NonFinite(alloc::format!("{place}: {msg}")),
        Error::Domain(msg) => Error::Domain(alloc::format!("{place}: {msg}")),
        other => other,
    }
}

fn add_acc(tape: &mut Tape, acc: Option<TensorId>, term: TensorId) -> Result<Option<TensorId>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    }))
}

/// Supervised binary cross-entropy over all known entries, averaged by
/// the full `C * N` entry count. Unknown (0) entries contribute nothing,
/// so partially labeled baselines use the same function. Returns a
/// gradient-free zero if no entry is known.
pub fn pn_bce_loss(tape: &mut Tape, view: &BatchView) -> Result<TensorId> {
    let n = view.n_samples();
    let c = view.n_categories();
    let mut acc: Option<TensorId> = None;
    for cat in 0..c {
        let col = tape.select_column(view.logits, cat)?;
        let pos = view.positives(cat);
        if !pos.is_empty() {
            let gp = tape.gather(col, &pos)?;
            let lp = tape.log_sigmoid(gp)?;
            let sp = tape.sum_all(lp)?;
            acc = add_acc(tape, acc, sp)?;
        }
        let negs = view.negatives(cat);
        if !negs.is_empty() {
            let gn = tape.gather(col, &negs)?;
            let flipped = tape.neg(gn)?;
            let ln = tape.log_sigmoid(flipped)?;
            let sn = tape.sum_all(ln)?;
            acc = add_acc(tape, acc, sn)?;
        }
    }
    match acc {
        Some(a) => {
            let total = tape.neg(a)?;
            tape.scalar_mul(total, 1.0 / (c as f64 * n as f64))
        }
        None => Ok(tape.constant_scalar(0.0)),
    }
}

fn check_prior(prior: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&prior) || !prior.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!(
            "class prior must be in [0,1], got {prior}"
        )));
    }
    Ok(())
}

/// Prior-weighted supervised risk from separate positive and negative
/// logit sets: `prior * mean(-log sig(p)) + (1-prior) * mean(-log sig(-n))`.
pub fn pn_risk(
    tape: &mut Tape,
    logits_p: TensorId,
    logits_n: TensorId,
    prior: f64,
) -> Result<TensorId> {
    check_prior(prior)?;
    let lp = tape.log_sigmoid(logits_p)?;
    let mp = tape.mean_all(lp)?;
    let pos_term = tape.scalar_mul(mp, -prior)?;
    let flipped = tape.neg(logits_n)?;
    let ln = tape.log_sigmoid(flipped)?;
    let mn = tape.mean_all(ln)?;
    let neg_term = tape.scalar_mul(mn, -(1.0 - prior))?;
    tape.add(pos_term, neg_term)
}

/// Unbiased PU risk: the unlabeled set stands in for the negative
/// expectation, with the positive contamination subtracted out:
/// `prior * mean_P(-log sig(s)) - prior * mean_P(-log sig(-s))
///  + mean_U(-log sig(-s))`. No non-negativity correction is applied.
pub fn upu_risk(
    tape: &mut Tape,
    logits_p: TensorId,
    logits_u: TensorId,
    prior: f64,
) -> Result<TensorId> {
    check_prior(prior)?;
    let lp = tape.log_sigmoid(logits_p)?;
    let mp = tape.mean_all(lp)?;
    let t1 = tape.scalar_mul(mp, -prior)?;
    let flipped_p = tape.neg(logits_p)?;
    let lnp = tape.log_sigmoid(flipped_p)?;
    let mnp = tape.mean_all(lnp)?;
    let t2 = tape.scalar_mul(mnp, prior)?;
    let flipped_u = tape.neg(logits_u)?;
    let lnu = tape.log_sigmoid(flipped_u)?;
    let mnu = tape.mean_all(lnu)?;
    let t3 = tape.scalar_mul(mnu, -1.0)?;
    let t12 = tape.add(t1, t2)?;
    tape.add(t12, t3)
}

/// One category's variational term with the positive-term flag.
pub struct VarTerm {
    pub term: TensorId,
    /// False when the batch held no positive for this category and the
    /// positive expectation was skipped.
    pub positive_term_present: bool,
}

/// Variational PU term for one category:
/// `p_factor * log(mean_U sig(s/tau)) - mean_P log sig(s/tau)`.
///
/// `p_factor` and `tau` are plain constants; the unlabeled mean runs over
/// the whole batch. A batch with no positives for the category keeps only
/// the unlabeled term.
pub fn var_loss_category(
    tape: &mut Tape,
    view: &BatchView,
    category: usize,
    p_factor: f64,
    tau: f64,
) -> Result<VarTerm> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "temperature must be in (0,1], got {tau}"
        )));
    }
    if !p_factor.is_finite() || p_factor < 0.0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "re-balance factor must be finite and >= 0, got {p_factor}"
        )));
    }
    if category >= view.n_categories() {
        return Err(Error::InvalidArgument(alloc::format!(
            "category {category} out of range for {}",
            view.n_categories()
        )));
    }
    let col = tape.select_column(view.logits, category)?;
    let scaled = tape.scalar_mul(col, 1.0 / tau)?;
    let sig_u = tape.sigmoid(scaled)?;
    let mean_u = tape.mean_all(sig_u)?;
    let log_mean_u = tape.log(mean_u)?;
    let unlabeled_term = tape.scalar_mul(log_mean_u, p_factor)?;
    let pos = view.positives(category);
    if pos.is_empty() {
        return Ok(VarTerm {
            term: unlabeled_term,
            positive_term_present: false,
        });
    }
    let gp = tape.gather(scaled, &pos)?;
    let lp = tape.log_sigmoid(gp)?;
    let mean_p = tape.mean_all(lp)?;
    let term = tape.sub(unlabeled_term, mean_p)?;
    Ok(VarTerm {
        term,
        positive_term_present: true,
    })
}

/// Re-balance factor `p_c^gamma` where `p_c` is the batch mean predicted
/// probability of the category over the unlabeled set (the whole batch),
/// from raw logits without temperature. Returned as a constant: no
/// gradient flows through it.
pub fn rebalance_factor(tape: &Tape, view: &BatchView, category: usize, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 1.0;
    }
    let vals = tape.values(view.logits);
    let n = view.n_samples();
    let c = view.n_categories();
    let mut acc = 0.0;
    for i in 0..n {
        acc += math::sigmoid(vals[i * c + category]);
    }
    let p = acc / n as f64;
    math::powf(p, gamma)
}

/// Adaptive temperature `clamp(alpha * std, tau_floor, 1)` where `std` is
/// the population standard deviation of the category's logits over the
/// batch. Returned as a constant: no gradient flows through it.
pub fn adaptive_temperature(
    tape: &Tape,
    view: &BatchView,
    category: usize,
    alpha: f64,
    tau_floor: f64,
) -> f64 {
    let vals = tape.values(view.logits);
    let n = view.n_samples();
    let c = view.n_categories();
    let mut mean = 0.0;
    for i in 0..n {
        mean += vals[i * c + category];
    }
    mean /= n as f64;
    let mut var = 0.0;
    for i in 0..n {
        let d = vals[i * c + category] - mean;
        var += d * d;
    }
    let std = math::sqrt(var / n as f64);
    (alpha * std).clamp(tau_floor, 1.0)
}

/// Temperature for one category under the configured mode.
pub fn resolve_temperature(
    cfg: &PuLossConfig,
    tape: &Tape,
    view: &BatchView,
    category: usize,
) -> f64 {
    match cfg.temperature {
        TemperatureMode::Adaptive => {
            adaptive_temperature(tape, view, category, cfg.alpha, cfg.tau_floor)
        }
        TemperatureMode::Fixed { tau } => tau,
        TemperatureMode::Off => 1.0,
    }
}

/// One MixUp interpolation: blend a positive sample with an unlabeled one
/// (any batch member) at weight `mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupDraw {
    pub category: usize,
    pub mu: f64,
    pub positive_index: usize,
    pub unlabeled_index: usize,
}

/// Draw the MixUp pair for a category, or `None` when the batch has no
/// positive for it.
pub fn draw_mixup(
    view: &BatchView,
    category: usize,
    mix_beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<MixupDraw>> {
    let pos = view.positives(category);
    if pos.is_empty() {
        return Ok(None);
    }
    let beta = Beta::new(mix_beta, mix_beta).map_err(|e| {
        Error::InvalidArgument(alloc::format!("invalid mixup beta {mix_beta}: {e}"))
    })?;
    let positive_index = pos[rng.random_range(0..pos.len())];
    let unlabeled_index = rng.random_range(0..view.n_samples());
    let mu = beta.sample(rng);
    Ok(Some(MixupDraw {
        category,
        mu,
        positive_index,
        unlabeled_index,
    }))
}

fn check_draws(view: &BatchView, draws: &[MixupDraw]) -> Result<()> {
    let n = view.n_samples();
    let c = view.n_categories();
    for d in draws {
        if d.positive_index >= n || d.unlabeled_index >= n || d.category >= c {
            return Err(Error::InvalidArgument(
                "mixup draw indexes outside the batch".into(),
            ));
        }
        if !(0.0..=1.0).contains(&d.mu) {
            return Err(Error::InvalidArgument(alloc::format!(
                "mixup weight must be in [0,1], got {}",
                d.mu
            )));
        }
    }
    Ok(())
}

/// Interpolated log-probability targets for a set of draws, read from the
/// main pass's logit values: `mu * log sig(s_p) + (1-mu) * log sig(s_u)`.
/// Plain constants, so no gradient flows into the targets.
pub fn mixup_targets(tape: &Tape, view: &BatchView, draws: &[MixupDraw]) -> Result<Vec<f64>> {
    check_draws(view, draws)?;
    let c = view.n_categories();
    let vals = tape.values(view.logits);
    Ok(draws
        .iter()
        .map(|d| {
            let sp = vals[d.positive_index * c + d.category];
            let su = vals[d.unlabeled_index * c + d.category];
            d.mu * math::log_sigmoid(sp) + (1.0 - d.mu) * math::log_sigmoid(su)
        })
        .collect())
}

/// Consistency terms for a set of MixUp draws, sharing one extra forward
/// pass through the model.
///
/// For each draw: the blended input `mu * x_p + (1-mu) * x_u` runs through
/// the model on the same parameter binding as the main pass; the target
/// `mu * log sig(s_p) + (1-mu) * log sig(s_u)` is a constant built from
/// the main pass's logit values; the term is the squared gap between the
/// blended input's log-probability and that target. Gradients flow only
/// through the blended forward pass.
pub fn mixup_reg_terms(
    tape: &mut Tape,
    view: &BatchView,
    features: &Tensor,
    model: &mut Model,
    bound: &[TensorId],
    draws: &[MixupDraw],
) -> Result<Vec<TensorId>> {
    let targets = mixup_targets(tape, view, draws)?;
    mixup_reg_terms_with_targets(tape, view, features, model, bound, draws, &targets)
}

/// [`mixup_reg_terms`] with caller-supplied targets. Gradient checking
/// uses this to hold the targets at their base-point values while the
/// parameters are perturbed, which is exactly the function the backward
/// pass differentiates.
pub fn mixup_reg_terms_with_targets(
    tape: &mut Tape,
    view: &BatchView,
    features: &Tensor,
    model: &mut Model,
    bound: &[TensorId],
    draws: &[MixupDraw],
    targets: &[f64],
) -> Result<Vec<TensorId>> {
    if draws.is_empty() {
        return Ok(Vec::new());
    }
    check_draws(view, draws)?;
    if targets.len() != draws.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} targets for {} draws",
            targets.len(),
            draws.len()
        )));
    }
    let n = view.n_samples();
    if features.shape()[0] != n {
        return Err(Error::ShapeMismatch(alloc::format!(
            "features hold {} samples, batch has {n}",
            features.shape()[0]
        )));
    }
    let row: usize = features.shape()[1..].iter().product();
    let mut mixed = Vec::with_capacity(draws.len() * row);
    for d in draws {
        let xp = &features.values()[d.positive_index * row..(d.positive_index + 1) * row];
        let xu = &features.values()[d.unlabeled_index * row..(d.unlabeled_index + 1) * row];
        for (a, b) in xp.iter().zip(xu) {
            mixed.push(d.mu * a + (1.0 - d.mu) * b);
        }
    }
    let mut shape = features.shape().to_vec();
    shape[0] = draws.len();
    let mixed_x = tape.constant(shape, mixed)?;
    let mixed_logits = model.forward_bound(tape, mixed_x, bound, true)?;
    let mut terms = Vec::with_capacity(draws.len());
    for (k, d) in draws.iter().enumerate() {
        let col = tape.select_column(mixed_logits, d.category)?;
        let s = tape.gather(col, &[k])?;
        let ls = tape.log_sigmoid(s)?;
        let t = tape.constant(vec![1], vec![targets[k]])?;
        let diff = tape.sub(ls, t)?;
        let sq = tape.mul(diff, diff)?;
        terms.push(tape.mean_all(sq)?);
    }
    Ok(terms)
}

/// MixUp consistency term for one category; `None` when the batch has no
/// positive for it.
pub fn mixup_reg_category(
    tape: &mut Tape,
    view: &BatchView,
    features: &Tensor,
    model: &mut Model,
    bound: &[TensorId],
    category: usize,
    mix_beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<TensorId>> {
    match draw_mixup(view, category, mix_beta, rng)? {
        None => Ok(None),
        Some(d) => {
            let terms = mixup_reg_terms(tape, view, features, model, bound, &[d])?;
            Ok(Some(terms[0]))
        }
    }
}

/// Per-category record of the assembled loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryTerms {
    pub var_value: f64,
    pub reg_value: f64,
    pub p_factor: f64,
    pub tau: f64,
    /// False when the positive expectation was skipped (no positive in
    /// the batch for this category).
    pub positive_term_present: bool,
    /// False when no MixUp term contributed (lambda 0 or no positive).
    pub reg_present: bool,
}

/// The assembled objective: `total` is a scalar on the tape, the record
/// carries per-category values for logging.
pub struct LossBreakdown {
    pub total: TensorId,
    pub categories: Vec<CategoryTerms>,
}

impl LossBreakdown {
    pub fn mean_var(&self) -> f64 {
        mean_of(self.categories.iter().map(|t| t.var_value))
    }

    pub fn mean_reg(&self) -> f64 {
        mean_of(self.categories.iter().map(|t| t.reg_value))
    }

    pub fn mean_tau(&self) -> f64 {
        mean_of(self.categories.iter().map(|t| t.tau))
    }

    pub fn mean_p_factor(&self) -> f64 {
        mean_of(self.categories.iter().map(|t| t.p_factor))
    }
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in it {
        sum += v;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Full objective: for each category, the variational term weighted by
/// the re-balance factor at the configured temperature, plus `lambda`
/// times the MixUp consistency term. `total = sum_c(var_c + lambda*reg_c)`.
///
/// MixUp draws consume `rng` only when `lambda > 0`; all draws share one
/// extra forward pass on the same parameter binding as the main pass.
#[allow(clippy::too_many_arguments)]
pub fn pu_mlc_loss(
    tape: &mut Tape,
    view: &BatchView,
    features: &Tensor,
    model: &mut Model,
    bound: &[TensorId],
    cfg: &PuLossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let c = view.n_categories();
    let mut categories = Vec::with_capacity(c);
    let mut var_terms = Vec::with_capacity(c);
    for cat in 0..c {
        let tau = resolve_temperature(cfg, tape, view, cat);
        let p_factor = rebalance_factor(tape, view, cat, cfg.gamma);
        let vt = var_loss_category(tape, view, cat, p_factor, tau)
            .map_err(|e| term_context(cat, "variational", e))?;
        categories.push(CategoryTerms {
            var_value: tape.scalar_value(vt.term)?,
            reg_value: 0.0,
            p_factor,
            tau,
            positive_term_present: vt.positive_term_present,
            reg_present: false,
        });
        var_terms.push(vt.term);
    }

    let mut reg_terms: Vec<Option<TensorId>> = vec![None; c];
    if cfg.lambda > 0.0 {
        let mut draws = Vec::new();
        for cat in 0..c {
            if let Some(d) = draw_mixup(view, cat, cfg.mix_beta, rng)? {
                draws.push(d);
            }
        }
        let terms = mixup_reg_terms(tape, view, features, model, bound, &draws)
            .map_err(|e| term_context(usize::MAX, "consistency", e))?;
        for (d, t) in draws.iter().zip(terms) {
            reg_terms[d.category] = Some(t);
            categories[d.category].reg_value = tape.scalar_value(t)?;
            categories[d.category].reg_present = true;
        }
    }

    let mut total: Option<TensorId> = None;
    for cat in 0..c {
        total = add_acc(tape, total, var_terms[cat])?;
        if let Some(rt) = reg_terms[cat] {
            let weighted = tape.scalar_mul(rt, cfg.lambda)?;
            total = add_acc(tape, total, weighted)?;
        }
    }
    let total = total.expect("at least one category");
    Ok(LossBreakdown { total, categories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelSpec};
    use rand::SeedableRng;

    fn logits_on_tape(tape: &mut Tape, n: usize, c: usize, values: Vec<f64>) -> TensorId {
        let t = Tensor::new(vec![n, c], values).unwrap().with_grad();
        tape.leaf(&t)
    }

    fn labels(n: usize, c: usize, entries: Vec<i8>) -> LabelMatrix {
        LabelMatrix::new(n, c, entries).unwrap()
    }

    fn random_case(seed: u64, n: usize, c: usize) -> (Vec<f64>, Vec<i8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let entries: Vec<i8> = (0..n * c)
            .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 1 } else { -1 })
            .collect();
        (logits, entries)
    }

    #[test]
    fn bce_single_positive_entry_at_zero_logit() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 1, 1, vec![0.0]);
        let lm = labels(1, 1, vec![1]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let loss = pn_bce_loss(&mut tape, &view).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bce_vanishes_for_confident_correct_logits() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 2, 2, vec![40.0, -40.0, 40.0, -40.0]);
        let lm = labels(2, 2, vec![1, -1, 1, -1]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let loss = pn_bce_loss(&mut tape, &view).unwrap();
        assert!(tape.scalar_value(loss).unwrap().abs() < 1e-12);
    }

    #[test]
    fn bce_matches_scalar_loop_on_random_batches() {
        for seed in 0..10u64 {
            let (lv, entries) = random_case(seed, 4, 3);
            let mut tape = Tape::new();
            let logits = logits_on_tape(&mut tape, 4, 3, lv.clone());
            let lm = labels(4, 3, entries.clone());
            let view = BatchView::new(&tape, logits, &lm).unwrap();
            let loss = pn_bce_loss(&mut tape, &view).unwrap();
            let mut expect = 0.0;
            for i in 0..4 {
                for j in 0..3 {
                    let s = lv[i * 3 + j];
                    match entries[i * 3 + j] {
                        1 => expect -= math::log_sigmoid(s),
                        -1 => expect -= math::log_sigmoid(-s),
                        _ => {}
                    }
                }
            }
            expect /= 12.0;
            assert!((tape.scalar_value(loss).unwrap() - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn bce_ignores_unknown_entries() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 2, 1, vec![3.0, 0.0]);
        let lm = labels(2, 1, vec![0, 1]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let loss = pn_bce_loss(&mut tape, &view).unwrap();
        // only the known +1 at logit 0 counts, over C*N = 2 entries
        assert!((tape.scalar_value(loss).unwrap() - 0.693147 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn pn_risk_symmetry_at_zero_logits() {
        for prior in [0.1, 0.5, 0.9] {
            let mut tape = Tape::new();
            let p = tape.constant(vec![3], vec![0.0; 3]).unwrap();
            let n = tape.constant(vec![4], vec![0.0; 4]).unwrap();
            let r = pn_risk(&mut tape, p, n, prior).unwrap();
            assert!((tape.scalar_value(r).unwrap() - 0.693147).abs() < 1e-6);
        }
    }

    #[test]
    fn pn_risk_boundary_prior_keeps_single_term() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![2], vec![1.0, -1.0]).unwrap();
        let n = tape.constant(vec![2], vec![5.0, 5.0]).unwrap();
        let r = pn_risk(&mut tape, p, n, 1.0).unwrap();
        let expect = -(math::log_sigmoid(1.0) + math::log_sigmoid(-1.0)) / 2.0;
        assert!((tape.scalar_value(r).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn upu_risk_collapses_at_zero_logits() {
        for prior in [0.1, 0.3, 0.9] {
            let mut tape = Tape::new();
            let p = tape.constant(vec![5], vec![0.0; 5]).unwrap();
            let u = tape.constant(vec![7], vec![0.0; 7]).unwrap();
            let r = upu_risk(&mut tape, p, u, prior).unwrap();
            assert!((tape.scalar_value(r).unwrap() - 0.693147).abs() < 1e-6);
        }
    }

    #[test]
    fn upu_risk_matches_scalar_loop() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let uv: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let prior = 0.3;
            let mut tape = Tape::new();
            let p = tape.constant(vec![6], pv.clone()).unwrap();
            let u = tape.constant(vec![9], uv.clone()).unwrap();
            let r = upu_risk(&mut tape, p, u, prior).unwrap();
            let mp: f64 = pv.iter().map(|&s| -math::log_sigmoid(s)).sum::<f64>() / 6.0;
            let mnp: f64 = pv.iter().map(|&s| -math::log_sigmoid(-s)).sum::<f64>() / 6.0;
            let mnu: f64 = uv.iter().map(|&s| -math::log_sigmoid(-s)).sum::<f64>() / 9.0;
            let expect = prior * mp - prior * mnp + mnu;
            assert!((tape.scalar_value(r).unwrap() - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn upu_prior_zero_is_unlabeled_negative_risk() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let u = tape.constant(vec![2], vec![0.5, -0.5]).unwrap();
        let r = upu_risk(&mut tape, p, u, 0.0).unwrap();
        let expect = -(math::log_sigmoid(-0.5) + math::log_sigmoid(0.5)) / 2.0;
        assert!((tape.scalar_value(r).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn var_loss_zero_logits_closed_forms() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 4, 1, vec![0.0; 4]);
        let lm = labels(4, 1, vec![1, 1, 0, 0]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let a = var_loss_category(&mut tape, &view, 0, 1.0, 1.0).unwrap();
        assert!(tape.scalar_value(a.term).unwrap().abs() <= 1e-12);
        let b = var_loss_category(&mut tape, &view, 0, 0.5, 1.0).unwrap();
        assert!((tape.scalar_value(b.term).unwrap() - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn var_loss_singleton_batch_is_zero() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 1, 1, vec![1.37]);
        let lm = labels(1, 1, vec![1]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let v = var_loss_category(&mut tape, &view, 0, 1.0, 1.0).unwrap();
        assert!(tape.scalar_value(v.term).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn var_loss_matches_scalar_loop() {
        for seed in 0..10u64 {
            let (lv, _) = random_case(seed, 6, 2);
            let entries: Vec<i8> = (0..12).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect();
            let mut tape = Tape::new();
            let logits = logits_on_tape(&mut tape, 6, 2, lv.clone());
            let lm = labels(6, 2, entries.clone());
            let view = BatchView::new(&tape, logits, &lm).unwrap();
            for cat in 0..2usize {
                let v = var_loss_category(&mut tape, &view, cat, 1.0, 1.0).unwrap();
                let mean_u: f64 =
                    (0..6).map(|i| math::sigmoid(lv[i * 2 + cat])).sum::<f64>() / 6.0;
                let pos: Vec<usize> =
                    (0..6).filter(|&i| entries[i * 2 + cat] == 1).collect();
                let mean_p: f64 = pos
                    .iter()
                    .map(|&i| math::log_sigmoid(lv[i * 2 + cat]))
                    .sum::<f64>()
                    / pos.len() as f64;
                let expect = math::ln(mean_u) - mean_p;
                assert!((tape.scalar_value(v.term).unwrap() - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn var_loss_without_positives_keeps_unlabeled_term_only() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 3, 1, vec![0.2, -0.4, 1.0]);
        let lm = labels(3, 1, vec![0, 0, 0]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let v = var_loss_category(&mut tape, &view, 0, 0.7, 1.0).unwrap();
        assert!(!v.positive_term_present);
        let mean_u: f64 = [0.2, -0.4, 1.0]
            .iter()
            .map(|&s| math::sigmoid(s))
            .sum::<f64>()
            / 3.0;
        let expect = 0.7 * math::ln(mean_u);
        assert!((tape.scalar_value(v.term).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn rebalance_factor_closed_forms() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 4, 1, vec![0.0; 4]);
        let lm = labels(4, 1, vec![1, 0, 0, 0]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        assert_eq!(rebalance_factor(&tape, &view, 0, 0.0), 1.0);
        assert!((rebalance_factor(&tape, &view, 0, 1.0) - 0.5).abs() <= 1e-12);
        assert!((rebalance_factor(&tape, &view, 0, 2.0) - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn rebalance_factor_is_non_increasing_in_gamma() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 5, 1, vec![-1.0, 0.3, 0.7, -2.0, 0.1]);
        let lm = labels(5, 1, vec![1, 0, 0, 0, 0]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let mut prev = f64::INFINITY;
        for g in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let f = rebalance_factor(&tape, &view, 0, g);
            assert!(f > 0.0 && f <= 1.0);
            assert!(f <= prev + 1e-15);
            prev = f;
        }
    }

    #[test]
    fn adaptive_temperature_hand_cases() {
        let mut tape = Tape::new();
        let logits = logits_on_tape(&mut tape, 2, 2, vec![-1.0, 0.5, 1.0, 0.5]);
        let lm = labels(2, 2, vec![1, 1, -1, -1]);
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        // column 0 is [-1, 1]: population std 1
        assert!((adaptive_temperature(&tape, &view, 0, 1.0, 1e-3) - 1.0).abs() <= 1e-12);
        assert!((adaptive_temperature(&tape, &view, 0, 0.5, 1e-3) - 0.5).abs() <= 1e-12);
        // column 1 is constant: std 0 clamps to the floor
        assert_eq!(adaptive_temperature(&tape, &view, 1, 1.0, 1e-3), 1e-3);
        // huge spread clamps to 1
        assert_eq!(adaptive_temperature(&tape, &view, 0, 100.0, 1e-3), 1.0);
    }

    fn mlp_fixture(seed: u64, d: usize, c: usize) -> (Model, Tensor) {
        let spec = ModelSpec::Mlp {
            input_dim: d,
            hidden: vec![],
            categories: c,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = build_model(&spec, &mut rng).unwrap();
        let x = crate::nn::init_normal(vec![4, d], 1.0, &mut rng);
        (model, x)
    }

    #[test]
    fn mixup_endpoint_draws_cost_nothing() {
        let (mut model, x) = mlp_fixture(3, 5, 2);
        let lm = labels(4, 2, vec![1, 0, 0, 1, 0, 0, 1, 0]);
        for mu in [0.0, 1.0] {
            let mut tape = Tape::new();
            let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
            let (logits, bound) = model.forward(&mut tape, xid, true).unwrap();
            let view = BatchView::new(&tape, logits, &lm).unwrap();
            let draw = MixupDraw {
                category: 0,
                mu,
                positive_index: 0,
                unlabeled_index: 2,
            };
            let terms =
                mixup_reg_terms(&mut tape, &view, &x, &mut model, &bound, &[draw]).unwrap();
            assert!(tape.scalar_value(terms[0]).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn mixup_constant_model_costs_nothing_for_any_mu() {
        let (mut model, x) = mlp_fixture(4, 3, 1);
        for p in model.params_mut() {
            for v in p.values_mut() {
                *v = 0.0;
            }
        }
        let lm = labels(4, 1, vec![1, 0, 0, 0]);
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let (logits, bound) = model.forward(&mut tape, xid, true).unwrap();
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        for mu in [0.13, 0.5, 0.92] {
            let draw = MixupDraw {
                category: 0,
                mu,
                positive_index: 0,
                unlabeled_index: 3,
            };
            let terms =
                mixup_reg_terms(&mut tape, &view, &x, &mut model, &bound, &[draw]).unwrap();
            assert!(tape.scalar_value(terms[0]).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn mixup_skips_categories_without_positives() {
        let (mut model, x) = mlp_fixture(5, 4, 2);
        let lm = labels(4, 2, vec![0, 0, 0, 0, 0, 0, 0, 0]);
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let (logits, bound) = model.forward(&mut tape, xid, true).unwrap();
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let term = mixup_reg_category(
            &mut tape, &view, &x, &mut model, &bound, 0, 0.3, &mut rng,
        )
        .unwrap();
        assert!(term.is_none());
    }

    #[test]
    fn full_loss_zero_logit_closed_form() {
        let spec = ModelSpec::Mlp {
            input_dim: 4,
            hidden: vec![],
            categories: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = build_model(&spec, &mut rng).unwrap();
        for p in model.params_mut() {
            for v in p.values_mut() {
                *v = 0.0;
            }
        }
        let x = crate::nn::init_normal(vec![4, 4], 1.0, &mut rng);
        let lm = labels(4, 3, vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let (logits, bound) = model.forward(&mut tape, xid, true).unwrap();
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let cfg = PuLossConfig {
            gamma: 1.0,
            lambda: 0.0,
            temperature: TemperatureMode::Off,
            ..PuLossConfig::default()
        };
        let breakdown =
            pu_mlc_loss(&mut tape, &view, &x, &mut model, &bound, &cfg, &mut rng).unwrap();
        assert!((tape.scalar_value(breakdown.total).unwrap() - 1.039721).abs() < 1e-6);
        for t in &breakdown.categories {
            assert!((t.p_factor - 0.5).abs() <= 1e-12);
            assert_eq!(t.tau, 1.0);
        }
    }

    #[test]
    fn full_loss_reduces_to_plain_variational_sum() {
        for seed in 0..5u64 {
            let (mut model, x) = mlp_fixture(seed, 6, 3);
            let mut lrng = ChaCha8Rng::seed_from_u64(seed + 50);
            let entries: Vec<i8> = (0..12)
                .map(|_| if lrng.random_range(0.0..1.0) < 0.4 { 1 } else { 0 })
                .collect();
            let lm = labels(4, 3, entries);
            let mut tape = Tape::new();
            let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
            let (logits, bound) = model.forward(&mut tape, xid, true).unwrap();
            let view = BatchView::new(&tape, logits, &lm).unwrap();
            let cfg = PuLossConfig {
                gamma: 0.0,
                lambda: 0.0,
                temperature: TemperatureMode::Off,
                ..PuLossConfig::default()
            };
            let breakdown =
                pu_mlc_loss(&mut tape, &view, &x, &mut model, &bound, &cfg, &mut lrng)
                    .unwrap();
            let mut expect = 0.0;
            for cat in 0..3 {
                let v = var_loss_category(&mut tape, &view, cat, 1.0, 1.0).unwrap();
                expect += tape.scalar_value(v.term).unwrap();
            }
            let got = tape.scalar_value(breakdown.total).unwrap();
            assert!((got - expect).abs() <= 1e-12, "seed {seed}: {got} vs {expect}");
        }
    }

    #[test]
    fn breakdown_total_matches_term_sum() {
        let (mut model, x) = mlp_fixture(9, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let entries: Vec<i8> = (0..16)
            .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 1 } else { 0 })
            .collect();
        let lm = labels(4, 4, entries);
        let mut tape = Tape::new();
        let xid = tape.constant(x.shape().to_vec(), x.values().to_vec()).unwrap();
        let (logits, bound) = model.forward(&mut tape, xid, true).unwrap();
        let view = BatchView::new(&tape, logits, &lm).unwrap();
        let cfg = PuLossConfig::default();
        let breakdown =
            pu_mlc_loss(&mut tape, &view, &x, &mut model, &bound, &cfg, &mut rng).unwrap();
        let recomputed: f64 = breakdown
            .categories
            .iter()
            .map(|t| t.var_value + cfg.lambda * t.reg_value)
            .sum();
        let total = tape.scalar_value(breakdown.total).unwrap();
        assert!((total - recomputed).abs() <= 1e-10);
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = PuLossConfig::default();
        cfg.gamma = -0.1;
        assert!(cfg.validate().is_err());
        cfg = PuLossConfig::default();
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
        cfg = PuLossConfig::default();
        cfg.tau_floor = 0.0;
        assert!(cfg.validate().is_err());
        cfg = PuLossConfig::default();
        cfg.temperature = TemperatureMode::Fixed { tau: 1.5 };
        assert!(cfg.validate().is_err());
        assert!(PuLossConfig::default().validate().is_ok());
    }
}
