//! Ranking and thresholded classification metrics: per-category average
//! precision and its mean, plus micro/macro F1 at a fixed probability
//! threshold, evaluated against fully known labels.

use alloc::vec::Vec;

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Model;
use crate::tensor::{Tape, Tensor};

/// Non-interpolated average precision: samples are ranked by descending
/// score with ties broken by original index ascending, and AP is the mean
/// over positive ranks `k` of `positives_in_top_k / k`. Scores only enter
/// through their ordering, so any strictly monotone transform leaves the
/// result unchanged.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores must be finite".into()));
    }
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::EmptySet(
            "average precision is undefined without positives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps ascending-index order within equal scores
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if targets[idx] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Confusion counts and derived rates for one category at a threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryF1 {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Thresholded F1 summary: `of1` is micro-F1 over every (sample,
/// category) pair, `cf1` is the mean of per-category F1 values.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub of1: f64,
    pub cf1: f64,
    pub per_category: Vec<CategoryF1>,
    pub threshold: f64,
}

/// Computes micro and macro F1 from probabilities against fully known
/// labels. A sample is predicted positive iff its probability is at or
/// above the threshold. Categories with no actual and no predicted
/// positives are counted as F1 = 1; the same convention applies to
/// precision and recall with empty denominators.
pub fn f1_scores(probs: &Tensor, labels: &crate::datasets::LabelMatrix, threshold: f64) -> Result<F1Report> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(alloc::format!(
            "threshold must be in [0,1], got {threshold}"
        )));
    }
    let n = labels.n_samples();
    let c = labels.n_categories();
    if probs.shape() != [n, c] {
        return Err(Error::ShapeMismatch(alloc::format!(
            "probabilities {:?} do not match labels {n}x{c}",
            probs.shape()
        )));
    }
    if labels.has_unknowns() {
        return Err(Error::Label(
            "F1 evaluation needs fully known labels".into(),
        ));
    }
    let mut per_category = Vec::with_capacity(c);
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for cat in 0..c {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let predicted = probs.values()[i * c + cat] >= threshold;
            let actual = labels.get(i, cat) == 1;
            match (predicted, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
        per_category.push(CategoryF1 {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fneg,
            precision: rate(tp, tp + fp),
            recall: rate(tp, tp + fneg),
            f1: rate(2 * tp, 2 * tp + fp + fneg),
        });
    }
    let of1 = rate(2 * tp_all, 2 * tp_all + fp_all + fn_all);
    let cf1 = per_category.iter().map(|r| r.f1).sum::<f64>() / c as f64;
    Ok(F1Report {
        of1,
        cf1,
        per_category,
        threshold,
    })
}

/// Full evaluation summary. Categories without positives in the eval
/// labels have no defined AP; they are listed in `excluded_categories`,
/// carry `None` in `per_class_ap`, and do not enter `map`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub of1: f64,
    pub cf1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub excluded_categories: Vec<usize>,
    pub threshold: f64,
}

/// Runs the model over the dataset in eval mode (batch norm uses running
/// statistics) and scores the sigmoid probabilities against the dataset's
/// fully known labels.
pub fn evaluate(model: &mut Model, dataset: &Dataset, threshold: f64) -> Result<MetricsReport> {
    if dataset.n_samples() == 0 {
        return Err(Error::EmptySet("cannot evaluate an empty dataset".into()));
    }
    if dataset.labels.has_unknowns() {
        return Err(Error::Label(
            "evaluation needs fully known labels".into(),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(
        dataset.features.shape().to_vec(),
        dataset.features.values().to_vec(),
    )?;
    let (logits, _) = model.forward(&mut tape, x, false)?;
    let n = dataset.n_samples();
    let c = dataset.n_categories();
    let logit_vals = tape.values(logits);
    let probs = Tensor::new(
        alloc::vec![n, c],
        logit_vals.iter().map(|&v| math::sigmoid(v)).collect(),
    )?;
    report_from_scores(logit_vals, &probs, &dataset.labels, threshold)
}

/// Assembles the report from raw ranking scores and thresholded
/// probabilities; split out so oracle logits can be scored directly.
pub fn report_from_scores(
    scores: &[f64],
    probs: &Tensor,
    labels: &crate::datasets::LabelMatrix,
    threshold: f64,
) -> Result<MetricsReport> {
    let n = labels.n_samples();
    let c = labels.n_categories();
    if scores.len() != n * c {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} scores for {n}x{c} labels",
            scores.len()
        )));
    }
    let f1 = f1_scores(probs, labels, threshold)?;
    let mut per_class_ap = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    let mut included_sum = 0.0;
    let mut included = 0usize;
    for cat in 0..c {
        let col: Vec<f64> = (0..n).map(|i| scores[i * c + cat]).collect();
        let targets: Vec<bool> = (0..n).map(|i| labels.get(i, cat) == 1).collect();
        if targets.iter().any(|&t| t) {
            let ap = average_precision(&col, &targets)?;
            included_sum += ap;
            included += 1;
            per_class_ap.push(Some(ap));
        } else {
            excluded.push(cat);
            per_class_ap.push(None);
        }
    }
    if included == 0 {
        return Err(Error::EmptySet(
            "every category lacks positives; mAP undefined".into(),
        ));
    }
    Ok(MetricsReport {
        per_class_ap,
        map: included_sum / included as f64,
        of1: f1.of1,
        cf1: f1.cf1,
        per_class_precision: f1.per_category.iter().map(|r| r.precision).collect(),
        per_class_recall: f1.per_category.iter().map(|r| r.recall).collect(),
        excluded_categories: excluded,
        threshold,
    })
}
