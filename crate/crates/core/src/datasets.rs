//! Synthetic multi-label datasets and label-availability protocols.
//!
//! Datasets are fully labeled at generation time: every entry of the
//! label matrix is +1 or -1. [`apply_mask`] then simulates the three
//! annotation regimes: keep everything, keep a per-category fraction of
//! all entries, or keep a per-category fraction of the positives and drop
//! every negative. Kept counts use `floor(ratio * eligible)` per
//! category, which reproduces published annotation budgets exactly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Per-sample, per-category annotations: +1 positive, -1 negative,
/// 0 unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    n_samples: usize,
    n_categories: usize,
    entries: Vec<i8>,
}

impl LabelMatrix {
    pub fn new(n_samples: usize, n_categories: usize, entries: Vec<i8>) -> Result<Self> {
        if n_samples == 0 || n_categories == 0 {
            return Err(Error::InvalidArgument(
                "label matrix needs at least one sample and one category".into(),
            ));
        }
        if entries.len() != n_samples * n_categories {
            return Err(Error::ShapeMismatch(format!(
                "label matrix {n_samples}x{n_categories} needs {} entries, got {}",
                n_samples * n_categories,
                entries.len()
            )));
        }
        if let Some(&bad) = entries.iter().find(|&&e| !(-1..=1).contains(&e)) {
            return Err(Error::Label(format!(
                "label entries must be -1, 0, or +1, got {bad}"
            )));
        }
        Ok(Self {
            n_samples,
            n_categories,
            entries,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn get(&self, sample: usize, category: usize) -> i8 {
        self.entries[sample * self.n_categories + category]
    }

    /// Sample indices whose entry for `category` matches `value`.
    pub fn indices_where(&self, category: usize, value: i8) -> Vec<usize> {
        (0..self.n_samples)
            .filter(|&i| self.get(i, category) == value)
            .collect()
    }

    pub fn has_unknowns(&self) -> bool {
        self.entries.iter().any(|&e| e == 0)
    }

    pub fn has_negatives(&self) -> bool {
        self.entries.iter().any(|&e| e == -1)
    }

    /// Rows `idx` as a new matrix, preserving category order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::InvalidArgument("empty row selection".into()));
        }
        let c = self.n_categories;
        let mut entries = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.n_samples {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} samples",
                    self.n_samples
                )));
            }
            entries.extend_from_slice(&self.entries[i * c..(i + 1) * c]);
        }
        Self::new(idx.len(), c, entries)
    }

    pub fn stats(&self) -> LabelStats {
        let mut per_category = Vec::with_capacity(self.n_categories);
        for c in 0..self.n_categories {
            let mut counts = CategoryCounts::default();
            for i in 0..self.n_samples {
                match self.get(i, c) {
                    1 => counts.positives += 1,
                    -1 => counts.negatives += 1,
                    _ => counts.unknowns += 1,
                }
            }
            per_category.push(counts);
        }
        LabelStats {
            n_samples: self.n_samples,
            per_category,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryCounts {
    pub positives: usize,
    pub negatives: usize,
    pub unknowns: usize,
}

impl CategoryCounts {
    pub fn total(&self) -> usize {
        self.positives + self.negatives + self.unknowns
    }
}

/// Exact annotation counts of a label matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelStats {
    pub n_samples: usize,
    pub per_category: Vec<CategoryCounts>,
}

impl LabelStats {
    pub fn total_positives(&self) -> usize {
        self.per_category.iter().map(|c| c.positives).sum()
    }

    pub fn total_negatives(&self) -> usize {
        self.per_category.iter().map(|c| c.negatives).sum()
    }

    pub fn total_unknowns(&self) -> usize {
        self.per_category.iter().map(|c| c.unknowns).sum()
    }

    pub fn total_entries(&self) -> usize {
        self.n_samples * self.per_category.len()
    }
}

/// Label-availability protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum MaskSetting {
    /// Keep every annotation.
    FullPn,
    /// Keep a per-category fraction of all entries.
    PartialPn,
    /// Keep a per-category fraction of positive entries; drop all
    /// negatives.
    PositiveOnly,
}

impl MaskSetting {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskSetting::FullPn => "FULL_PN",
            MaskSetting::PartialPn => "PARTIAL_PN",
            MaskSetting::PositiveOnly => "POSITIVE_ONLY",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskSpec {
    pub setting: MaskSetting,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(setting: MaskSetting, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask ratio must be in (0,1], got {ratio}"
            )));
        }
        Ok(Self {
            setting,
            ratio,
            seed,
        })
    }
}

/// Generation parameters, carried in the dataset manifest.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum GeneratorParams {
    Vectors { d: usize, separation: f64 },
    Images { hw: usize, max_glyphs: usize },
}

impl GeneratorParams {
    pub fn name(&self) -> &'static str {
        match self {
            GeneratorParams::Vectors { .. } => "vectors",
            GeneratorParams::Images { .. } => "images",
        }
    }
}

/// Features plus labels plus the metadata needed to regenerate them.
/// Treated as immutable once built.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: LabelMatrix,
    pub category_names: Vec<String>,
    pub seed: u64,
    pub params: GeneratorParams,
    pub mask: Option<MaskSpec>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.labels.n_samples()
    }

    pub fn n_categories(&self) -> usize {
        self.labels.n_categories()
    }

    /// Split into a head of `n_head` samples and the remaining tail.
    /// Both halves share the generator's category prototypes, so a
    /// (train, test) pair drawn this way tests generalization rather
    /// than memorizing freshly drawn concepts.
    pub fn split(&self, n_head: usize) -> Result<(Dataset, Dataset)> {
        let n = self.n_samples();
        if n_head == 0 || n_head >= n {
            return Err(Error::InvalidArgument(format!(
                "split point must be in 1..{n}, got {n_head}"
            )));
        }
        let head_idx: Vec<usize> = (0..n_head).collect();
        let tail_idx: Vec<usize> = (n_head..n).collect();
        let part = |idx: &[usize]| -> Result<Dataset> {
            Ok(Dataset {
                features: self.gather_features(idx)?,
                labels: self.labels.gather_rows(idx)?,
                category_names: self.category_names.clone(),
                seed: self.seed,
                params: self.params.clone(),
                mask: self.mask,
            })
        };
        Ok((part(&head_idx)?, part(&tail_idx)?))
    }

    /// Feature rows `idx` stacked into a batch tensor.
    pub fn gather_features(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::InvalidArgument("empty batch selection".into()));
        }
        let shape = self.features.shape();
        let row: usize = shape[1..].iter().product();
        let mut values = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= shape[0] {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} out of range for {} samples",
                    shape[0]
                )));
            }
            values.extend_from_slice(&self.features.values()[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = idx.len();
        Tensor::new(new_shape, values)
    }
}

fn kept_count(ratio: f64, eligible: usize) -> usize {
    (math::floor(ratio * eligible as f64) as usize).min(eligible)
}

/// Annotation budget of the positive-only protocol at `ratio`, against a
/// baseline that keeps the same fraction of positives AND negatives.
/// `reduction` is the fraction of baseline annotations the positive-only
/// protocol avoids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationBudget {
    pub kept_positives: usize,
    pub kept_negatives: usize,
    pub baseline_positives: usize,
    pub baseline_negatives: usize,
    pub reduction: f64,
}

impl AnnotationBudget {
    pub fn kept_total(&self) -> usize {
        self.kept_positives + self.kept_negatives
    }

    pub fn baseline_total(&self) -> usize {
        self.baseline_positives + self.baseline_negatives
    }
}

/// Compute the positive-only annotation budget from per-category positive
/// and negative counts.
pub fn annotation_budget(
    ratio: f64,
    positives: &[usize],
    negatives: &[usize],
) -> Result<AnnotationBudget> {
    if positives.len() != negatives.len() {
        return Err(Error::InvalidArgument(
            "per-category positive/negative count lists differ in length".into(),
        ));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio must be in (0,1], got {ratio}"
        )));
    }
    let mut kept_pos = 0usize;
    let mut base_pos = 0usize;
    let mut base_neg = 0usize;
    for (&p, &n) in positives.iter().zip(negatives) {
        kept_pos += kept_count(ratio, p);
        base_pos += kept_count(ratio, p);
        base_neg += kept_count(ratio, n);
    }
    let baseline = base_pos + base_neg;
    let reduction = if baseline == 0 {
        0.0
    } else {
        1.0 - kept_pos as f64 / baseline as f64
    };
    Ok(AnnotationBudget {
        kept_positives: kept_pos,
        kept_negatives: 0,
        baseline_positives: base_pos,
        baseline_negatives: base_neg,
        reduction,
    })
}

/// Fully labeled vector dataset: each category owns a random unit
/// prototype direction; a sample is the sum of its positive categories'
/// prototypes plus Gaussian noise scaled by `1/separation`.
pub fn generate_synthetic_vectors(
    n: usize,
    d: usize,
    categories: usize,
    seed: u64,
    separation: f64,
) -> Result<Dataset> {
    if n == 0 || d == 0 || categories == 0 {
        return Err(Error::InvalidArgument(
            "vector generator needs n, d, categories >= 1".into(),
        ));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "separation must be positive and finite, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut prototypes = Vec::with_capacity(categories);
    let mut rates = Vec::with_capacity(categories);
    for _ in 0..categories {
        let mut proto: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let norm = math::sqrt(proto.iter().map(|v| v * v).sum::<f64>());
        if norm > 0.0 {
            for v in &mut proto {
                *v /= norm;
            }
        } else {
            proto[0] = 1.0;
        }
        prototypes.push(proto);
        // uneven per-category positive rates mimic long-tailed label
        // frequencies
        rates.push(rng.random_range(0.05..0.4));
    }

    let noise_scale = 1.0 / separation;
    let mut values = vec![0.0f64; n * d];
    let mut entries = vec![0i8; n * categories];
    for i in 0..n {
        let row = &mut values[i * d..(i + 1) * d];
        for c in 0..categories {
            let positive = rng.random_range(0.0..1.0) < rates[c];
            entries[i * categories + c] = if positive { 1 } else { -1 };
            if positive {
                for (r, p) in row.iter_mut().zip(&prototypes[c]) {
                    *r += p;
                }
            }
        }
        for r in row.iter_mut() {
            *r += normal.sample(&mut rng) * noise_scale;
        }
    }

    Ok(Dataset {
        features: Tensor::new(vec![n, d], values)?,
        labels: LabelMatrix::new(n, categories, entries)?,
        category_names: (0..categories).map(|c| format!("cat_{c}")).collect(),
        seed,
        params: GeneratorParams::Vectors { d, separation },
        mask: None,
    })
}

const GLYPH_NAMES: [&str; 8] = [
    "square", "ring", "cross", "saltire", "hbar", "vbar", "diamond", "disk",
];

fn draw_glyph(img: &mut [f64], hw: usize, glyph: usize, x0: usize, y0: usize, size: usize, v: f64) {
    let mut put = |x: usize, y: usize| {
        if x < hw && y < hw {
            let p = &mut img[y * hw + x];
            if v > *p {
                *p = v;
            }
        }
    };
    let s = size;
    let mid = s / 2;
    for dy in 0..s {
        for dx in 0..s {
            let on = match glyph {
                0 => true,
                1 => dx == 0 || dy == 0 || dx == s - 1 || dy == s - 1,
                2 => dx == mid || dy == mid,
                3 => dx == dy || dx + dy == s - 1,
                4 => dy == mid,
                5 => dx == mid,
                6 => {
                    let ddx = dx.abs_diff(mid);
                    let ddy = dy.abs_diff(mid);
                    ddx + ddy <= mid
                }
                _ => {
                    let ddx = dx.abs_diff(mid) as f64;
                    let ddy = dy.abs_diff(mid) as f64;
                    ddx * ddx + ddy * ddy <= (mid as f64) * (mid as f64)
                }
            };
            if on {
                put(x0 + dx, y0 + dy);
            }
        }
    }
}

/// Fully labeled grayscale image dataset: each image contains 0 to
/// `max_glyphs` glyphs of distinct categories at random positions; a
/// category is positive iff its glyph is present.
pub fn generate_synthetic_images(n: usize, categories: usize, hw: usize, seed: u64) -> Result<Dataset> {
    const MAX_GLYPHS: usize = 4;
    if n == 0 || categories == 0 {
        return Err(Error::InvalidArgument(
            "image generator needs n, categories >= 1".into(),
        ));
    }
    if categories > GLYPH_NAMES.len() {
        return Err(Error::InvalidArgument(format!(
            "image generator has {} distinct glyphs, {categories} categories requested",
            GLYPH_NAMES.len()
        )));
    }
    if hw < 16 {
        return Err(Error::InvalidArgument(format!(
            "image side must be at least 16, got {hw}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glyph_size = (hw / 4).max(4);
    let mut values = vec![0.0f64; n * hw * hw];
    let mut entries = vec![-1i8; n * categories];
    let mut order: Vec<usize> = (0..categories).collect();
    for i in 0..n {
        let img = &mut values[i * hw * hw..(i + 1) * hw * hw];
        let count = rng.random_range(0..=MAX_GLYPHS.min(categories));
        order.shuffle(&mut rng);
        for &cat in order.iter().take(count) {
            let x0 = rng.random_range(0..=hw - glyph_size);
            let y0 = rng.random_range(0..=hw - glyph_size);
            let intensity = rng.random_range(0.6..1.0);
            draw_glyph(img, hw, cat, x0, y0, glyph_size, intensity);
            entries[i * categories + cat] = 1;
        }
    }
    Ok(Dataset {
        features: Tensor::new(vec![n, 1, hw, hw], values)?,
        labels: LabelMatrix::new(n, categories, entries)?,
        category_names: GLYPH_NAMES[..categories]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        seed,
        params: GeneratorParams::Images {
            hw,
            max_glyphs: MAX_GLYPHS,
        },
        mask: None,
    })
}

/// Apply a label-availability protocol to a fully labeled dataset.
///
/// Entries are only ever erased to 0, never flipped. Kept counts are
/// exactly `floor(ratio * eligible)` per category, chosen uniformly by
/// the spec's seed.
pub fn apply_mask(full: &Dataset, spec: &MaskSpec) -> Result<Dataset> {
    if !(spec.ratio > 0.0 && spec.ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must be in (0,1], got {}",
            spec.ratio
        )));
    }
    if full.labels.has_unknowns() {
        return Err(Error::Label(
            "dataset is already masked; apply_mask needs fully known labels".into(),
        ));
    }
    let n = full.labels.n_samples();
    let c = full.labels.n_categories();
    let mut entries = full.labels.entries().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.setting {
        MaskSetting::FullPn => {}
        MaskSetting::PartialPn => {
            let mut idx: Vec<usize> = (0..n).collect();
            for cat in 0..c {
                idx.shuffle(&mut rng);
                let keep = kept_count(spec.ratio, n);
                let mut keep_mask = vec![false; n];
                for &i in idx.iter().take(keep) {
                    keep_mask[i] = true;
                }
                for i in 0..n {
                    if !keep_mask[i] {
                        entries[i * c + cat] = 0;
                    }
                }
            }
        }
        MaskSetting::PositiveOnly => {
            for cat in 0..c {
                let mut pos: Vec<usize> = (0..n)
                    .filter(|&i| entries[i * c + cat] == 1)
                    .collect();
                pos.shuffle(&mut rng);
                let keep = kept_count(spec.ratio, pos.len());
                for &i in pos.iter().skip(keep) {
                    entries[i * c + cat] = 0;
                }
                for i in 0..n {
                    if entries[i * c + cat] == -1 {
                        entries[i * c + cat] = 0;
                    }
                }
            }
        }
    }
    Ok(Dataset {
        features: full.features.clone(),
        labels: LabelMatrix::new(n, c, entries)?,
        category_names: full.category_names.clone(),
        seed: full.seed,
        params: full.params.clone(),
        mask: Some(*spec),
    })
}

/// Exact annotation counts of a dataset's label matrix.
pub fn label_stats(dataset: &Dataset) -> LabelStats {
    dataset.labels.stats()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vectors(seed: u64) -> Dataset {
        generate_synthetic_vectors(200, 8, 5, seed, 3.0).unwrap()
    }

    #[test]
    fn generators_reject_degenerate_sizes() {
        assert!(generate_synthetic_vectors(0, 4, 2, 0, 1.0).is_err());
        assert!(generate_synthetic_vectors(4, 0, 2, 0, 1.0).is_err());
        assert!(generate_synthetic_images(4, 2, 8, 0).is_err());
        assert!(generate_synthetic_images(4, 99, 16, 0).is_err());
    }

    #[test]
    fn vector_dataset_is_fully_labeled_and_deterministic() {
        let a = small_vectors(11);
        let b = small_vectors(11);
        assert!(!a.labels.has_unknowns());
        assert_eq!(a.features.values(), b.features.values());
        assert_eq!(a.labels, b.labels);
        let c = small_vectors(12);
        assert_ne!(a.features.values(), c.features.values());
    }

    #[test]
    fn vector_positive_rates_stay_in_configured_band() {
        let ds = generate_synthetic_vectors(4000, 6, 6, 3, 5.0).unwrap();
        let stats = ds.labels.stats();
        for counts in &stats.per_category {
            let rate = counts.positives as f64 / 4000.0;
            // configured band [0.05, 0.4] plus >4 sigma of binomial noise
            assert!(
                (0.02..0.45).contains(&rate),
                "positive rate {rate} out of band"
            );
        }
    }

    #[test]
    fn image_dataset_labels_match_glyph_presence() {
        let ds = generate_synthetic_images(50, 6, 16, 9).unwrap();
        assert_eq!(ds.features.shape(), &[50, 1, 16, 16]);
        for i in 0..50 {
            let img = &ds.features.values()[i * 256..(i + 1) * 256];
            let any_ink = img.iter().any(|&v| v > 0.0);
            let any_label = (0..6).any(|c| ds.labels.get(i, c) == 1);
            assert_eq!(any_ink, any_label, "image {i}");
        }
        let again = generate_synthetic_images(50, 6, 16, 9).unwrap();
        assert_eq!(ds.features.values(), again.features.values());
    }

    #[test]
    fn image_positive_frequency_tracks_placement_probability() {
        let n = 4000;
        let c = 8;
        let ds = generate_synthetic_images(n, c, 16, 21).unwrap();
        let stats = ds.labels.stats();
        // each image draws 0..=4 glyphs uniformly over distinct categories:
        // per-category presence probability is mean(count)/C = 2/8
        let expect = 2.0 / c as f64;
        let sigma = math::sqrt(expect * (1.0 - expect) / n as f64);
        for counts in &stats.per_category {
            let rate = counts.positives as f64 / n as f64;
            assert!(
                (rate - expect).abs() <= 3.0 * sigma + 0.01,
                "rate {rate} vs {expect}"
            );
        }
    }

    #[test]
    fn full_pn_mask_changes_nothing() {
        let ds = small_vectors(5);
        let spec = MaskSpec::new(MaskSetting::FullPn, 1.0, 7).unwrap();
        let masked = apply_mask(&ds, &spec).unwrap();
        assert_eq!(masked.labels, ds.labels);
    }

    #[test]
    fn partial_mask_keeps_exact_floor_counts_per_category() {
        let ds = generate_synthetic_vectors(100, 4, 3, 2, 2.0).unwrap();
        let spec = MaskSpec::new(MaskSetting::PartialPn, 0.5, 13).unwrap();
        let masked = apply_mask(&ds, &spec).unwrap();
        let stats = masked.labels.stats();
        for counts in &stats.per_category {
            assert_eq!(counts.positives + counts.negatives, 50);
            assert_eq!(counts.unknowns, 50);
        }
    }

    #[test]
    fn positive_only_mask_keeps_floor_of_positives_and_no_negatives() {
        let ds = small_vectors(17);
        let full_stats = ds.labels.stats();
        let spec = MaskSpec::new(MaskSetting::PositiveOnly, 0.3, 19).unwrap();
        let masked = apply_mask(&ds, &spec).unwrap();
        assert!(!masked.labels.has_negatives());
        let stats = masked.labels.stats();
        for (m, f) in stats.per_category.iter().zip(&full_stats.per_category) {
            assert_eq!(m.positives, kept_count(0.3, f.positives));
            assert_eq!(m.negatives, 0);
        }
    }

    #[test]
    fn positive_only_full_ratio_keeps_every_positive() {
        let ds = small_vectors(23);
        let spec = MaskSpec::new(MaskSetting::PositiveOnly, 1.0, 0).unwrap();
        let masked = apply_mask(&ds, &spec).unwrap();
        let before = ds.labels.stats();
        let after = masked.labels.stats();
        assert_eq!(after.total_positives(), before.total_positives());
        assert_eq!(after.total_negatives(), 0);
    }

    #[test]
    fn masking_never_flips_signs() {
        let ds = small_vectors(31);
        for setting in [MaskSetting::PartialPn, MaskSetting::PositiveOnly] {
            let spec = MaskSpec::new(setting, 0.4, 3).unwrap();
            let masked = apply_mask(&ds, &spec).unwrap();
            for (orig, new) in ds.labels.entries().iter().zip(masked.labels.entries()) {
                assert!(*new == 0 || new == orig);
            }
        }
    }

    #[test]
    fn mask_is_deterministic_per_seed_and_varies_across_seeds() {
        let ds = small_vectors(37);
        let spec = MaskSpec::new(MaskSetting::PartialPn, 0.5, 41).unwrap();
        let a = apply_mask(&ds, &spec).unwrap();
        let b = apply_mask(&ds, &spec).unwrap();
        assert_eq!(a.labels, b.labels);
        let other = MaskSpec::new(MaskSetting::PartialPn, 0.5, 42).unwrap();
        let c = apply_mask(&ds, &other).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn masking_twice_is_rejected() {
        let ds = small_vectors(43);
        let spec = MaskSpec::new(MaskSetting::PartialPn, 0.5, 1).unwrap();
        let masked = apply_mask(&ds, &spec).unwrap();
        assert!(apply_mask(&masked, &spec).is_err());
    }

    #[test]
    fn annotation_budget_reproduces_published_counts() {
        let budget = annotation_budget(0.10, &[241_035], &[6_381_605]).unwrap();
        assert_eq!(budget.kept_positives, 24_103);
        assert_eq!(budget.kept_negatives, 0);
        assert_eq!(budget.baseline_total(), 24_103 + 638_160);
        assert!((budget.reduction * 100.0 - 96.4).abs() <= 0.05);

        let half = annotation_budget(0.50, &[241_035], &[6_381_605]).unwrap();
        assert_eq!(half.kept_positives, 120_517);
        assert_eq!(half.baseline_total(), 120_517 + 3_190_802);

        let all = annotation_budget(1.0, &[241_035], &[6_381_605]).unwrap();
        assert_eq!(all.kept_positives, 241_035);
        assert_eq!(all.baseline_total(), 6_622_640);
        assert!((all.reduction * 100.0 - 96.4).abs() <= 0.05);
    }

    #[test]
    fn label_stats_counts_sum_to_samples() {
        let ds = small_vectors(47);
        let spec = MaskSpec::new(MaskSetting::PositiveOnly, 0.5, 3).unwrap();
        let masked = apply_mask(&ds, &spec).unwrap();
        let stats = label_stats(&masked);
        for counts in &stats.per_category {
            assert_eq!(counts.total(), 200);
        }
        assert_eq!(stats.total_entries(), 200 * 5);
    }

    #[test]
    fn gather_features_stacks_selected_rows() {
        let ds = small_vectors(53);
        let batch = ds.gather_features(&[3, 0, 7]).unwrap();
        assert_eq!(batch.shape(), &[3, 8]);
        assert_eq!(&batch.values()[0..8], &ds.features.values()[3 * 8..4 * 8]);
        let rows = ds.labels.gather_rows(&[3, 0, 7]).unwrap();
        assert_eq!(rows.get(0, 0), ds.labels.get(3, 0));
    }

    #[test]
    fn split_partitions_rows_in_order() {
        let ds = small_vectors(59);
        let (head, tail) = ds.split(140).unwrap();
        assert_eq!(head.n_samples(), 140);
        assert_eq!(tail.n_samples(), 60);
        assert_eq!(head.features.values(), &ds.features.values()[..140 * 8]);
        assert_eq!(tail.features.values(), &ds.features.values()[140 * 8..]);
        assert_eq!(tail.labels.get(0, 2), ds.labels.get(140, 2));
        assert_eq!(head.category_names, ds.category_names);
        assert!(ds.split(0).is_err());
        assert!(ds.split(200).is_err());
    }
}
