//! Dataset directory layout: `features.pumt` (f64), `labels.pumt` (i8,
//! shape [n, c]), and `manifest.json` carrying generation metadata plus
//! payload checksums.

use std::fs;
use std::path::Path;

use pumlc_core::datasets::{Dataset, GeneratorParams, LabelMatrix, MaskSpec};
use pumlc_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::errors::{validation, CliResult};
use crate::pumt::{self, Pumt};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checksums {
    pub features: u32,
    pub labels: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub generator: String,
    pub params: GeneratorParams,
    pub mask: Option<MaskSpec>,
    pub crc32: Checksums,
    pub category_names: Vec<String>,
}

pub fn save(dir: &Path, dataset: &Dataset) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let features = Pumt::f64(
        dataset.features.shape().to_vec(),
        dataset.features.values().to_vec(),
    );
    let labels = Pumt::i8(
        vec![dataset.labels.n_samples(), dataset.labels.n_categories()],
        dataset.labels.entries().to_vec(),
    );
    let features_crc = pumt::write_file(&dir.join("features.pumt"), &features)?;
    let labels_crc = pumt::write_file(&dir.join("labels.pumt"), &labels)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: dataset.seed,
        generator: dataset.params.name().to_string(),
        params: dataset.params.clone(),
        mask: dataset.mask,
        crc32: Checksums {
            features: features_crc,
            labels: labels_crc,
        },
        category_names: dataset.category_names.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load(dir: &Path) -> CliResult<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
        validation(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| validation(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(validation(format!(
            "unsupported dataset manifest version {}, expected {MANIFEST_VERSION}",
            manifest.version
        )));
    }

    let (features, features_crc) = pumt::read_file(&dir.join("features.pumt"))?;
    if features_crc != manifest.crc32.features {
        return Err(validation(format!(
            "features.pumt checksum {features_crc:#010x} does not match manifest {:#010x}",
            manifest.crc32.features
        )));
    }
    let (labels, labels_crc) = pumt::read_file(&dir.join("labels.pumt"))?;
    if labels_crc != manifest.crc32.labels {
        return Err(validation(format!(
            "labels.pumt checksum {labels_crc:#010x} does not match manifest {:#010x}",
            manifest.crc32.labels
        )));
    }
    if labels.shape.len() != 2 {
        return Err(validation(format!(
            "labels.pumt must be rank 2 [samples, categories], got rank {}",
            labels.shape.len()
        )));
    }

    let feature_tensor = Tensor::new(features.shape.clone(), features.as_f64()?.to_vec())?;
    let label_matrix =
        LabelMatrix::new(labels.shape[0], labels.shape[1], labels.as_i8()?.to_vec())?;
    if feature_tensor.shape()[0] != label_matrix.n_samples() {
        return Err(validation(format!(
            "features hold {} samples but labels hold {}",
            feature_tensor.shape()[0],
            label_matrix.n_samples()
        )));
    }
    if manifest.category_names.len() != label_matrix.n_categories() {
        return Err(validation(format!(
            "manifest lists {} category names but labels hold {} categories",
            manifest.category_names.len(),
            label_matrix.n_categories()
        )));
    }

    Ok(Dataset {
        features: feature_tensor,
        labels: label_matrix,
        category_names: manifest.category_names,
        seed: manifest.seed,
        params: manifest.params,
        mask: manifest.mask,
    })
}
