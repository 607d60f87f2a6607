//! Checkpoint directory: one PUMT container per parameter tensor,
//! batch-norm buffer, and optimizer moment, plus `state.json` with the
//! model architecture, epoch, RNG stream position, and config hash.
//! Restoring reproduces the subsequent training trajectory exactly.

use std::fs;
use std::path::Path;

use pumlc_core::nn::ModelSpec;
use pumlc_core::train::{RngState, TrainState};
use serde::{Deserialize, Serialize};

use crate::errors::{validation, CliResult};
use crate::pumt::{self, Pumt};

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileCounts {
    params: usize,
    buffers: usize,
    opt_m: usize,
    opt_v: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    model: ModelSpec,
    epoch: usize,
    optimizer_step: u64,
    files: FileCounts,
    rng: RngState,
    config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub state: TrainState,
    pub config_hash: String,
}

fn write_group(dir: &Path, prefix: &str, tensors: &[Vec<f64>]) -> CliResult<()> {
    for (i, values) in tensors.iter().enumerate() {
        let t = Pumt::f64(vec![values.len()], values.clone());
        pumt::write_file(&dir.join(format!("{prefix}_{i:03}.pumt")), &t)?;
    }
    Ok(())
}

fn read_group(dir: &Path, prefix: &str, count: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("{prefix}_{i:03}.pumt"));
        let (t, _) = pumt::read_file(&path)?;
        out.push(t.as_f64()?.to_vec());
    }
    Ok(out)
}

pub fn save(dir: &Path, model: &ModelSpec, state: &TrainState, config_hash: &str) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    write_group(dir, "param", &state.params)?;
    write_group(dir, "buffer", &state.buffers)?;
    write_group(dir, "opt_m", &state.optimizer_m)?;
    write_group(dir, "opt_v", &state.optimizer_v)?;
    let meta = StateFile {
        version: STATE_VERSION,
        model: model.clone(),
        epoch: state.epoch,
        optimizer_step: state.optimizer_step,
        files: FileCounts {
            params: state.params.len(),
            buffers: state.buffers.len(),
            opt_m: state.optimizer_m.len(),
            opt_v: state.optimizer_v.len(),
        },
        rng: state.rng,
        config_hash: config_hash.to_string(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join("state.json"), json)?;
    Ok(())
}

pub fn load(dir: &Path) -> CliResult<Checkpoint> {
    let state_path = dir.join("state.json");
    let text = fs::read_to_string(&state_path)
        .map_err(|e| validation(format!("cannot read {}: {e}", state_path.display())))?;
    let meta: StateFile = serde_json::from_str(&text)
        .map_err(|e| validation(format!("{}: {e}", state_path.display())))?;
    if meta.version != STATE_VERSION {
        return Err(validation(format!(
            "unsupported checkpoint version {}, expected {STATE_VERSION}",
            meta.version
        )));
    }
    let state = TrainState {
        epoch: meta.epoch,
        params: read_group(dir, "param", meta.files.params)?,
        buffers: read_group(dir, "buffer", meta.files.buffers)?,
        optimizer_step: meta.optimizer_step,
        optimizer_m: read_group(dir, "opt_m", meta.files.opt_m)?,
        optimizer_v: read_group(dir, "opt_v", meta.files.opt_v)?,
        rng: meta.rng,
    };
    Ok(Checkpoint {
        model: meta.model,
        state,
        config_hash: meta.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pumlc_core::datasets::{apply_mask, generate_synthetic_vectors, MaskSetting, MaskSpec};
    use pumlc_core::losses::PuLossConfig;
    use pumlc_core::train::{train_from, LossKind, OptimizerSpec, TrainConfig};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("pumlc_ckpt_{name}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.05,
            optimizer: OptimizerSpec::default_adam(),
            seed: 5,
            loss: PuLossConfig::default(),
            mask: MaskSpec::new(MaskSetting::PositiveOnly, 0.5, 3).unwrap(),
            model: ModelSpec::Mlp {
                input_dim: 6,
                hidden: vec![5],
                categories: 2,
            },
            eval_every: 0,
            loss_kind: LossKind::PuMlc,
        }
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let config = small_config();
        let full = generate_synthetic_vectors(32, 6, 2, 17, 2.0).unwrap();
        let masked = apply_mask(&full, &config.mask).unwrap();
        let mut captured: Option<TrainState> = None;
        train_from(&config, &masked, None, None, &mut |state, record| {
            if record.epoch == 2 {
                captured = Some(state.clone());
            }
            Ok(())
        })
        .unwrap();
        let state = captured.unwrap();

        let dir = tmp("rt");
        save(&dir, &config.model, &state, "deadbeefcafe").unwrap();
        let back = load(&dir).unwrap();
        assert_eq!(back.model, config.model);
        assert_eq!(back.config_hash, "deadbeefcafe");
        assert_eq!(back.state, state);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resume_from_disk_matches_uninterrupted_run() {
        let mut config = small_config();
        config.epochs = 4;
        let full = generate_synthetic_vectors(40, 6, 2, 23, 2.0).unwrap();
        let masked = apply_mask(&full, &config.mask).unwrap();

        let straight = train_from(&config, &masked, None, None, &mut |_, _| Ok(()))
            .unwrap()
            .model
            .param_values();

        let dir = tmp("resume");
        let mut config_half = config.clone();
        config_half.epochs = 2;
        train_from(&config_half, &masked, None, None, &mut |state, record| {
            if record.epoch == 2 {
                save(&dir, &config.model, state, "h").unwrap();
            }
            Ok(())
        })
        .unwrap();

        let ckpt = load(&dir).unwrap();
        let resumed = train_from(&config, &masked, None, Some(&ckpt.state), &mut |_, _| Ok(()))
            .unwrap()
            .model
            .param_values();

        for (a, b) in straight.iter().zip(&resumed) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_state_file_is_a_validation_error() {
        let dir = tmp("missing");
        fs::create_dir_all(&dir).unwrap();
        let err = match load(&dir) {
            Err(e) => e,
            Ok(_) => panic!("must fail"),
        };
        assert_eq!(err.exit_code(), 1);
        fs::remove_dir_all(&dir).unwrap();
    }
}
