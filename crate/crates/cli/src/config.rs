//! Training-config JSON loading. Missing keys are collected across the
//! whole document and reported in one message, so a config is fixed in
//! one edit instead of one error at a time.

use std::fs;
use std::path::Path;

use pumlc_core::train::TrainConfig;
use serde_json::Value;

use crate::errors::{validation, CliResult};

/// Required key paths, nested requirements included. Optional keys
/// (`loss_kind`, `model.lgconv`, variant fields of an unrecognized tag)
/// are never reported.
fn missing_keys(root: &Value) -> Vec<String> {
    let mut missing = Vec::new();
    let obj = match root.as_object() {
        Some(o) => o,
        None => return vec!["<top-level object>".to_string()],
    };
    let mut need = |path: &str| {
        let mut cur = root;
        for part in path.split('.') {
            match cur.get(part) {
                Some(v) => cur = v,
                None => {
                    missing.push(path.to_string());
                    return;
                }
            }
        }
    };
    for key in [
        "epochs",
        "batch_size",
        "learning_rate",
        "optimizer",
        "seed",
        "loss",
        "mask",
        "model",
        "eval_every",
    ] {
        need(key);
    }
    if obj.contains_key("optimizer") {
        need("optimizer.kind");
        match root["optimizer"].get("kind").and_then(Value::as_str) {
            Some("sgd") => need("optimizer.momentum"),
            Some("adam") => {
                need("optimizer.beta1");
                need("optimizer.beta2");
                need("optimizer.epsilon");
            }
            _ => {}
        }
    }
    if obj.contains_key("loss") {
        for key in [
            "loss.gamma",
            "loss.alpha",
            "loss.tau_floor",
            "loss.lambda",
            "loss.mix_beta",
            "loss.temperature",
        ] {
            need(key);
        }
        if root["loss"].get("temperature").is_some() {
            need("loss.temperature.mode");
            if root["loss"]["temperature"].get("mode").and_then(Value::as_str) == Some("fixed") {
                need("loss.temperature.tau");
            }
        }
    }
    if obj.contains_key("mask") {
        for key in ["mask.setting", "mask.ratio", "mask.seed"] {
            need(key);
        }
    }
    if obj.contains_key("model") {
        need("model.kind");
        match root["model"].get("kind").and_then(Value::as_str) {
            Some("mlp") => {
                for key in ["model.input_dim", "model.hidden", "model.categories"] {
                    need(key);
                }
            }
            Some("cnn") => {
                for key in ["model.in_channels", "model.channels", "model.categories"] {
                    need(key);
                }
            }
            _ => {}
        }
    }
    missing
}

pub fn parse_train_config(text: &str, source: &str) -> CliResult<TrainConfig> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| validation(format!("{source}: invalid JSON: {e}")))?;
    let missing = missing_keys(&value);
    if !missing.is_empty() {
        return Err(validation(format!(
            "{source}: missing required config keys: {}",
            missing.join(", ")
        )));
    }
    let config: TrainConfig = serde_json::from_value(value)
        .map_err(|e| validation(format!("{source}: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn load_train_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    parse_train_config(&text, &path.display().to_string())
}

/// 64-bit FNV-1a over the compact canonical JSON of the effective
/// config. Stable across runs because struct field order is fixed.
pub fn config_hash(config: &TrainConfig) -> CliResult<String> {
    let canonical = serde_json::to_string(config)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// First 12 hex digits of the config hash; names the run directory
/// contents deterministically.
pub fn run_id(config: &TrainConfig) -> CliResult<String> {
    Ok(config_hash(config)?[..12].to_string())
}

/// Seed precedence: command-line flag > PUMLC_SEED > config file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config_seed: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(text) = env {
        return text.trim().parse::<u64>().map_err(|_| {
            validation(format!(
                "PUMLC_SEED must be an unsigned 64-bit integer, got {text:?}"
            ))
        });
    }
    Ok(config_seed)
}

pub fn resolve_seed_from_env(flag: Option<u64>, config_seed: u64) -> CliResult<u64> {
    let env = std::env::var("PUMLC_SEED").ok();
    resolve_seed(flag, env.as_deref(), config_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pumlc_core::train::LossKind;

    fn full_config_json() -> serde_json::Value {
        serde_json::json!({
            "epochs": 4,
            "batch_size": 8,
            "learning_rate": 0.01,
            "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
            "seed": 42,
            "loss": {
                "gamma": 1.0,
                "alpha": 1.0,
                "tau_floor": 0.001,
                "lambda": 1.0,
                "mix_beta": 0.3,
                "temperature": {"mode": "adaptive"}
            },
            "mask": {"setting": "POSITIVE_ONLY", "ratio": 0.5, "seed": 7},
            "model": {"kind": "mlp", "input_dim": 6, "hidden": [5], "categories": 2},
            "eval_every": 0
        })
    }

    #[test]
    fn complete_config_parses() {
        let text = full_config_json().to_string();
        let config = parse_train_config(&text, "test").unwrap();
        assert_eq!(config.epochs, 4);
        assert_eq!(config.loss_kind, LossKind::PuMlc);
    }

    #[test]
    fn all_missing_keys_reported_in_one_message() {
        let mut v = full_config_json();
        let obj = v.as_object_mut().unwrap();
        obj.remove("epochs");
        obj.remove("seed");
        obj["loss"].as_object_mut().unwrap().remove("gamma");
        obj["mask"].as_object_mut().unwrap().remove("ratio");
        obj["model"].as_object_mut().unwrap().remove("hidden");
        let err = parse_train_config(&v.to_string(), "test").unwrap_err();
        let msg = format!("{err}");
        for key in ["epochs", "seed", "loss.gamma", "mask.ratio", "model.hidden"] {
            assert!(msg.contains(key), "missing {key} in: {msg}");
        }
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn sgd_and_fixed_tau_variant_keys_are_demanded() {
        let mut v = full_config_json();
        v["optimizer"] = serde_json::json!({"kind": "sgd"});
        v["loss"]["temperature"] = serde_json::json!({"mode": "fixed"});
        let err = parse_train_config(&v.to_string(), "test").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("optimizer.momentum"), "{msg}");
        assert!(msg.contains("loss.temperature.tau"), "{msg}");
    }

    #[test]
    fn invalid_values_still_fail_after_key_check() {
        let mut v = full_config_json();
        v["batch_size"] = serde_json::json!(1);
        assert!(parse_train_config(&v.to_string(), "test").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_train_config(&full_config_json().to_string(), "t").unwrap();
        let b = parse_train_config(&full_config_json().to_string(), "t").unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        let mut c = a.clone();
        c.seed = 43;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
        assert_eq!(run_id(&a).unwrap().len(), 12);
    }

    #[test]
    fn seed_precedence_flag_env_config() {
        assert_eq!(resolve_seed(Some(1), Some("2"), 3).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some("2"), 3).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, 3).unwrap(), 3);
        assert!(resolve_seed(None, Some("nope"), 3).is_err());
    }
}
