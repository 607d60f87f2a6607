//! Command implementations. Every command writes its machine-readable
//! outputs (CSV, PUMT, JSON) into `--out` and keeps stdout for humans.
//! Re-running with `--force` and identical inputs rewrites identical
//! bytes everywhere except `run.json`, whose wall-clock timestamps are
//! deliberately outside the determinism contract.

use std::fs;
use std::path::{Path, PathBuf};

use pumlc_core::datasets::{
    annotation_budget, apply_mask, generate_synthetic_images, generate_synthetic_vectors,
    MaskSetting, MaskSpec,
};
use pumlc_core::gradcheck::standard_suite;
use pumlc_core::metrics::evaluate;
use pumlc_core::nn::build_model;
use pumlc_core::train::{sweep, train_from, TrainState};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{config_hash, load_train_config, resolve_seed_from_env, run_id};
use crate::dataset_io;
use crate::errors::{numeric, validation, CliResult};
use crate::reports::{
    gradcheck_csv, history_csv, metrics_csv, now_unix, sweep_csv, RunManifest, TOOLKIT_VERSION,
};

/// Refuses to write into a non-empty directory unless `--force`.
pub fn prepare_out_dir(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() {
        if !path.is_dir() {
            return Err(validation(format!(
                "{} exists and is not a directory",
                path.display()
            )));
        }
        let non_empty = fs::read_dir(path)?.next().is_some();
        if non_empty && !force {
            return Err(validation(format!(
                "{} is not empty; pass --force to overwrite",
                path.display()
            )));
        }
    }
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_manifest(
    dir: &Path,
    run_id: &str,
    command: &str,
    config_hash: &str,
    started: u64,
    outputs: &[PathBuf],
) -> CliResult<()> {
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        command: command.to_string(),
        config_hash: config_hash.to_string(),
        toolkit_version: TOOLKIT_VERSION.to_string(),
        started_at_unix: started,
        finished_at_unix: now_unix(),
        outputs: outputs
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    manifest.write(dir)?;
    Ok(())
}

/// FNV-1a over the synth/mask inputs, so dataset directories also get a
/// stable run identity.
fn args_run_id(parts: &[String]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0x1f;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")[..12].to_string()
}

pub struct SynthArgs {
    pub kind: String,
    pub n: usize,
    pub categories: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub dim: usize,
    pub separation: f64,
    pub hw: usize,
    pub force: bool,
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let started = now_unix();
    let dataset = match args.kind.as_str() {
        "vectors" => generate_synthetic_vectors(
            args.n,
            args.dim,
            args.categories,
            args.seed,
            args.separation,
        )?,
        "images" => generate_synthetic_images(args.n, args.categories, args.hw, args.seed)?,
        other => {
            return Err(validation(format!(
                "unknown dataset kind {other:?}; expected vectors or images"
            )))
        }
    };
    prepare_out_dir(&args.out, args.force)?;
    dataset_io::save(&args.out, &dataset)?;
    let id = args_run_id(&[
        "synth".into(),
        args.kind.clone(),
        args.n.to_string(),
        args.categories.to_string(),
        args.seed.to_string(),
        args.dim.to_string(),
        args.separation.to_string(),
        args.hw.to_string(),
    ]);
    write_manifest(
        &args.out,
        &id,
        "synth",
        "",
        started,
        &[
            args.out.join("features.pumt"),
            args.out.join("labels.pumt"),
            args.out.join("manifest.json"),
        ],
    )?;
    let stats = dataset.labels.stats();
    println!(
        "wrote {} dataset: {} samples, {} categories, {} positive / {} negative labels -> {}",
        args.kind,
        dataset.n_samples(),
        dataset.n_categories(),
        stats.total_positives(),
        stats.total_negatives(),
        args.out.display()
    );
    Ok(())
}

pub struct SplitArgs {
    pub input: PathBuf,
    pub head: usize,
    pub out_head: PathBuf,
    pub out_tail: PathBuf,
    pub force: bool,
}

/// Head/tail split of one dataset; both halves share the generator's
/// category prototypes, which a pair of fresh synth seeds would not.
pub fn cmd_split(args: &SplitArgs) -> CliResult<()> {
    let started = now_unix();
    let full = dataset_io::load(&args.input)?;
    let (head, tail) = full.split(args.head)?;
    prepare_out_dir(&args.out_head, args.force)?;
    prepare_out_dir(&args.out_tail, args.force)?;
    dataset_io::save(&args.out_head, &head)?;
    dataset_io::save(&args.out_tail, &tail)?;
    let id = args_run_id(&[
        "split".into(),
        args.input.display().to_string(),
        args.head.to_string(),
    ]);
    for (dir, part) in [(&args.out_head, &head), (&args.out_tail, &tail)] {
        write_manifest(
            dir,
            &id,
            "split",
            "",
            started,
            &[
                dir.join("features.pumt"),
                dir.join("labels.pumt"),
                dir.join("manifest.json"),
            ],
        )?;
        println!("{} samples -> {}", part.n_samples(), dir.display());
    }
    Ok(())
}

pub struct MaskArgs {
    pub input: PathBuf,
    pub setting: MaskSetting,
    pub ratio: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
}

pub fn cmd_mask(args: &MaskArgs) -> CliResult<()> {
    let started = now_unix();
    let full = dataset_io::load(&args.input)?;
    if full.mask.is_some() {
        return Err(validation(format!(
            "{} is already masked; masking composes only on fully labeled data",
            args.input.display()
        )));
    }
    let spec = MaskSpec::new(args.setting, args.ratio, args.seed)?;
    let masked = apply_mask(&full, &spec)?;
    prepare_out_dir(&args.out, args.force)?;
    dataset_io::save(&args.out, &masked)?;

    let before = full.labels.stats();
    let after = masked.labels.stats();
    println!(
        "{:<16} {:>10} {:>10} {:>10}",
        "category", "positives", "negatives", "unknowns"
    );
    for (name, counts) in masked.category_names.iter().zip(&after.per_category) {
        println!(
            "{:<16} {:>10} {:>10} {:>10}",
            name, counts.positives, counts.negatives, counts.unknowns
        );
    }
    println!(
        "{:<16} {:>10} {:>10} {:>10}",
        "total",
        after.total_positives(),
        after.total_negatives(),
        after.total_unknowns()
    );
    // Annotation budget vs labeling the same fraction of every entry:
    // the positive-only protocol's saving over a partial-PN baseline.
    let pos: Vec<usize> = before.per_category.iter().map(|c| c.positives).collect();
    let neg: Vec<usize> = before.per_category.iter().map(|c| c.negatives).collect();
    let budget_ratio = match args.setting {
        MaskSetting::FullPn => 1.0,
        _ => args.ratio,
    };
    let budget = annotation_budget(budget_ratio, &pos, &neg)?;
    let kept = after.total_positives() + after.total_negatives();
    let baseline = budget.baseline_total();
    let reduction = if baseline == 0 {
        0.0
    } else {
        1.0 - kept as f64 / baseline as f64
    };
    println!(
        "known annotations: {} kept of {} at the same labeling ratio ({:.1}% reduction)",
        kept,
        baseline,
        reduction * 100.0
    );

    let id = args_run_id(&[
        "mask".into(),
        args.input.display().to_string(),
        spec.setting.as_str().into(),
        args.ratio.to_string(),
        args.seed.to_string(),
    ]);
    write_manifest(
        &args.out,
        &id,
        "mask",
        "",
        started,
        &[
            args.out.join("features.pumt"),
            args.out.join("labels.pumt"),
            args.out.join("manifest.json"),
        ],
    )?;
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub eval: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub force: bool,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let started = now_unix();
    let mut config = load_train_config(&args.config)?;
    config.seed = resolve_seed_from_env(args.seed, config.seed)?;
    let hash = config_hash(&config)?;
    let id = run_id(&config)?;

    let loaded = dataset_io::load(&args.data)?;
    // Convenience path: an unmasked dataset gets the config's mask
    // applied in memory; a pre-masked dataset must match the config.
    let dataset = match loaded.mask {
        None => apply_mask(&loaded, &config.mask)?,
        Some(_) => loaded,
    };
    let eval_set = match &args.eval {
        Some(dir) => Some(dataset_io::load(dir)?),
        None => None,
    };

    let resume_state: Option<TrainState> = match &args.resume {
        Some(dir) => {
            let ckpt = checkpoint::load(dir)?;
            if ckpt.config_hash != hash {
                return Err(validation(format!(
                    "checkpoint {} was written by config {}, current config is {}",
                    dir.display(),
                    ckpt.config_hash,
                    hash
                )));
            }
            if ckpt.model != config.model {
                return Err(validation(format!(
                    "checkpoint model spec {:?} does not match the config's {:?}",
                    ckpt.model, config.model
                )));
            }
            Some(ckpt.state)
        }
        None => None,
    };

    prepare_out_dir(&args.out, args.force)?;
    let out = args.out.clone();
    let model_spec = config.model.clone();
    let every = args.checkpoint_every;
    let hash_for_hook = hash.clone();
    let mut last_state: Option<TrainState> = None;
    let output = train_from(
        &config,
        &dataset,
        eval_set.as_ref(),
        resume_state.as_ref(),
        &mut |state, record| {
            println!(
                "epoch {:>4}: loss {:.6} (var {:.6}, reg {:.6}){}",
                record.epoch,
                record.total_loss,
                record.mean_var,
                record.mean_reg,
                match record.map {
                    Some(m) => format!(", mAP {m:.4}"),
                    None => String::new(),
                }
            );
            if every > 0 && record.epoch % every == 0 {
                let dir = out.join(format!("checkpoint_epoch_{:04}", record.epoch));
                checkpoint::save(&dir, &model_spec, state, &hash_for_hook)
                    .map_err(|e| pumlc_core::error::Error::InvalidArgument(format!("{e}")))?;
            }
            last_state = Some(state.clone());
            Ok(())
        },
    )?;

    let history_path = args.out.join("history.csv");
    fs::write(&history_path, history_csv(&output.history))?;

    // train_from rejects a resume that already covers every epoch, so a
    // successful run always visited the hook at least once.
    let final_dir = args.out.join("checkpoint_final");
    let final_state = last_state
        .ok_or_else(|| validation("training produced no epochs; nothing to checkpoint"))?;
    checkpoint::save(&final_dir, &config.model, &final_state, &hash)?;

    let config_used = args.out.join("config_used.json");
    let mut cfg_json = serde_json::to_string_pretty(&config)?;
    cfg_json.push('\n');
    fs::write(&config_used, cfg_json)?;

    write_manifest(
        &args.out,
        &id,
        "train",
        &hash,
        started,
        &[history_path.clone(), final_dir.clone(), config_used],
    )?;
    println!(
        "trained {} epochs; history -> {}, final checkpoint -> {}",
        output.history.len(),
        history_path.display(),
        final_dir.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub threshold: f64,
    pub force: bool,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let started = now_unix();
    let dataset = dataset_io::load(&args.data)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = build_model(&ckpt.model, &mut rng)?;
    model.load_param_values(&ckpt.state.params)?;
    model.load_buffer_values(&ckpt.state.buffers)?;

    let report = evaluate(&mut model, &dataset, args.threshold)?;

    prepare_out_dir(&args.out, args.force)?;
    let (setting, ratio, seed) = match dataset.mask {
        Some(m) => (m.setting.as_str(), m.ratio, m.seed),
        None => ("NONE", 1.0, dataset.seed),
    };
    let id = if ckpt.config_hash.len() >= 12 {
        ckpt.config_hash[..12].to_string()
    } else {
        args_run_id(&["eval".into(), ckpt.config_hash.clone()])
    };
    let metrics_path = args.out.join("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&id, setting, ratio, seed, &report))?;
    write_manifest(
        &args.out,
        &id,
        "eval",
        &ckpt.config_hash,
        started,
        &[metrics_path.clone()],
    )?;

    println!(
        "mAP {:.4}  OF1 {:.4}  CF1 {:.4}  (threshold {})",
        report.map, report.of1, report.cf1, report.threshold
    );
    for (c, name) in dataset.category_names.iter().enumerate() {
        match report.per_class_ap[c] {
            Some(ap) => println!(
                "  {:<16} AP {:.4}  P {:.4}  R {:.4}",
                name, ap, report.per_class_precision[c], report.per_class_recall[c]
            ),
            None => println!("  {:<16} excluded (no positives)", name),
        }
    }
    println!("metrics -> {}", metrics_path.display());
    Ok(())
}

pub struct GradcheckArgs {
    pub out: PathBuf,
    pub points: usize,
    pub seed: u64,
    pub force: bool,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let started = now_unix();
    let report = standard_suite(args.points, args.seed)?;
    prepare_out_dir(&args.out, args.force)?;
    let report_path = args.out.join("report.csv");
    fs::write(&report_path, gradcheck_csv(&report))?;
    let id = args_run_id(&[
        "gradcheck".into(),
        args.points.to_string(),
        args.seed.to_string(),
    ]);
    write_manifest(&args.out, &id, "gradcheck", "", started, &[report_path.clone()])?;

    for e in &report.entries {
        println!(
            "{} {:<28} max rel err {:.3e}",
            if e.pass { "PASS" } else { "FAIL" },
            e.component,
            e.max_rel_err
        );
    }
    println!("report -> {}", report_path.display());
    if !report.all_pass() {
        let failed: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.pass)
            .map(|e| e.component.as_str())
            .collect();
        return Err(numeric(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    println!(
        "all {} components within tolerance {}",
        report.entries.len(),
        report.tolerance
    );
    Ok(())
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub eval: PathBuf,
    pub out: PathBuf,
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub force: bool,
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let started = now_unix();
    let base = load_train_config(&args.config)?;
    let hash = config_hash(&base)?;
    let dataset = dataset_io::load(&args.data)?;
    let eval_set = dataset_io::load(&args.eval)?;

    let cells = sweep(
        &base,
        &dataset,
        &eval_set,
        &args.gammas,
        &args.alphas,
        &args.ratios,
        &args.seeds,
    )?;

    prepare_out_dir(&args.out, args.force)?;
    let sweep_path = args.out.join("sweep.csv");
    fs::write(&sweep_path, sweep_csv(&cells))?;
    let id = run_id(&base)?;
    write_manifest(&args.out, &id, "sweep", &hash, started, &[sweep_path.clone()])?;

    for c in &cells {
        match (&c.error, c.map) {
            (Some(e), _) => println!(
                "gamma {:<5} alpha {:<5} ratio {:<5} seed {:<3} FAILED: {e}",
                c.gamma, c.alpha, c.ratio, c.seed
            ),
            (None, Some(m)) => println!(
                "gamma {:<5} alpha {:<5} ratio {:<5} seed {:<3} mAP {m:.4}",
                c.gamma, c.alpha, c.ratio, c.seed
            ),
            (None, None) => {}
        }
    }
    println!("{} cells -> {}", cells.len(), sweep_path.display());
    Ok(())
}
