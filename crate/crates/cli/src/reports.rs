//! Plot-ready CSV writers and the per-run manifest. All numeric cells
//! use Rust's shortest-round-trip f64 formatting, so identical values
//! always produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pumlc_core::gradcheck::GradcheckReport;
use pumlc_core::metrics::MetricsReport;
use pumlc_core::train::{EpochRecord, SweepCell};
use serde::{Deserialize, Serialize};

use crate::errors::CliResult;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,total_loss,mean_var,mean_reg,mean_tau,mean_pfactor,mAP,OF1,CF1\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.total_loss,
            r.mean_var,
            r.mean_reg,
            r.mean_tau,
            r.mean_pfactor,
            opt(r.map),
            opt(r.of1),
            opt(r.cf1),
        ));
    }
    out
}

/// One row per evaluation; per-category AP columns follow the aggregate
/// scores, with excluded categories left empty.
pub fn metrics_csv(
    run_id: &str,
    setting: &str,
    ratio: f64,
    seed: u64,
    report: &MetricsReport,
) -> String {
    let mut out = String::from("run_id,setting,ratio,seed,mAP,OF1,CF1");
    for c in 0..report.per_class_ap.len() {
        out.push_str(&format!(",ap_{c}"));
    }
    out.push('\n');
    out.push_str(&format!(
        "{run_id},{setting},{ratio},{seed},{},{},{}",
        report.map, report.of1, report.cf1
    ));
    for ap in &report.per_class_ap {
        out.push(',');
        out.push_str(&opt(*ap));
    }
    out.push('\n');
    out
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("gamma,alpha,ratio,seed,mAP,OF1,CF1,error\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.gamma,
            c.alpha,
            c.ratio,
            c.seed,
            opt(c.map),
            opt(c.of1),
            opt(c.cf1),
            c.error.as_deref().unwrap_or(""),
        ));
    }
    out
}

pub fn gradcheck_csv(report: &GradcheckReport) -> String {
    let mut out = String::from("component,max_rel_err,pass\n");
    for e in &report.entries {
        out.push_str(&format!("{},{},{}\n", e.component, e.max_rel_err, e.pass));
    }
    out
}

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Written once per command invocation into the output directory.
/// Timestamps are wall-clock and deliberately excluded from the
/// determinism contract; every other output file is bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub toolkit_version: String,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub outputs: Vec<String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        let path = dir.join("run.json");
        fs::write(&path, json)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_rows_and_empty_metric_cells() {
        let history = vec![
            EpochRecord {
                epoch: 1,
                total_loss: 0.5,
                mean_var: 0.4,
                mean_reg: 0.1,
                mean_tau: 1.0,
                mean_pfactor: 0.25,
                map: None,
                of1: None,
                cf1: None,
            },
            EpochRecord {
                epoch: 2,
                total_loss: 0.25,
                mean_var: 0.2,
                mean_reg: 0.05,
                mean_tau: 0.5,
                mean_pfactor: 0.5,
                map: Some(0.875),
                of1: Some(0.75),
                cf1: Some(0.7),
            },
        ];
        let csv = history_csv(&history);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "epoch,total_loss,mean_var,mean_reg,mean_tau,mean_pfactor,mAP,OF1,CF1"
        );
        assert_eq!(lines[1], "1,0.5,0.4,0.1,1,0.25,,,");
        assert_eq!(lines[2], "2,0.25,0.2,0.05,0.5,0.5,0.875,0.75,0.7");
    }

    #[test]
    fn metrics_row_marks_excluded_categories_empty() {
        let report = MetricsReport {
            per_class_ap: vec![Some(1.0), None, Some(0.5)],
            map: 0.75,
            of1: 0.8,
            cf1: 0.7,
            per_class_precision: vec![1.0, 1.0, 1.0],
            per_class_recall: vec![1.0, 1.0, 0.5],
            excluded_categories: vec![1],
            threshold: 0.5,
        };
        let csv = metrics_csv("abc123def456", "POSITIVE_ONLY", 0.1, 7, &report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run_id,setting,ratio,seed,mAP,OF1,CF1,ap_0,ap_1,ap_2");
        assert_eq!(lines[1], "abc123def456,POSITIVE_ONLY,0.1,7,0.75,0.8,0.7,1,,0.5");
    }

    #[test]
    fn sweep_rows_carry_errors() {
        let cells = vec![
            SweepCell {
                gamma: 0.0,
                alpha: 1.0,
                ratio: 0.1,
                seed: 1,
                map: Some(0.9),
                of1: Some(0.8),
                cf1: Some(0.7),
                error: None,
            },
            SweepCell {
                gamma: -1.0,
                alpha: 1.0,
                ratio: 0.1,
                seed: 1,
                map: None,
                of1: None,
                cf1: None,
                error: Some("gamma must be >= 0".to_string()),
            },
        ];
        let csv = sweep_csv(&cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "0,1,0.1,1,0.9,0.8,0.7,");
        assert!(lines[2].starts_with("-1,1,0.1,1,,,,gamma"));
    }

    #[test]
    fn same_inputs_same_bytes() {
        let r = EpochRecord {
            epoch: 3,
            total_loss: 1.0 / 3.0,
            mean_var: 0.1 + 0.2,
            mean_reg: 0.0,
            mean_tau: 1.0,
            mean_pfactor: 1.0,
            map: Some(2.0 / 3.0),
            of1: None,
            cf1: None,
        };
        assert_eq!(history_csv(&[r.clone()]), history_csv(&[r]));
    }
}
