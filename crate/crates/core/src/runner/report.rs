//! Run records, method reports, and all file outputs of a run.
//!
//! Per-run directory layout:
//!   report.json          final MethodReport
//!   trajectory.csv       per-epoch metrics (plus ALM state for e6)
//!   scores/<m>_<d>.csv   per-sample scores, one file per dataset
//!   roc/<m>_<d>.csv      ROC points per OOD dataset
//!   hist/<m>_<d>.csv     fixed 50-bin score histograms, shared edges
//!   checkpoint.bin       the selected checkpoint
//!
//! `aggregate_reports` collects every report.json under an output root into
//! one results table (JSON + CSV) with one row per run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Method;
use crate::almstate::AlmState;
use crate::metrics::{histogram, RocCurve};
use crate::model::Criterion;
use crate::objectives::MarginPair;
use crate::scoring::ScoreSet;
use crate::{Error, Result};

pub const HIST_BINS: usize = 50;

/// Detection quality of one method on one OOD set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OodMetrics {
    pub auroc: f64,
    pub fpr95: f64,
}

/// ALM state exported once per epoch.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AlmEpochRow {
    pub epoch: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub c1: f64,
    pub c2: f64,
}

impl AlmEpochRow {
    pub fn from_state(epoch: usize, state: &AlmState) -> Self {
        AlmEpochRow {
            epoch,
            lambda1: state.lambda1,
            lambda2: state.lambda2,
            beta1: state.beta1,
            beta2: state.beta2,
            c1: state.c1,
            c2: state.c2,
        }
    }
}

/// Final per-method result row; mirrors the results-table schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub balanced_accuracy: f64,
    /// Keyed by OOD set name (aux_val, far_a, far_b, near).
    pub ood: BTreeMap<String, OodMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margins: Option<MarginPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alm_trajectory: Option<Vec<AlmEpochRow>>,
    /// Diagnostic flags raised during training (collapse, stalls, ...).
    pub flags: Vec<String>,
}

/// One epoch of training history.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

/// Metadata of one tracked checkpoint criterion.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CheckpointMeta {
    pub criterion: Criterion,
    pub epoch: usize,
    pub metric: f64,
}

/// Which checkpoint was selected and why.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SelectedCheckpoint {
    pub criterion: Criterion,
    pub epoch: usize,
    /// Validation balanced accuracy used for cross-criterion selection.
    pub val_balanced_accuracy: f64,
}

/// Everything a run produces, in memory.
#[derive(Debug)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRow>,
    pub checkpoint_meta: Vec<CheckpointMeta>,
    pub selected: SelectedCheckpoint,
    pub selected_checkpoint: crate::model::Checkpoint,
    pub report: MethodReport,
    pub score_sets: Vec<ScoreSet>,
    pub roc_curves: BTreeMap<String, RocCurve>,
    pub alm_trajectory: Option<Vec<AlmEpochRow>>,
}

/// Serialize a MethodReport deterministically (struct field order, BTreeMap
/// keys, shortest-round-trip floats): identical runs give identical bytes.
pub fn report_json(report: &MethodReport) -> String {
    let mut out = serde_json::to_string_pretty(report).expect("report serializes");
    out.push('\n');
    out
}

pub fn write_run_outputs(dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report_json(&record.report))?;

    // trajectory.csv
    let mut csv = String::new();
    if record.alm_trajectory.is_some() {
        csv.push_str(
            "epoch,train_loss,val_loss,val_balanced_accuracy,lambda1,lambda2,beta1,beta2,c1,c2\n",
        );
    } else {
        csv.push_str("epoch,train_loss,val_loss,val_balanced_accuracy\n");
    }
    for row in &record.epochs {
        let _ = write!(
            csv,
            "{},{},{},{}",
            row.epoch, row.train_loss, row.val_loss, row.val_balanced_accuracy
        );
        if let Some(traj) = &record.alm_trajectory {
            if let Some(a) = traj.iter().find(|a| a.epoch == row.epoch) {
                let _ = write!(
                    csv,
                    ",{},{},{},{},{},{}",
                    a.lambda1, a.lambda2, a.beta1, a.beta2, a.c1, a.c2
                );
            } else {
                csv.push_str(",,,,,,");
            }
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("trajectory.csv"), csv)?;

    // scores/
    let scores_dir = dir.join("scores");
    std::fs::create_dir_all(&scores_dir)?;
    for set in &record.score_sets {
        let mut csv = String::from("sample_id,score\n");
        for (id, score) in set.sample_ids.iter().zip(&set.scores) {
            let _ = writeln!(csv, "{id},{score}");
        }
        std::fs::write(
            scores_dir.join(format!("{}_{}.csv", set.method, set.dataset)),
            csv,
        )?;
    }

    // roc/
    let roc_dir = dir.join("roc");
    std::fs::create_dir_all(&roc_dir)?;
    for (name, curve) in &record.roc_curves {
        let mut csv = String::from("fpr,tpr\n");
        for (fpr, tpr) in &curve.points {
            let _ = writeln!(csv, "{fpr},{tpr}");
        }
        std::fs::write(
            roc_dir.join(format!("{}_{}.csv", record.method.name(), name)),
            csv,
        )?;
    }

    // hist/: shared edges over the pooled range of this method's scores.
    let hist_dir = dir.join("hist");
    std::fs::create_dir_all(&hist_dir)?;
    let pooled: Vec<f64> = record
        .score_sets
        .iter()
        .flat_map(|s| s.scores.iter().copied())
        .collect();
    if !pooled.is_empty() {
        let lo = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for set in &record.score_sets {
            let h = histogram(&set.scores, lo, hi, HIST_BINS);
            let mut csv = String::from("bin_lo,bin_hi,count\n");
            for (i, count) in h.counts.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{count}", h.edges[i], h.edges[i + 1]);
            }
            std::fs::write(
                hist_dir.join(format!("{}_{}.csv", set.method, set.dataset)),
                csv,
            )?;
        }
    }
    Ok(())
}

/// A row of the aggregate results table.
#[derive(Clone, Debug, Serialize)]
pub struct ResultsRow {
    pub method: Method,
    pub seed: u64,
    pub balanced_accuracy: f64,
    pub ood: BTreeMap<String, OodMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

/// Collect report.json files from `root` and its immediate subdirectories,
/// sorted by (method, seed). Per-run directories let concurrent runs write
/// without coordination.
pub fn aggregate_reports(root: &Path) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    let mut candidates = vec![root.join("report.json")];
    if root.is_dir() {
        for entry in std::fs::read_dir(root)? {
            let path = entry?.path();
            if path.is_dir() {
                candidates.push(path.join("report.json"));
            }
        }
    }
    for path in candidates {
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let report: MethodReport = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad report {}: {e}", path.display())))?;
        rows.push(ResultsRow {
            method: report.method,
            seed: report.seed,
            balanced_accuracy: report.balanced_accuracy,
            ood: report.ood,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no report.json found under {}",
            root.display()
        )));
    }
    rows.sort_by_key(|r| (r.method, r.seed));
    Ok(ResultsTable { rows })
}

/// Write results_table.json and results_table.csv with the fixed column
/// layout: method, balanced_accuracy, then auroc and fpr95 per OOD set.
pub fn write_results_table(root: &Path, table: &ResultsTable) -> Result<()> {
    let mut json = serde_json::to_string_pretty(table)?;
    json.push('\n');
    std::fs::write(root.join("results_table.json"), json)?;

    // Stable column set: union of OOD set names in key order.
    let mut set_names: Vec<String> = Vec::new();
    for row in &table.rows {
        for name in row.ood.keys() {
            if !set_names.contains(name) {
                set_names.push(name.clone());
            }
        }
    }
    set_names.sort();

    let mut csv = String::from("method,seed,balanced_accuracy");
    for name in &set_names {
        let _ = write!(csv, ",auroc_{name}");
    }
    for name in &set_names {
        let _ = write!(csv, ",fpr95_{name}");
    }
    csv.push('\n');
    for row in &table.rows {
        let _ = write!(csv, "{},{},{}", row.method, row.seed, row.balanced_accuracy);
        for name in &set_names {
            match row.ood.get(name) {
                Some(m) => {
                    let _ = write!(csv, ",{}", m.auroc);
                }
                None => csv.push(','),
            }
        }
        for name in &set_names {
            match row.ood.get(name) {
                Some(m) => {
                    let _ = write!(csv, ",{}", m.fpr95);
                }
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    std::fs::write(root.join("results_table.csv"), csv)?;
    Ok(())
}
