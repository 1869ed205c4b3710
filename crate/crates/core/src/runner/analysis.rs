//! Embedding-geometry analysis comparing two checkpoints.
//!
//! For each checkpoint: cosine distance of every ID-test and near-OOD sample
//! to its k nearest neighbors in the training ID embedding space, the
//! Wasserstein-1 distance between those two distance distributions, an ROC
//! over the k-NN distances used directly as an OOD score, and the ROC of the
//! checkpoint's own primary score for comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::BenchmarkData;
use crate::diffcore::Tensor;
use crate::metrics::{histogram, roc_curve, wasserstein1, RocCurve};
use crate::model::ModelParams;
use crate::runner::report::HIST_BINS;
use crate::scoring::{knn_cosine_scores, score_with, EmbeddingBank, ScoreKind};
use crate::Result;

/// One checkpoint's half of the analysis.
#[derive(Clone, Debug, Serialize)]
pub struct CheckpointAnalysis {
    pub label: String,
    /// Wasserstein-1 distance between the ID and near-OOD k-NN distance
    /// distributions.
    pub w1_knn_distance: f64,
    pub knn_auroc: f64,
    pub primary_auroc: f64,
    pub id_knn_distances: Vec<f64>,
    pub ood_knn_distances: Vec<f64>,
    #[serde(skip)]
    pub knn_roc: RocCurve,
    #[serde(skip)]
    pub primary_roc: RocCurve,
}

#[derive(Clone, Debug, Serialize)]
pub struct EmbeddingAnalysis {
    pub k: usize,
    pub ood_set: String,
    pub first: CheckpointAnalysis,
    pub second: CheckpointAnalysis,
}

fn analyze_one(
    label: &str,
    params: &ModelParams,
    primary: ScoreKind,
    data: &BenchmarkData,
    ood_features: &Tensor,
    k: usize,
    temperature: f64,
) -> Result<CheckpointAnalysis> {
    let classes = params.dims().classes;
    let bank = EmbeddingBank::new(params.forward(&data.id_train().features)?.0)?;

    let (id_emb, id_logits) = params.forward(&data.id_test().features)?;
    let (ood_emb, ood_logits) = params.forward(ood_features)?;

    let id_knn = knn_cosine_scores(&id_emb, &bank, k)?;
    let ood_knn = knn_cosine_scores(&ood_emb, &bank, k)?;
    let knn_roc = roc_curve(&id_knn, &ood_knn)?;

    let id_primary = score_with(primary, &id_logits, classes, temperature)?;
    let ood_primary = score_with(primary, &ood_logits, classes, temperature)?;
    let primary_roc = roc_curve(&id_primary, &ood_primary)?;

    Ok(CheckpointAnalysis {
        label: label.to_string(),
        w1_knn_distance: wasserstein1(&id_knn, &ood_knn)?,
        knn_auroc: knn_roc.auroc,
        primary_auroc: primary_roc.auroc,
        id_knn_distances: id_knn,
        ood_knn_distances: ood_knn,
        knn_roc,
        primary_roc,
    })
}

/// Compare two checkpoints (canonically the baseline and the energy
/// fine-tuned model) on the named test OOD set.
#[allow(clippy::too_many_arguments)]
pub fn embedding_analysis(
    label_a: &str,
    params_a: &ModelParams,
    primary_a: ScoreKind,
    label_b: &str,
    params_b: &ModelParams,
    primary_b: ScoreKind,
    data: &BenchmarkData,
    ood_set: &str,
    k: usize,
    temperature: f64,
) -> Result<EmbeddingAnalysis> {
    let ood_features = data
        .test_ood_sets()
        .get(ood_set)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown OOD set `{ood_set}`")))?
        .features
        .clone();
    Ok(EmbeddingAnalysis {
        k,
        ood_set: ood_set.to_string(),
        first: analyze_one(label_a, params_a, primary_a, data, &ood_features, k, temperature)?,
        second: analyze_one(label_b, params_b, primary_b, data, &ood_features, k, temperature)?,
    })
}

/// Write the analysis artifacts: summary JSON, ROC point lists, and the
/// k-NN distance histograms on shared bins.
pub fn write_analysis(dir: &Path, analysis: &EmbeddingAnalysis) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(analysis)?;
    json.push('\n');
    std::fs::write(dir.join("analysis.json"), json)?;

    for half in [&analysis.first, &analysis.second] {
        for (tag, curve) in [("knn", &half.knn_roc), ("primary", &half.primary_roc)] {
            let mut csv = String::from("fpr,tpr\n");
            for (fpr, tpr) in &curve.points {
                let _ = writeln!(csv, "{fpr},{tpr}");
            }
            std::fs::write(dir.join(format!("roc_{}_{tag}.csv", half.label)), csv)?;
        }
        let pooled: Vec<f64> = half
            .id_knn_distances
            .iter()
            .chain(&half.ood_knn_distances)
            .copied()
            .collect();
        let lo = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (tag, series) in [
            ("id", &half.id_knn_distances),
            ("ood", &half.ood_knn_distances),
        ] {
            let h = histogram(series, lo, hi, HIST_BINS);
            let mut csv = String::from("bin_lo,bin_hi,count\n");
            for (i, count) in h.counts.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{count}", h.edges[i], h.edges[i + 1]);
            }
            std::fs::write(dir.join(format!("knn_hist_{}_{tag}.csv", half.label)), csv)?;
        }
    }
    Ok(())
}
