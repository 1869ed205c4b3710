//! Test-time OOD scoring functions.
//!
//! Every score follows one orientation: higher means more OOD-like. That
//! convention is what lets the metrics module treat OOD as the positive
//! class uniformly across methods.

use serde::Serialize;

use crate::diffcore::{logsumexp_slice, sigmoid, softmax_slice, Tensor};
use crate::{Error, Result};

/// Scores of one method on one dataset, higher = more OOD-like.
#[derive(Clone, Debug, Serialize)]
pub struct ScoreSet {
    pub method: String,
    pub dataset: String,
    pub sample_ids: Vec<u64>,
    pub scores: Vec<f64>,
}

/// Which scoring function a method uses at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    NegMaxSoftmax,
    OneMinusMaxSigmoid,
    OodClassProbability,
    FreeEnergy,
}

/// Dispatch a scoring function over a logit matrix.
pub fn score_with(
    kind: ScoreKind,
    logits: &Tensor,
    classes: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    match kind {
        ScoreKind::NegMaxSoftmax => Ok(msp_score(logits)),
        ScoreKind::OneMinusMaxSigmoid => Ok(max_sigmoid_score(logits)),
        ScoreKind::OodClassProbability => ood_class_score(logits, classes),
        ScoreKind::FreeEnergy => energy_score(logits, temperature),
    }
}

/// Negative maximum softmax probability, per sample. Range [-1, -1/C].
pub fn msp_score(logits: &Tensor) -> Vec<f64> {
    (0..logits.view_rows())
        .map(|r| {
            let sm = softmax_slice(logits.row(r));
            -sm.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// `1 - max_c sigmoid(z_c)` per sample; near 1 when every head is confident
/// the input is not its class, which independent sigmoids permit.
pub fn max_sigmoid_score(logits: &Tensor) -> Vec<f64> {
    (0..logits.view_rows())
        .map(|r| {
            let max = logits
                .row(r)
                .iter()
                .map(|&z| sigmoid(z))
                .fold(f64::NEG_INFINITY, f64::max);
            1.0 - max
        })
        .collect()
}

/// Sigmoid of the explicit OOD logit (the last of C+1 outputs).
pub fn ood_class_score(logits: &Tensor, classes: usize) -> Result<Vec<f64>> {
    if logits.view_cols() != classes + 1 {
        return Err(Error::InvalidShape {
            op: "ood_class_score",
            expected: format!("logits of width {}", classes + 1),
            got: logits.shape().to_vec(),
        });
    }
    Ok((0..logits.view_rows())
        .map(|r| sigmoid(*logits.row(r).last().unwrap()))
        .collect())
}

/// Free energy `-T log sum_c exp(z_c / T)` per sample, computed directly on
/// logit values. Higher energy is more OOD-like, so this already has the
/// shared score orientation.
pub fn energy_score(logits: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok((0..logits.view_rows())
        .map(|r| {
            let scaled: Vec<f64> = logits.row(r).iter().map(|&z| z / temperature).collect();
            -temperature * logsumexp_slice(&scaled)
        })
        .collect())
}

/// Training-ID embeddings with cached row norms for cosine distances.
#[derive(Clone, Debug)]
pub struct EmbeddingBank {
    rows: Tensor,
    norms: Vec<f64>,
}

impl EmbeddingBank {
    /// Rejects zero-norm rows: cosine distance to them is undefined.
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "EmbeddingBank",
                expected: "matrix of embeddings".into(),
                got: rows.shape().to_vec(),
            });
        }
        let mut norms = Vec::with_capacity(rows.view_rows());
        for r in 0..rows.view_rows() {
            let norm = l2(rows.row(r));
            if norm == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "embedding bank row {r} has zero norm"
                )));
            }
            norms.push(norm);
        }
        Ok(EmbeddingBank { rows, norms })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.view_cols()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cosine distance (1 - cosine similarity) from `embedding` to its k
/// nearest bank rows. Ties are broken by bank row index, so the result is
/// deterministic. Invariant to positive rescaling of the query and of any
/// bank row.
pub fn knn_cosine_score(embedding: &[f64], bank: &EmbeddingBank, k: usize) -> Result<f64> {
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            bank.len()
        )));
    }
    if embedding.len() != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "knn_cosine_score",
            lhs: vec![embedding.len()],
            rhs: vec![bank.dim()],
        });
    }
    let qnorm = l2(embedding);
    if qnorm == 0.0 {
        return Err(Error::InvalidArgument(
            "knn_cosine_score: zero query embedding".into(),
        ));
    }
    let mut distances: Vec<(f64, usize)> = (0..bank.len())
        .map(|r| {
            let row = bank.rows.row(r);
            let dot: f64 = embedding.iter().zip(row).map(|(a, b)| a * b).sum();
            (1.0 - dot / (qnorm * bank.norms[r]), r)
        })
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).expect("cosine distances are finite"));
    Ok(distances.iter().take(k).map(|(d, _)| d).sum::<f64>() / k as f64)
}

/// [`knn_cosine_score`] over every row of an embedding matrix.
pub fn knn_cosine_scores(embeddings: &Tensor, bank: &EmbeddingBank, k: usize) -> Result<Vec<f64>> {
    (0..embeddings.view_rows())
        .map(|r| knn_cosine_score(embeddings.row(r), bank, k))
        .collect()
}
