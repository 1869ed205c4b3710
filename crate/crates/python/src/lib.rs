//! Python bindings: the scoring functions, evaluation metrics, margin
//! derivation, the gradient-check suite, and a full experiment entry point.
//!
//! Build with `cargo build -p oodlab-python --release` and import the
//! resulting shared library as `oodlab` (see python/smoke_test.py).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use oodlab_core::data::generate;
use oodlab_core::diffcore::Tensor;
use oodlab_core::model::Checkpoint;
use oodlab_core::runner::{
    gradient_check_suite, report_json, run_experiment, write_run_outputs, ExperimentConfig,
    Method,
};
use oodlab_core::{metrics, objectives, scoring};

fn err(e: oodlab_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("logits must have at least one row"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged logit rows"));
    }
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.into_iter().flatten().collect()).map_err(err)
}

/// Negative maximum softmax probability per row; higher = more OOD-like.
#[pyfunction]
fn msp_score(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(scoring::msp_score(&matrix(logits)?))
}

/// 1 - max sigmoid over independent class heads.
#[pyfunction]
fn max_sigmoid_score(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(scoring::max_sigmoid_score(&matrix(logits)?))
}

/// Sigmoid of the explicit OOD logit; rows must have `classes + 1` columns.
#[pyfunction]
fn ood_class_score(logits: Vec<Vec<f64>>, classes: usize) -> PyResult<Vec<f64>> {
    scoring::ood_class_score(&matrix(logits)?, classes).map_err(err)
}

/// Free energy -T log sum exp(z/T) per row.
#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn energy_score(logits: Vec<Vec<f64>>, temperature: f64) -> PyResult<Vec<f64>> {
    scoring::energy_score(&matrix(logits)?, temperature).map_err(err)
}

/// Mean cosine distance from `embedding` to its k nearest bank rows.
#[pyfunction]
fn knn_cosine_score(embedding: Vec<f64>, bank: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let bank = scoring::EmbeddingBank::new(matrix(bank)?).map_err(err)?;
    scoring::knn_cosine_score(&embedding, &bank, k).map_err(err)
}

/// Probability a random OOD score exceeds a random ID score (ties at 1/2).
#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&id_scores, &ood_scores).map_err(err)
}

/// False positive rate at 95% true positive rate.
#[pyfunction]
fn fpr_at_95_tpr(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    metrics::fpr_at_95_tpr(&id_scores, &ood_scores).map_err(err)
}

/// Empirical 1-D Wasserstein distance between two samples.
#[pyfunction]
fn wasserstein1(samples_a: Vec<f64>, samples_b: Vec<f64>) -> PyResult<f64> {
    metrics::wasserstein1(&samples_a, &samples_b).map_err(err)
}

/// Unweighted mean of per-class recalls.
#[pyfunction]
fn balanced_accuracy(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::balanced_accuracy(&predictions, &labels).map_err(err)
}

/// Median energies of validation splits: (m_in, m_out).
#[pyfunction]
fn derive_margins(
    val_id_energies: Vec<f64>,
    val_ood_energies: Vec<f64>,
) -> PyResult<(f64, f64)> {
    let m = objectives::derive_margins(&val_id_energies, &val_ood_energies).map_err(err)?;
    Ok((m.m_in, m.m_out))
}

/// Finite-difference verification of every objective; returns
/// [(objective, max_rel_error)].
#[pyfunction]
#[pyo3(signature = (seed=7, points=3))]
fn gradient_check(seed: u64, points: usize) -> PyResult<Vec<(String, f64)>> {
    let results = gradient_check_suite(seed, points).map_err(err)?;
    Ok(results
        .into_iter()
        .map(|c| (c.name.to_string(), c.max_rel_error))
        .collect())
}

/// Run one experiment arm and return its report as a JSON string.
///
/// `config_toml` uses the same format as the CLI; `method` and `seed`
/// override the file; `e1_checkpoint` is required for e4/e5a/e5b/e6;
/// `out_dir`, when given, receives the full run artifacts.
#[pyfunction]
#[pyo3(signature = (config_toml="", method=None, seed=None, e1_checkpoint=None, out_dir=None))]
fn run_method(
    config_toml: &str,
    method: Option<&str>,
    seed: Option<u64>,
    e1_checkpoint: Option<&str>,
    out_dir: Option<&str>,
) -> PyResult<String> {
    let mut config = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    if let Some(m) = method {
        config.method = Method::parse(m).map_err(err)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(path) = e1_checkpoint {
        config.e1_checkpoint = Some(path.into());
    }
    config.validate().map_err(err)?;

    let ckpt = match (&config.method.needs_e1_checkpoint(), &config.e1_checkpoint) {
        (true, Some(path)) => Some(Checkpoint::load(path).map_err(err)?),
        (true, None) => {
            return Err(PyValueError::new_err(format!(
                "method {} requires e1_checkpoint",
                config.method
            )))
        }
        (false, _) => None,
    };
    let data = generate(&config.data).map_err(err)?;
    let record = run_experiment(&config, &data, ckpt.as_ref()).map_err(err)?;
    if let Some(dir) = out_dir {
        let dir = std::path::Path::new(dir);
        write_run_outputs(dir, &record).map_err(err)?;
        record
            .selected_checkpoint
            .save(&dir.join("checkpoint.bin"))
            .map_err(err)?;
    }
    Ok(report_json(&record.report))
}

/// Generate the synthetic benchmark and write it as CSV files.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=""))]
fn gen_data(out_dir: &str, config_toml: &str) -> PyResult<()> {
    use oodlab_core::data::{export_labeled_csv, export_unlabeled_csv};
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    let data = generate(&config.data).map_err(err)?;
    let out = std::path::Path::new(out_dir);
    std::fs::create_dir_all(out).map_err(|e| PyValueError::new_err(e.to_string()))?;
    export_labeled_csv(&out.join("id_train.csv"), data.id_train()).map_err(err)?;
    export_labeled_csv(&out.join("id_wild_pool.csv"), data.id_wild_pool()).map_err(err)?;
    export_labeled_csv(&out.join("id_val.csv"), data.id_val()).map_err(err)?;
    export_labeled_csv(&out.join("id_test.csv"), data.id_test()).map_err(err)?;
    export_unlabeled_csv(&out.join("aux_ood_train.csv"), data.aux_ood_train()).map_err(err)?;
    export_unlabeled_csv(&out.join("aux_ood_val.csv"), data.aux_ood_val()).map_err(err)?;
    export_unlabeled_csv(&out.join("wild_train.csv"), data.wild_train()).map_err(err)?;
    for (name, set) in data.test_ood_sets() {
        export_unlabeled_csv(&out.join(format!("ood_{name}.csv")), set).map_err(err)?;
    }
    Ok(())
}

#[pymodule]
fn oodlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(msp_score, m)?)?;
    m.add_function(wrap_pyfunction!(max_sigmoid_score, m)?)?;
    m.add_function(wrap_pyfunction!(ood_class_score, m)?)?;
    m.add_function(wrap_pyfunction!(energy_score, m)?)?;
    m.add_function(wrap_pyfunction!(knn_cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_95_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(derive_margins, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_method, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    Ok(())
}
