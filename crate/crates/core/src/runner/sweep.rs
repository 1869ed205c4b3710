//! Small targeted hyperparameter sweeps: a config-grid runner capped at
//! eight candidates, selecting by validation balanced accuracy and breaking
//! ties by validation AUROC against the held-out auxiliary OOD split.

use super::config::ExperimentConfig;
use super::train::{fit, FitOutcome};
use crate::data::BenchmarkData;
use crate::metrics::{auroc, balanced_accuracy};
use crate::model::Checkpoint;
use crate::scoring::score_with;
use crate::{Error, Result};

/// Outcome of one swept candidate.
#[derive(Debug)]
pub struct SweepEntry {
    pub index: usize,
    pub val_balanced_accuracy: f64,
    pub val_aux_auroc: f64,
    pub outcome: FitOutcome,
}

/// Fit every candidate config and pick the best one. All candidates must
/// agree on method and data so the comparison is meaningful.
pub fn grid_search(
    candidates: &[ExperimentConfig],
    data: &BenchmarkData,
    e1: Option<&Checkpoint>,
) -> Result<SweepEntry> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("grid_search candidates"));
    }
    if candidates.len() > 8 {
        return Err(Error::InvalidArgument(format!(
            "targeted sweeps are capped at 8 configs, got {}",
            candidates.len()
        )));
    }
    let method = candidates[0].method;
    if candidates.iter().any(|c| c.method != method || c.data != candidates[0].data) {
        return Err(Error::InvalidArgument(
            "sweep candidates must share method and data config".into(),
        ));
    }

    let mut best: Option<SweepEntry> = None;
    for (index, config) in candidates.iter().enumerate() {
        let outcome = fit(config, data, e1)?;
        let val = data.id_val();
        let classes = config.data.classes;
        let preds = {
            let (_, logits) = outcome.params.forward(&val.features)?;
            (0..logits.view_rows())
                .map(|r| {
                    logits.row(r)[..classes]
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        let val_balacc = balanced_accuracy(&preds, &val.labels)?;
        let kind = config.method.score_kind();
        let id_scores = score_with(
            kind,
            &outcome.params.forward(&val.features)?.1,
            classes,
            config.loss.temperature,
        )?;
        let aux_scores = score_with(
            kind,
            &outcome.params.forward(&data.aux_ood_val().features)?.1,
            classes,
            config.loss.temperature,
        )?;
        let val_aux = auroc(&id_scores, &aux_scores)?;

        let better = match &best {
            None => true,
            Some(b) => {
                val_balacc > b.val_balanced_accuracy
                    || (val_balacc == b.val_balanced_accuracy && val_aux > b.val_aux_auroc)
            }
        };
        if better {
            best = Some(SweepEntry {
                index,
                val_balanced_accuracy: val_balacc,
                val_aux_auroc: val_aux,
                outcome,
            });
        }
    }
    Ok(best.expect("at least one candidate"))
}
