//! Training loops for every experiment arm, checkpoint tracking, and final
//! evaluation.
//!
//! Shared recipe across arms: inverse-frequency sampling of the ID training
//! split, AdamW with the warmup/inverse-root schedule, three tracked
//! checkpoints (best train loss, best val loss, best val balanced accuracy),
//! and cross-criterion selection by validation balanced accuracy with ties
//! broken by earliest epoch. Fine-tuning arms (e4, e5b, e6) start from the
//! e1 checkpoint at a reduced learning rate with a classification-only
//! warmup period.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Method};
use super::optim::{AdamW, LrSchedule, NoamSchedule};
use super::report::{
    AlmEpochRow, CheckpointMeta, EpochRow, MethodReport, OodMetrics, RunRecord, SelectedCheckpoint,
};
use crate::almstate::{alm_epoch_update, alm_objective, ood_detector_loss, AlmConfig, AlmState, TargetSide};
use crate::data::{cycle_shorter, inverse_frequency_sampler, stream_seed, BenchmarkData, LabeledSet, UnlabeledSet};
use crate::diffcore::{softplus, Graph, Tensor};
use crate::metrics::{self, balanced_accuracy, fpr_at_95_tpr, roc_curve};
use crate::model::{init_params, Checkpoint, Criterion, HeadKind, ModelDims, ModelParams};
use crate::objectives::{
    bce_multi, combined_energy_objective, combined_oe_objective, cross_entropy, derive_margins,
    energy_hinge_loss, free_energy, oe_uniform_loss, MarginPair,
};
use crate::scoring::{energy_score, score_with, ScoreKind, ScoreSet};
use crate::{Error, Result};

/// Epochs with no hinge-loss improvement before the margin stall flag fires.
const MARGIN_STALL_EPOCHS: usize = 5;
/// Slack above 1/C for the uniform-collapse detector.
const COLLAPSE_EPSILON: f64 = 0.05;

/// Everything the fit phase produces; evaluation is a separate step so
/// provenance over data access can be asserted on training alone.
#[derive(Debug)]
pub struct FitOutcome {
    pub method: Method,
    pub params: ModelParams,
    pub selected: SelectedCheckpoint,
    pub selected_checkpoint: Checkpoint,
    pub checkpoint_meta: Vec<CheckpointMeta>,
    pub epochs: Vec<EpochRow>,
    pub flags: Vec<String>,
    pub margins: Option<MarginPair>,
    pub alm_trajectory: Option<Vec<AlmEpochRow>>,
    /// Digest of the parameters the run started from (lineage evidence).
    pub initial_digest: String,
}

impl Method {
    pub fn head_kind(&self) -> HeadKind {
        match self {
            Method::E1 | Method::E4 | Method::E5a | Method::E5b | Method::E6 => HeadKind::SoftmaxC,
            Method::E2 => HeadKind::SigmoidC,
            Method::E3 => HeadKind::SigmoidCPlus1,
        }
    }

    pub fn score_kind(&self) -> ScoreKind {
        match self {
            Method::E1 | Method::E4 => ScoreKind::NegMaxSoftmax,
            Method::E2 => ScoreKind::OneMinusMaxSigmoid,
            Method::E3 => ScoreKind::OodClassProbability,
            Method::E5a | Method::E5b | Method::E6 => ScoreKind::FreeEnergy,
        }
    }
}

/// Train (or rescore) one method. `e1` must be the baseline checkpoint for
/// the fine-tuning arms and e5a.
pub fn fit(
    config: &ExperimentConfig,
    data: &BenchmarkData,
    e1: Option<&Checkpoint>,
) -> Result<FitOutcome> {
    config.validate()?;
    let e1 = |method: Method| -> Result<&Checkpoint> {
        e1.ok_or_else(|| Error::Config(format!("method {method} requires an e1 checkpoint")))
    };
    match config.method {
        Method::E1 => fit_e1_family(config, data, Method::E1),
        Method::E2 => fit_e1_family(config, data, Method::E2),
        Method::E3 => fit_e3(config, data),
        Method::E4 => fit_e4(config, data, e1(Method::E4)?),
        Method::E5a => rescore_e5a(config, e1(Method::E5a)?),
        Method::E5b => fit_e5b(config, data, e1(Method::E5b)?),
        Method::E6 => fit_e6(config, data, e1(Method::E6)?),
    }
}

/// Fit then evaluate; the standard entry point.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &BenchmarkData,
    e1: Option<&Checkpoint>,
) -> Result<RunRecord> {
    let outcome = fit(config, data, e1)?;
    evaluate(config, data, outcome)
}

fn model_dims(config: &ExperimentConfig) -> Result<ModelDims> {
    ModelDims::new(
        config.data.feature_dim,
        config.model.hidden.clone(),
        config.model.embedding,
        config.data.classes,
    )
}

// ---------------------------------------------------------------------------
// Checkpoint tracking
// ---------------------------------------------------------------------------

struct Snapshot {
    checkpoint: Checkpoint,
    /// Validation loss at the snapshot epoch, used by banded selection.
    val_loss: f64,
}

struct Tracker {
    snaps: Vec<Snapshot>,
}

impl Tracker {
    fn new(params: &ModelParams) -> Self {
        let snaps = [
            Criterion::BestTrainLoss,
            Criterion::BestValLoss,
            Criterion::BestValBalancedAccuracy,
        ]
        .into_iter()
        .map(|criterion| Snapshot {
            checkpoint: Checkpoint {
                params: params.clone(),
                criterion,
                epoch: 0,
                metric: criterion.start_value(),
            },
            val_loss: f64::INFINITY,
        })
        .collect();
        Tracker { snaps }
    }

    fn observe(
        &mut self,
        params: &ModelParams,
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        val_balacc: f64,
    ) {
        for snap in &mut self.snaps {
            let candidate = match snap.checkpoint.criterion {
                Criterion::BestTrainLoss => train_loss,
                Criterion::BestValLoss => val_loss,
                Criterion::BestValBalancedAccuracy => val_balacc,
            };
            if snap.checkpoint.criterion.improves(candidate, snap.checkpoint.metric) {
                snap.checkpoint.params = params.clone();
                snap.checkpoint.epoch = epoch;
                snap.checkpoint.metric = candidate;
                snap.val_loss = val_loss;
            }
        }
    }

    fn meta(&self) -> Vec<CheckpointMeta> {
        self.snaps
            .iter()
            .map(|s| CheckpointMeta {
                criterion: s.checkpoint.criterion,
                epoch: s.checkpoint.epoch,
                metric: s.checkpoint.metric,
            })
            .collect()
    }

    /// Evaluate the three snapshots on validation balanced accuracy and pick
    /// the maximum; ties break toward the earliest epoch.
    fn select(
        &self,
        val_balacc: impl Fn(&ModelParams) -> Result<f64>,
    ) -> Result<(Checkpoint, SelectedCheckpoint)> {
        let mut best: Option<(f64, &Checkpoint)> = None;
        for snap in &self.snaps {
            let ckpt = &snap.checkpoint;
            let acc = val_balacc(&ckpt.params)?;
            let better = match &best {
                None => true,
                Some((best_acc, incumbent)) => {
                    acc > *best_acc || (acc == *best_acc && ckpt.epoch < incumbent.epoch)
                }
            };
            if better {
                best = Some((acc, ckpt));
            }
        }
        let (acc, ckpt) = best.expect("tracker has three snapshots");
        Self::selection(ckpt, acc)
    }

    /// Selection for fine-tuning arms. The OOD objective legitimately trades
    /// a little accuracy, so strict accuracy-maximal selection would always
    /// return the classification-warmup snapshot and nullify fine-tuning.
    /// Among snapshots within `ACCURACY_BAND` of the best validation
    /// balanced accuracy, pick the lowest validation loss (which carries the
    /// OOD term); ties break toward the earliest epoch.
    fn select_banded(
        &self,
        val_balacc: impl Fn(&ModelParams) -> Result<f64>,
    ) -> Result<(Checkpoint, SelectedCheckpoint)> {
        let accs: Vec<f64> = self
            .snaps
            .iter()
            .map(|s| val_balacc(&s.checkpoint.params))
            .collect::<Result<_>>()?;
        let best_acc = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best: Option<(f64, &Checkpoint, f64)> = None;
        for (snap, &acc) in self.snaps.iter().zip(&accs) {
            if acc < best_acc - ACCURACY_BAND {
                continue;
            }
            let better = match &best {
                None => true,
                Some((best_loss, incumbent, _)) => {
                    snap.val_loss < *best_loss
                        || (snap.val_loss == *best_loss && snap.checkpoint.epoch < incumbent.epoch)
                }
            };
            if better {
                best = Some((snap.val_loss, &snap.checkpoint, acc));
            }
        }
        let (_, ckpt, acc) = best.expect("band always contains the best-accuracy snapshot");
        Self::selection(ckpt, acc)
    }

    fn selection(ckpt: &Checkpoint, acc: f64) -> Result<(Checkpoint, SelectedCheckpoint)> {
        let mut selected = ckpt.clone();
        selected.metric = acc;
        Ok((
            selected,
            SelectedCheckpoint {
                criterion: ckpt.criterion,
                epoch: ckpt.epoch,
                val_balanced_accuracy: acc,
            },
        ))
    }
}

/// Validation balanced-accuracy slack granted to fine-tuned snapshots.
const ACCURACY_BAND: f64 = 0.01;

// ---------------------------------------------------------------------------
// Shared forward/eval helpers
// ---------------------------------------------------------------------------

fn forward_logits(params: &ModelParams, features: &Tensor) -> Result<Tensor> {
    Ok(params.forward(features)?.1)
}

/// Argmax over the first C logits: the classifier prediction for every head
/// kind (the explicit OOD logit never competes for class predictions).
fn predict_classes(params: &ModelParams, features: &Tensor, classes: usize) -> Result<Vec<usize>> {
    let logits = forward_logits(params, features)?;
    Ok((0..logits.view_rows())
        .map(|r| {
            let row = &logits.row(r)[..classes];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("logits are finite"))
                .map(|(i, _)| i)
                .expect("at least one class")
        })
        .collect())
}

fn id_val_balacc(params: &ModelParams, val: &LabeledSet, classes: usize) -> Result<f64> {
    let preds = predict_classes(params, &val.features, classes)?;
    balanced_accuracy(&preds, &val.labels)
}

fn val_ce_loss(params: &ModelParams, val: &LabeledSet, classes: usize) -> Result<f64> {
    let all: Vec<usize> = (0..val.len()).collect();
    let labels = val.onehot(&all, classes);
    let mut graph = Graph::new();
    let fwd = params.forward_graph(&mut graph, &val.features)?;
    let loss = cross_entropy(&mut graph, fwd.logits, &labels)?;
    Ok(graph.value(loss).scalar_value())
}

fn val_bce_loss(params: &ModelParams, features: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut graph = Graph::new();
    let fwd = params.forward_graph(&mut graph, features)?;
    let loss = bce_multi(&mut graph, fwd.logits, labels)?;
    Ok(graph.value(loss).scalar_value())
}

fn energies_of(params: &ModelParams, features: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    energy_score(&forward_logits(params, features)?, temperature)
}

fn check_finite(loss: f64, method: Method, epoch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged(format!(
            "{method} produced non-finite loss at epoch {epoch}"
        )))
    }
}

/// One optimizer step from a recorded graph loss.
struct StepEngine {
    opt: AdamW,
    schedule: LrSchedule,
    global_step: u64,
}

impl StepEngine {
    fn new(params: &ModelParams, lr: f64, warmup_steps: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        StepEngine {
            opt: AdamW::new(&shapes, weight_decay),
            schedule: LrSchedule::Noam(NoamSchedule::new(lr, warmup_steps)),
            global_step: 0,
        }
    }

    /// Fine-tuning engine: constant reduced learning rate, no re-warmup.
    fn fine_tune(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        StepEngine {
            opt: AdamW::new(&shapes, weight_decay),
            schedule: LrSchedule::Constant(lr),
            global_step: 0,
        }
    }

    fn apply(
        &mut self,
        params: &mut ModelParams,
        graph: &Graph,
        loss: crate::diffcore::NodeId,
        param_ids: &[crate::diffcore::NodeId],
    ) -> Result<()> {
        let grads = graph.backward(loss)?;
        let grad_tensors: Vec<Tensor> = param_ids
            .iter()
            .zip(params.tensors())
            .map(|(&id, t)| grads.get_or_zero(id, t.shape()))
            .collect();
        self.global_step += 1;
        let lr = self.schedule.lr_at(self.global_step);
        self.opt.step(params.tensors_mut(), &grad_tensors, lr);
        Ok(())
    }
}

/// Draw one epoch of sample indices from the class-balancing sampler,
/// chunked into batches; ceil(n / batch) steps per epoch.
fn epoch_batches(
    sampler: &mut crate::data::InverseFrequencySampler,
    n: usize,
    batch: usize,
) -> Vec<Vec<usize>> {
    let draws: Vec<usize> = sampler.take(n).collect();
    draws.chunks(batch).map(|c| c.to_vec()).collect()
}

// ---------------------------------------------------------------------------
// e1 / e2: ID-only training
// ---------------------------------------------------------------------------

fn fit_e1_family(
    config: &ExperimentConfig,
    data: &BenchmarkData,
    method: Method,
) -> Result<FitOutcome> {
    let classes = config.data.classes;
    let train = data.id_train();
    let val = data.id_val();
    let dims = model_dims(config)?;
    let mut params = init_params(&dims, method.head_kind(), stream_seed(config.seed, "init"))?;
    let initial_digest = params.digest();

    let mut sampler =
        inverse_frequency_sampler(&train.labels, stream_seed(config.seed, "sampler"))?;
    let mut engine = StepEngine::new(
        &params,
        config.training.lr,
        config.scaled_warmup_steps(train.len()),
        config.training.weight_decay,
    );
    let mut tracker = Tracker::new(&params);
    let mut epochs = Vec::new();

    let val_all: Vec<usize> = (0..val.len()).collect();
    let val_labels = val.onehot(&val_all, classes);

    for epoch in 1..=config.training.epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(&mut sampler, train.len(), config.training.batch_size);
        let steps = batches.len();
        for idx in batches {
            let x = train.batch(&idx);
            let labels = train.onehot(&idx, classes);
            let mut graph = Graph::new();
            let fwd = params.forward_graph(&mut graph, &x)?;
            let loss = match method {
                Method::E1 => cross_entropy(&mut graph, fwd.logits, &labels)?,
                Method::E2 => bce_multi(&mut graph, fwd.logits, &labels)?,
                _ => unreachable!("fit_e1_family only handles e1/e2"),
            };
            loss_sum += check_finite(graph.value(loss).scalar_value(), method, epoch)?;
            engine.apply(&mut params, &graph, loss, &fwd.param_ids)?;
        }
        let train_loss = loss_sum / steps as f64;
        let val_loss = match method {
            Method::E1 => val_ce_loss(&params, val, classes)?,
            _ => val_bce_loss(&params, &val.features, &val_labels)?,
        };
        let val_acc = id_val_balacc(&params, val, classes)?;
        tracker.observe(&params, epoch, train_loss, val_loss, val_acc);
        epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_balanced_accuracy: val_acc,
        });
    }

    let (selected_checkpoint, selected) =
        tracker.select(|p| id_val_balacc(p, val, classes))?;
    Ok(FitOutcome {
        method,
        params: selected_checkpoint.params.clone(),
        selected,
        selected_checkpoint,
        checkpoint_meta: tracker.meta(),
        epochs,
        flags: vec![],
        margins: None,
        alm_trajectory: None,
        initial_digest,
    })
}

// ---------------------------------------------------------------------------
// e3: explicit OOD class on ID + auxiliary OOD
// ---------------------------------------------------------------------------

/// Merge an ID split with an OOD split; OOD rows get label C.
fn merge_with_ood(id: &LabeledSet, ood: &UnlabeledSet, classes: usize) -> LabeledSet {
    let d = id.feature_dim();
    let mut features = id.features.data().to_vec();
    features.extend_from_slice(ood.features.data());
    let mut labels = id.labels.clone();
    labels.extend(std::iter::repeat_n(classes, ood.len()));
    let mut ids = id.ids.clone();
    ids.extend_from_slice(&ood.ids);
    LabeledSet {
        ids,
        features: Tensor::new(vec![labels.len(), d], features).expect("sized by construction"),
        labels,
    }
}

fn fit_e3(config: &ExperimentConfig, data: &BenchmarkData) -> Result<FitOutcome> {
    let classes = config.data.classes;
    // Fresh initialization: a new class disrupts a fine-tuned feature space,
    // so e3 does not descend from the e1 checkpoint.
    let dims = model_dims(config)?;
    let mut params = init_params(&dims, HeadKind::SigmoidCPlus1, stream_seed(config.seed, "init"))?;
    let initial_digest = params.digest();

    let train = merge_with_ood(data.id_train(), data.aux_ood_train(), classes);
    let val = merge_with_ood(data.id_val(), data.aux_ood_val(), classes);
    let val_all: Vec<usize> = (0..val.len()).collect();
    // One-hot over C+1: OOD rows are (0,...,0,1).
    let val_labels = val.onehot(&val_all, classes + 1);

    let mut sampler =
        inverse_frequency_sampler(&train.labels, stream_seed(config.seed, "sampler"))?;
    let mut engine = StepEngine::new(
        &params,
        config.training.lr,
        config.scaled_warmup_steps(train.len()),
        config.training.weight_decay,
    );
    let mut tracker = Tracker::new(&params);
    let mut epochs = Vec::new();

    // Selection metric: balanced accuracy over C+1 classes on the merged
    // validation split (argmax over every head).
    let val_union_balacc = |p: &ModelParams| -> Result<f64> {
        let preds = predict_classes(p, &val.features, classes + 1)?;
        balanced_accuracy(&preds, &val.labels)
    };

    for epoch in 1..=config.training.epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(&mut sampler, train.len(), config.training.batch_size);
        let steps = batches.len();
        for idx in batches {
            let x = train.batch(&idx);
            let labels = train.onehot(&idx, classes + 1);
            let mut graph = Graph::new();
            let fwd = params.forward_graph(&mut graph, &x)?;
            let loss = bce_multi(&mut graph, fwd.logits, &labels)?;
            loss_sum += check_finite(graph.value(loss).scalar_value(), Method::E3, epoch)?;
            engine.apply(&mut params, &graph, loss, &fwd.param_ids)?;
        }
        let train_loss = loss_sum / steps as f64;
        let val_loss = val_bce_loss(&params, &val.features, &val_labels)?;
        let val_acc = val_union_balacc(&params)?;
        tracker.observe(&params, epoch, train_loss, val_loss, val_acc);
        epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_balanced_accuracy: val_acc,
        });
    }

    let (selected_checkpoint, selected) = tracker.select(val_union_balacc)?;
    Ok(FitOutcome {
        method: Method::E3,
        params: selected_checkpoint.params.clone(),
        selected,
        selected_checkpoint,
        checkpoint_meta: tracker.meta(),
        epochs,
        flags: vec![],
        margins: None,
        alm_trajectory: None,
        initial_digest,
    })
}

// ---------------------------------------------------------------------------
// Paired-batch fine-tuning scaffolding (e4, e5b, e6)
// ---------------------------------------------------------------------------

fn load_finetune_start(
    config: &ExperimentConfig,
    e1: &Checkpoint,
) -> Result<(ModelParams, String)> {
    if e1.params.head_kind() != HeadKind::SoftmaxC {
        return Err(Error::Config(
            "fine-tuning expects a softmax-head e1 checkpoint".into(),
        ));
    }
    let dims = model_dims(config)?;
    if e1.params.dims() != &dims {
        return Err(Error::Config(format!(
            "e1 checkpoint dims {:?} do not match config dims {dims:?}",
            e1.params.dims()
        )));
    }
    let params = e1.params.clone();
    let digest = params.digest();
    Ok((params, digest))
}

/// Per-epoch orders for paired fine-tuning: one epoch of sampler draws on
/// the ID side, a fresh shuffle on the OOD side, and the cycling pair
/// stream over positions.
type PairedEpoch = (Vec<usize>, Vec<usize>, Vec<(Vec<usize>, Vec<usize>)>);

fn paired_epoch(
    sampler: &mut crate::data::InverseFrequencySampler,
    ood_len: usize,
    rng: &mut ChaCha8Rng,
    train_len: usize,
    batch: usize,
) -> Result<PairedEpoch> {
    let id_order: Vec<usize> = sampler.take(train_len).collect();
    let mut ood_order: Vec<usize> = (0..ood_len).collect();
    ood_order.shuffle(rng);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> =
        cycle_shorter(train_len, ood_len, batch)?.collect();
    Ok((id_order, ood_order, pairs))
}

fn fit_e4(config: &ExperimentConfig, data: &BenchmarkData, e1: &Checkpoint) -> Result<FitOutcome> {
    let classes = config.data.classes;
    let train = data.id_train();
    let val = data.id_val();
    let aux = data.aux_ood_train();
    let aux_val = data.aux_ood_val();
    let (mut params, initial_digest) = load_finetune_start(config, e1)?;

    let mut sampler =
        inverse_frequency_sampler(&train.labels, stream_seed(config.seed, "sampler"))?;
    let mut ood_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "ood-order"));
    let mut engine = StepEngine::fine_tune(
        &params,
        config.training.lr * config.training.fine_tune_lr_factor,
        config.training.weight_decay,
    );
    let mut tracker = Tracker::new(&params);
    let mut epochs = Vec::new();
    let mut flags = Vec::new();

    for epoch in 1..=config.training.epochs {
        let cls_only = epoch <= config.training.warmup_cls_epochs;
        let (id_order, ood_order, pairs) = paired_epoch(
            &mut sampler,
            aux.len(),
            &mut ood_rng,
            train.len(),
            config.training.batch_size,
        )?;
        let mut loss_sum = 0.0;
        let steps = pairs.len();
        for (a_pos, b_pos) in pairs {
            let id_idx: Vec<usize> = a_pos.iter().map(|&p| id_order[p]).collect();
            let ood_idx: Vec<usize> = b_pos.iter().map(|&p| ood_order[p]).collect();
            let x = train.batch(&id_idx);
            let labels = train.onehot(&id_idx, classes);
            let mut graph = Graph::new();
            // Both forward passes share one set of parameter inputs so their
            // gradients accumulate together.
            let param_ids = params.param_inputs(&mut graph);
            let (_, logits) = params.forward_with(&mut graph, &param_ids, &x)?;
            let ce = cross_entropy(&mut graph, logits, &labels)?;
            let loss = if cls_only {
                ce
            } else {
                let (_, ood_logits) =
                    params.forward_with(&mut graph, &param_ids, &aux.batch(&ood_idx))?;
                let oe = oe_uniform_loss(&mut graph, ood_logits)?;
                combined_oe_objective(&mut graph, ce, oe, config.loss.lambda_oe)?
            };
            loss_sum += check_finite(graph.value(loss).scalar_value(), Method::E4, epoch)?;
            engine.apply(&mut params, &graph, loss, &param_ids)?;
        }
        let train_loss = loss_sum / steps as f64;
        // Validation objective mirrors training: CE plus the uniformity term
        // on held-out auxiliary OOD.
        let val_loss = {
            let ce = val_ce_loss(&params, val, classes)?;
            let mut graph = Graph::new();
            let fwd = params.forward_graph(&mut graph, &aux_val.features)?;
            let oe = oe_uniform_loss(&mut graph, fwd.logits)?;
            ce + config.loss.lambda_oe * graph.value(oe).scalar_value()
        };
        let val_acc = id_val_balacc(&params, val, classes)?;
        // Collapse detector: mean max softmax on ID validation.
        let logits = forward_logits(&params, &val.features)?;
        let mean_max_softmax: f64 = (0..logits.view_rows())
            .map(|r| {
                crate::diffcore::softmax_slice(logits.row(r))
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / logits.view_rows() as f64;
        if mean_max_softmax < 1.0 / classes as f64 + COLLAPSE_EPSILON {
            let flag = format!("oe_collapse:epoch_{epoch}");
            if !flags.iter().any(|f: &String| f.starts_with("oe_collapse")) {
                flags.push(flag);
            }
        }
        tracker.observe(&params, epoch, train_loss, val_loss, val_acc);
        epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_balanced_accuracy: val_acc,
        });
    }

    let (selected_checkpoint, selected) = tracker.select_banded(|p| id_val_balacc(p, val, classes))?;
    Ok(FitOutcome {
        method: Method::E4,
        params: selected_checkpoint.params.clone(),
        selected,
        selected_checkpoint,
        checkpoint_meta: tracker.meta(),
        epochs,
        flags,
        margins: None,
        alm_trajectory: None,
        initial_digest,
    })
}

fn rescore_e5a(config: &ExperimentConfig, e1: &Checkpoint) -> Result<FitOutcome> {
    let (params, initial_digest) = load_finetune_start(config, e1)?;
    Ok(FitOutcome {
        method: Method::E5a,
        params,
        selected: SelectedCheckpoint {
            criterion: e1.criterion,
            epoch: e1.epoch,
            val_balanced_accuracy: e1.metric,
        },
        selected_checkpoint: e1.clone(),
        checkpoint_meta: vec![CheckpointMeta {
            criterion: e1.criterion,
            epoch: e1.epoch,
            metric: e1.metric,
        }],
        epochs: vec![],
        flags: vec![],
        margins: None,
        alm_trajectory: None,
        initial_digest,
    })
}

fn fit_e5b(config: &ExperimentConfig, data: &BenchmarkData, e1: &Checkpoint) -> Result<FitOutcome> {
    let classes = config.data.classes;
    let t = config.loss.temperature;
    let train = data.id_train();
    let val = data.id_val();
    let aux = data.aux_ood_train();
    let aux_val = data.aux_ood_val();
    let (mut params, initial_digest) = load_finetune_start(config, e1)?;

    // Margins from the e1 checkpoint's validation energies, frozen for the
    // whole fine-tuning run unless overridden.
    let margins = match config.margins {
        Some(m) => m,
        None => {
            let id_e = energies_of(&e1.params, &val.features, t)?;
            let ood_e = energies_of(&e1.params, &aux_val.features, t)?;
            derive_margins(&id_e, &ood_e)?
        }
    };

    let mut sampler =
        inverse_frequency_sampler(&train.labels, stream_seed(config.seed, "sampler"))?;
    let mut ood_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "ood-order"));
    let mut engine = StepEngine::fine_tune(
        &params,
        config.training.lr * config.training.fine_tune_lr_factor,
        config.training.weight_decay,
    );
    let mut tracker = Tracker::new(&params);
    let mut epochs = Vec::new();
    let mut flags = Vec::new();
    let mut best_hinge = f64::INFINITY;
    let mut stall_epochs = 0usize;

    for epoch in 1..=config.training.epochs {
        let cls_only = epoch <= config.training.warmup_cls_epochs;
        let (id_order, ood_order, pairs) = paired_epoch(
            &mut sampler,
            aux.len(),
            &mut ood_rng,
            train.len(),
            config.training.batch_size,
        )?;
        let mut loss_sum = 0.0;
        let mut hinge_sum = 0.0;
        let steps = pairs.len();
        for (a_pos, b_pos) in pairs {
            let id_idx: Vec<usize> = a_pos.iter().map(|&p| id_order[p]).collect();
            let ood_idx: Vec<usize> = b_pos.iter().map(|&p| ood_order[p]).collect();
            let x = train.batch(&id_idx);
            let labels = train.onehot(&id_idx, classes);
            let mut graph = Graph::new();
            let param_ids = params.param_inputs(&mut graph);
            let (_, logits) = params.forward_with(&mut graph, &param_ids, &x)?;
            let ce = cross_entropy(&mut graph, logits, &labels)?;
            let loss = if cls_only {
                ce
            } else {
                let (_, ood_logits) =
                    params.forward_with(&mut graph, &param_ids, &aux.batch(&ood_idx))?;
                let id_energy = free_energy(&mut graph, logits, t)?;
                let ood_energy = free_energy(&mut graph, ood_logits, t)?;
                let hinge = energy_hinge_loss(&mut graph, id_energy, ood_energy, &margins)?;
                hinge_sum += graph.value(hinge).scalar_value();
                combined_energy_objective(&mut graph, ce, hinge, config.loss.lambda_energy)?
            };
            loss_sum += check_finite(graph.value(loss).scalar_value(), Method::E5b, epoch)?;
            engine.apply(&mut params, &graph, loss, &param_ids)?;
        }
        let train_loss = loss_sum / steps as f64;
        if !cls_only {
            let epoch_hinge = hinge_sum / steps as f64;
            if epoch_hinge < best_hinge - 1e-12 {
                best_hinge = epoch_hinge;
                stall_epochs = 0;
            } else {
                stall_epochs += 1;
                if stall_epochs >= MARGIN_STALL_EPOCHS
                    && !flags.iter().any(|f: &String| f.starts_with("energy_margin_stall"))
                {
                    flags.push(format!("energy_margin_stall:epoch_{epoch}"));
                }
            }
        }
        let val_loss = {
            let ce = val_ce_loss(&params, val, classes)?;
            let id_e = energies_of(&params, &val.features, t)?;
            let ood_e = energies_of(&params, &aux_val.features, t)?;
            let mut graph = Graph::new();
            let id_node = graph.input(Tensor::vector(id_e));
            let ood_node = graph.input(Tensor::vector(ood_e));
            let hinge = energy_hinge_loss(&mut graph, id_node, ood_node, &margins)?;
            ce + config.loss.lambda_energy * graph.value(hinge).scalar_value()
        };
        let val_acc = id_val_balacc(&params, val, classes)?;
        tracker.observe(&params, epoch, train_loss, val_loss, val_acc);
        epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_balanced_accuracy: val_acc,
        });
    }

    let (selected_checkpoint, selected) = tracker.select_banded(|p| id_val_balacc(p, val, classes))?;
    Ok(FitOutcome {
        method: Method::E5b,
        params: selected_checkpoint.params.clone(),
        selected,
        selected_checkpoint,
        checkpoint_meta: tracker.meta(),
        epochs,
        flags,
        margins: Some(margins),
        alm_trajectory: None,
        initial_digest,
    })
}

fn fit_e6(config: &ExperimentConfig, data: &BenchmarkData, e1: &Checkpoint) -> Result<FitOutcome> {
    let classes = config.data.classes;
    let t = config.loss.temperature;
    let train = data.id_train();
    let val = data.id_val();
    let wild = data.wild_train();
    let (mut params, initial_digest) = load_finetune_start(config, e1)?;

    // Detector threshold: the e1 checkpoint's median ID validation energy.
    let e1_val_energies = energies_of(&e1.params, &val.features, t)?;
    let threshold = metrics::median(&e1_val_energies)?;
    // tau anchors the classification constraint to the fine-tuning start.
    let tau = match config.alm.tau_override {
        Some(tau) => tau,
        None => config.alm.tau_factor * val_ce_loss(&e1.params, val, classes)?,
    };
    let alm_config = AlmConfig {
        alpha: config.alm.alpha,
        tau,
        eta_lambda: config.alm.eta_lambda,
        beta_max: config.alm.beta_max,
        beta_growth: config.alm.beta_growth,
        beta_init: config.alm.beta_init,
    };
    alm_config.validate()?;
    // Reset all ALM state at initialization.
    let mut state = AlmState::fresh(&alm_config);

    let mut sampler =
        inverse_frequency_sampler(&train.labels, stream_seed(config.seed, "sampler"))?;
    let mut ood_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "wild-order"));
    let mut engine = StepEngine::fine_tune(
        &params,
        config.training.lr * config.training.fine_tune_lr_factor,
        config.training.weight_decay,
    );
    let mut tracker = Tracker::new(&params);
    let mut epochs = Vec::new();
    let mut flags = Vec::new();
    let mut trajectory = Vec::new();
    let mut beta_at_cap_epochs = 0usize;
    let mut diverged: Option<usize> = None;

    for epoch in 1..=config.training.epochs {
        let cls_only = epoch <= config.training.warmup_cls_epochs;
        let (id_order, wild_order, pairs) = paired_epoch(
            &mut sampler,
            wild.len(),
            &mut ood_rng,
            train.len(),
            config.training.batch_size,
        )?;
        let mut loss_sum = 0.0;
        let steps = pairs.len();
        for (a_pos, b_pos) in pairs {
            let id_idx: Vec<usize> = a_pos.iter().map(|&p| id_order[p]).collect();
            let wild_idx: Vec<usize> = b_pos.iter().map(|&p| wild_order[p]).collect();
            let x = train.batch(&id_idx);
            let labels = train.onehot(&id_idx, classes);
            let mut graph = Graph::new();
            let param_ids = params.param_inputs(&mut graph);
            let (_, logits) = params.forward_with(&mut graph, &param_ids, &x)?;
            let cls = cross_entropy(&mut graph, logits, &labels)?;
            let loss = if cls_only {
                cls
            } else {
                let (_, wild_logits) =
                    params.forward_with(&mut graph, &param_ids, &wild.batch(&wild_idx))?;
                let id_energy = free_energy(&mut graph, logits, t)?;
                let wild_energy = free_energy(&mut graph, wild_logits, t)?;
                // Push everything in the wild mixture toward the OOD side,
                // subject to ID staying below threshold and the class loss
                // staying near its starting level.
                let wild_loss =
                    ood_detector_loss(&mut graph, wild_energy, TargetSide::Out, threshold)?;
                let id_fa = ood_detector_loss(&mut graph, id_energy, TargetSide::In, threshold)?;
                alm_objective(&mut graph, wild_loss, id_fa, cls, &state, &alm_config)?
            };
            let loss_value = graph.value(loss).scalar_value();
            if !loss_value.is_finite() {
                diverged = Some(epoch);
                break;
            }
            loss_sum += loss_value;
            engine.apply(&mut params, &graph, loss, &param_ids)?;
        }
        if let Some(at) = diverged {
            // The blown-up run is itself the observation: keep the last
            // finite parameters and the trajectory up to the failure.
            flags.push(format!("diverged:epoch_{at}"));
            break;
        }
        let train_loss = loss_sum / steps as f64;

        // Constraints measured once per epoch on the validation split.
        let val_energies = energies_of(&params, &val.features, t)?;
        let id_fa_val = val_energies
            .iter()
            .map(|&e| softplus(e - threshold))
            .sum::<f64>()
            / val_energies.len() as f64;
        let val_loss = val_ce_loss(&params, val, classes)?;
        let c1 = id_fa_val - alm_config.alpha;
        let c2 = val_loss - alm_config.tau;
        state = alm_epoch_update(&state, c1, c2, &alm_config);
        trajectory.push(AlmEpochRow::from_state(epoch, &state));
        if state.beta1.max(state.beta2) >= alm_config.beta_max {
            beta_at_cap_epochs += 1;
        }

        let val_acc = id_val_balacc(&params, val, classes)?;
        tracker.observe(&params, epoch, train_loss, val_loss, val_acc);
        epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_balanced_accuracy: val_acc,
        });
    }

    if beta_at_cap_epochs * 2 > config.training.epochs {
        flags.push(format!(
            "alm_beta_saturated:{beta_at_cap_epochs}_of_{}_epochs",
            config.training.epochs
        ));
    }

    let (selected_checkpoint, selected) = tracker.select_banded(|p| id_val_balacc(p, val, classes))?;
    Ok(FitOutcome {
        method: Method::E6,
        params: selected_checkpoint.params.clone(),
        selected,
        selected_checkpoint,
        checkpoint_meta: tracker.meta(),
        epochs,
        flags,
        margins: None,
        alm_trajectory: Some(trajectory),
        initial_digest,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Score the selected parameters on the ID test split and every OOD set,
/// and assemble the MethodReport plus all exportable artifacts.
pub fn evaluate(
    config: &ExperimentConfig,
    data: &BenchmarkData,
    outcome: FitOutcome,
) -> Result<RunRecord> {
    let classes = config.data.classes;
    let t = config.loss.temperature;
    let method = outcome.method;
    let kind = method.score_kind();
    let params = &outcome.params;

    let id_test = data.id_test();
    let preds = predict_classes(params, &id_test.features, classes)?;
    let bal_acc = balanced_accuracy(&preds, &id_test.labels)?;

    let id_logits = forward_logits(params, &id_test.features)?;
    let id_scores = score_with(kind, &id_logits, classes, t)?;

    let mut score_sets = vec![ScoreSet {
        method: method.name().to_string(),
        dataset: "id_test".to_string(),
        sample_ids: id_test.ids.clone(),
        scores: id_scores.clone(),
    }];

    let mut ood_sets: Vec<(String, Vec<u64>, Tensor)> = data
        .test_ood_sets()
        .iter()
        .map(|(name, set)| (name.clone(), set.ids.clone(), set.features.clone()))
        .collect();
    let aux_val = data.aux_ood_val();
    ood_sets.push((
        "aux_val".to_string(),
        aux_val.ids.clone(),
        aux_val.features.clone(),
    ));
    ood_sets.sort_by(|a, b| a.0.cmp(&b.0));

    let mut ood_metrics = BTreeMap::new();
    let mut roc_curves = BTreeMap::new();
    for (name, ids, features) in &ood_sets {
        let logits = forward_logits(params, features)?;
        let scores = score_with(kind, &logits, classes, t)?;
        ood_metrics.insert(
            name.clone(),
            OodMetrics {
                auroc: metrics::auroc(&id_scores, &scores)?,
                fpr95: fpr_at_95_tpr(&id_scores, &scores)?,
            },
        );
        roc_curves.insert(name.clone(), roc_curve(&id_scores, &scores)?);
        score_sets.push(ScoreSet {
            method: method.name().to_string(),
            dataset: name.clone(),
            sample_ids: ids.clone(),
            scores,
        });
    }

    let report = MethodReport {
        method,
        seed: config.seed,
        config_hash: config.hash(),
        balanced_accuracy: bal_acc,
        ood: ood_metrics,
        margins: outcome.margins,
        alm_trajectory: outcome.alm_trajectory.clone(),
        flags: outcome.flags.clone(),
    };

    Ok(RunRecord {
        method,
        seed: config.seed,
        config_hash: config.hash(),
        epochs: outcome.epochs,
        checkpoint_meta: outcome.checkpoint_meta,
        selected: outcome.selected,
        selected_checkpoint: outcome.selected_checkpoint,
        report,
        score_sets,
        roc_curves,
        alm_trajectory: outcome.alm_trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn merged_ood_rows_carry_the_explicit_class_label() {
        let id = LabeledSet {
            ids: vec![0, 1],
            features: Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            labels: vec![0, 2],
        };
        let ood = UnlabeledSet {
            ids: vec![10],
            features: Tensor::matrix(1, 2, vec![9.0, 9.0]).unwrap(),
        };
        let classes = 3;
        let merged = merge_with_ood(&id, &ood, classes);
        assert_eq!(merged.labels, vec![0, 2, 3]);
        // One-hot over C+1: the OOD row is (0, ..., 0, 1).
        let onehot = merged.onehot(&[2], classes + 1);
        assert_eq!(onehot.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(merged.ids, vec![0, 1, 10]);
    }
}
