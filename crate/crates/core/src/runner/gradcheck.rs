//! Finite-difference verification of every training objective.
//!
//! Each objective is rebuilt from raw parameter tensors through a small MLP
//! at several random parameter points and checked against central finite
//! differences. Points whose hidden pre-activations or hinge inputs sit too
//! close to a kink are resampled: the subgradient convention makes the
//! analytic value well-defined there, but the numeric probe straddles the
//! kink and measures nothing useful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::almstate::{alm_objective, ood_detector_loss, AlmConfig, AlmState, TargetSide};
use crate::diffcore::{finite_difference_check, Graph, NodeId, Tensor};
use crate::objectives::{
    bce_multi, combined_energy_objective, combined_oe_objective, cross_entropy, energy_hinge_loss,
    free_energy, oe_uniform_loss, MarginPair,
};
use crate::scoring::energy_score;
use crate::{Error, Result};

const FD_STEP: f64 = 1e-5;
/// Minimum distance of any relu pre-activation or hinge input from its kink.
const KINK_GUARD: f64 = 1e-3;
const MAX_RESAMPLES: usize = 200;

/// Gradient-check dimensions: a 3-layer feature stack into 3 classes.
const DIM_IN: usize = 4;
const HIDDEN: [usize; 2] = [8, 8];
const DIM_EMB: usize = 4;
const CLASSES: usize = 3;
const ID_BATCH: usize = 6;
const OOD_BATCH: usize = 5;

/// Margins positioned so random-init energies land strictly inside both
/// hinge-active regions.
const CHECK_MARGINS: MarginPair = MarginPair {
    m_in: -1.4,
    m_out: -0.8,
};
const DETECTOR_THRESHOLD: f64 = -1.1;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub points: usize,
}

/// The parameter tensors of the probe MLP in graph order.
fn sample_params(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let chain = [DIM_IN, HIDDEN[0], HIDDEN[1], DIM_EMB, CLASSES];
    let mut params = Vec::new();
    for w in chain.windows(2) {
        let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
        params.push(Tensor::new(
            vec![w[0], w[1]],
            (0..w[0] * w[1])
                .map(|_| rng.random_range(-bound..bound))
                .collect::<Vec<f64>>(),
        )
        .expect("sized by construction"));
        params.push(Tensor::vector(
            (0..w[1]).map(|_| rng.random_range(-0.1..0.1)).collect(),
        ));
    }
    params
}

fn sample_batch(rng: &mut ChaCha8Rng, rows: usize) -> Tensor {
    Tensor::new(
        vec![rows, DIM_IN],
        (0..rows * DIM_IN)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect::<Vec<f64>>(),
    )
    .expect("sized by construction")
}

fn onehot(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor {
    let mut data = vec![0.0; rows * classes];
    for r in 0..rows {
        data[r * classes + rng.random_range(0..classes)] = 1.0;
    }
    Tensor::new(vec![rows, classes], data).expect("sized by construction")
}

fn binary_labels(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor {
    Tensor::new(
        vec![rows, classes],
        (0..rows * classes)
            .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>(),
    )
    .expect("sized by construction")
}

/// Forward the probe MLP on a graph against parameter nodes, returning
/// logits and recording the minimum |pre-activation| across relu layers.
fn mlp_logits(
    graph: &mut Graph,
    param_ids: &[NodeId],
    batch: &Tensor,
    min_preact: &mut f64,
) -> Result<NodeId> {
    let mut x = graph.constant(batch.clone());
    let layers = param_ids.len() / 2;
    for layer in 0..layers {
        let w = param_ids[2 * layer];
        let b = param_ids[2 * layer + 1];
        let prod = graph.matmul(x, w)?;
        let pre = graph.bias_add(prod, b)?;
        // Rectify hidden layers only; embedding and head stay linear.
        if layer < layers - 2 {
            for &v in graph.value(pre).data() {
                *min_preact = min_preact.min(v.abs());
            }
            x = graph.relu(pre);
        } else {
            x = pre;
        }
    }
    Ok(x)
}

/// Evaluate the probe MLP's logits as plain values.
fn plain_logits(params: &[Tensor], batch: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.input(p.clone())).collect();
    let mut min_preact = f64::INFINITY;
    let logits = mlp_logits(&mut graph, &ids, batch, &mut min_preact)?;
    Ok(graph.value(logits).clone())
}

/// Min |pre-activation| of the probe at a parameter point.
fn min_preactivation(params: &[Tensor], batches: &[&Tensor]) -> Result<f64> {
    let mut min_preact = f64::INFINITY;
    for batch in batches {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| graph.input(p.clone())).collect();
        mlp_logits(&mut graph, &ids, batch, &mut min_preact)?;
    }
    Ok(min_preact)
}

/// Min distance of any per-sample energy from the given reference levels.
fn min_energy_margin_gap(
    params: &[Tensor],
    batch: &Tensor,
    references: &[f64],
) -> Result<f64> {
    let logits = plain_logits(params, batch)?;
    let energies = energy_score(&logits, 1.0)?;
    Ok(energies
        .iter()
        .flat_map(|e| references.iter().map(move |m| (e - m).abs()))
        .fold(f64::INFINITY, f64::min))
}

type BuildFn = Box<dyn Fn(&mut Graph, &[NodeId], &CaseData) -> Result<NodeId>>;

struct Objective {
    name: &'static str,
    /// Kink references on the energy scale; points too close are resampled.
    energy_guards: &'static [f64],
    build: BuildFn,
}

/// Fixed per-point case data (batches and labels are constants; only the
/// model parameters are differentiated).
struct CaseData {
    id_batch: Tensor,
    ood_batch: Tensor,
    ce_labels: Tensor,
    bce_labels: Tensor,
    alm_state: AlmState,
    alm_config: AlmConfig,
}

fn objectives() -> Vec<Objective> {
    let hinge_guards: &'static [f64] = &[CHECK_MARGINS.m_in, CHECK_MARGINS.m_out];
    vec![
        Objective {
            name: "cross_entropy",
            energy_guards: &[],
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let logits = mlp_logits(g, ids, &case.id_batch, &mut mp)?;
                cross_entropy(g, logits, &case.ce_labels)
            }),
        },
        Objective {
            name: "bce_multi",
            energy_guards: &[],
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let logits = mlp_logits(g, ids, &case.id_batch, &mut mp)?;
                bce_multi(g, logits, &case.bce_labels)
            }),
        },
        Objective {
            name: "oe_uniform_loss",
            energy_guards: &[],
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let logits = mlp_logits(g, ids, &case.ood_batch, &mut mp)?;
                oe_uniform_loss(g, logits)
            }),
        },
        Objective {
            name: "combined_oe_objective",
            energy_guards: &[],
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let id_logits = mlp_logits(g, ids, &case.id_batch, &mut mp)?;
                let ood_logits = mlp_logits(g, ids, &case.ood_batch, &mut mp)?;
                let ce = cross_entropy(g, id_logits, &case.ce_labels)?;
                let oe = oe_uniform_loss(g, ood_logits)?;
                combined_oe_objective(g, ce, oe, 0.5)
            }),
        },
        Objective {
            name: "energy_hinge_loss",
            energy_guards: hinge_guards,
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let id_logits = mlp_logits(g, ids, &case.id_batch, &mut mp)?;
                let ood_logits = mlp_logits(g, ids, &case.ood_batch, &mut mp)?;
                let id_e = free_energy(g, id_logits, 1.0)?;
                let ood_e = free_energy(g, ood_logits, 1.0)?;
                energy_hinge_loss(g, id_e, ood_e, &CHECK_MARGINS)
            }),
        },
        Objective {
            name: "combined_energy_objective",
            energy_guards: hinge_guards,
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let id_logits = mlp_logits(g, ids, &case.id_batch, &mut mp)?;
                let ood_logits = mlp_logits(g, ids, &case.ood_batch, &mut mp)?;
                let ce = cross_entropy(g, id_logits, &case.ce_labels)?;
                let id_e = free_energy(g, id_logits, 1.0)?;
                let ood_e = free_energy(g, ood_logits, 1.0)?;
                let hinge = energy_hinge_loss(g, id_e, ood_e, &CHECK_MARGINS)?;
                combined_energy_objective(g, ce, hinge, 0.1)
            }),
        },
        Objective {
            name: "ood_detector_loss",
            energy_guards: &[],
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let logits = mlp_logits(g, ids, &case.id_batch, &mut mp)?;
                let e = free_energy(g, logits, 1.0)?;
                ood_detector_loss(g, e, TargetSide::In, DETECTOR_THRESHOLD)
            }),
        },
        Objective {
            name: "alm_objective",
            energy_guards: &[],
            build: Box::new(|g, ids, case| {
                let mut mp = f64::INFINITY;
                let id_logits = mlp_logits(g, ids, &case.id_batch, &mut mp)?;
                let wild_logits = mlp_logits(g, ids, &case.ood_batch, &mut mp)?;
                let cls = cross_entropy(g, id_logits, &case.ce_labels)?;
                let id_e = free_energy(g, id_logits, 1.0)?;
                let wild_e = free_energy(g, wild_logits, 1.0)?;
                let wild_loss = ood_detector_loss(g, wild_e, TargetSide::Out, DETECTOR_THRESHOLD)?;
                let id_fa = ood_detector_loss(g, id_e, TargetSide::In, DETECTOR_THRESHOLD)?;
                alm_objective(g, wild_loss, id_fa, cls, &case.alm_state, &case.alm_config)
            }),
        },
    ]
}

/// Run the full gradient-check suite: every objective at `points` admissible
/// random parameter points.
pub fn gradient_check_suite(seed: u64, points: usize) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for objective in objectives() {
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut attempts = 0;
        while checked < points {
            attempts += 1;
            if attempts > MAX_RESAMPLES {
                return Err(Error::InvalidArgument(format!(
                    "could not find {points} kink-free points for {}",
                    objective.name
                )));
            }
            let params = sample_params(&mut rng);
            let case = CaseData {
                id_batch: sample_batch(&mut rng, ID_BATCH),
                ood_batch: sample_batch(&mut rng, OOD_BATCH),
                ce_labels: onehot(&mut rng, ID_BATCH, CLASSES),
                bce_labels: binary_labels(&mut rng, ID_BATCH, CLASSES),
                alm_state: AlmState {
                    lambda1: 0.05,
                    lambda2: 0.02,
                    beta1: 2.0,
                    beta2: 1.0,
                    c1: 0.0,
                    c2: 0.0,
                },
                alm_config: AlmConfig {
                    alpha: 0.1,
                    tau: 0.9,
                    eta_lambda: 0.001,
                    beta_max: 5.0,
                    beta_growth: 2.0,
                    beta_init: 0.5,
                },
            };
            // Admissibility: relu pre-activations and hinge inputs away from
            // their kinks at this point.
            let preact = min_preactivation(&params, &[&case.id_batch, &case.ood_batch])?;
            if preact < KINK_GUARD {
                continue;
            }
            if !objective.energy_guards.is_empty() {
                let gap_id =
                    min_energy_margin_gap(&params, &case.id_batch, objective.energy_guards)?;
                let gap_ood =
                    min_energy_margin_gap(&params, &case.ood_batch, objective.energy_guards)?;
                if gap_id.min(gap_ood) < KINK_GUARD {
                    continue;
                }
            }
            let report =
                finite_difference_check(|g, ids| (objective.build)(g, ids, &case), &params, FD_STEP)?;
            worst = worst.max(report.max_rel_error);
            checked += 1;
        }
        results.push(GradCheckCase {
            name: objective.name,
            max_rel_error: worst,
            points: checked,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_tolerance() {
        let results = gradient_check_suite(7, 3).unwrap();
        assert_eq!(results.len(), 8);
        for case in results {
            assert!(
                case.max_rel_error <= 1e-4,
                "{}: {}",
                case.name,
                case.max_rel_error
            );
        }
    }
}
