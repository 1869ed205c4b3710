//! Training losses and the free-energy function.
//!
//! Every loss is recorded on a [`Graph`] so gradients flow to the model
//! parameters; all of them are verified against finite differences in the
//! test suite. Losses are means over their batch unless stated otherwise.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Energy margins used by the squared-hinge energy loss.
///
/// `m_in` bounds in-distribution energies from above, `m_out` bounds OOD
/// energies from below. An inverted pair (m_in > m_out) is suspicious but
/// not rejected: it can legitimately arise from a poorly separated
/// checkpoint, so we warn and proceed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginPair {
    pub m_in: f64,
    pub m_out: f64,
}

impl MarginPair {
    pub fn new(m_in: f64, m_out: f64) -> Result<Self> {
        if !m_in.is_finite() || !m_out.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "margins must be finite, got ({m_in}, {m_out})"
            )));
        }
        if m_in > m_out {
            log::warn!("inverted energy margins: m_in {m_in} > m_out {m_out}");
        }
        Ok(MarginPair { m_in, m_out })
    }
}

/// Scalar weights shared by the composite objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight on the uniformity term of the outlier-exposure objective.
    pub lambda_oe: f64,
    /// Weight on the squared-hinge energy term.
    pub lambda_energy: f64,
    /// Temperature of the free energy.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_oe: 0.3,
            lambda_energy: 0.3,
            temperature: 1.0,
        }
    }
}

fn check_same_shape(op: &'static str, graph: &Graph, logits: NodeId, labels: &Tensor) -> Result<()> {
    let got = graph.value(logits).shape();
    if got != labels.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: got.to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean cross-entropy against one-hot labels:
/// `-1/N sum_i sum_c y_ic log softmax(z_i)_c`.
///
/// Rows that are not exactly one-hot are rejected.
pub fn cross_entropy(graph: &mut Graph, logits: NodeId, onehot_labels: &Tensor) -> Result<NodeId> {
    check_same_shape("cross_entropy", graph, logits, onehot_labels)?;
    for r in 0..onehot_labels.view_rows() {
        let row = onehot_labels.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy labels must be one-hot; row {r} is {row:?}"
            )));
        }
    }
    let n = onehot_labels.view_rows() as f64;
    let log_probs = graph.log_softmax_rows(logits);
    let labels = graph.constant(onehot_labels.clone());
    let picked = graph.mul(log_probs, labels)?;
    let total = graph.sum_all(picked);
    Ok(graph.scale(total, -1.0 / n))
}

/// Mean over all (sample, class) cells of binary cross-entropy on logits.
///
/// Computed in the stable log-sigmoid form `softplus(z) - z*y`, never as
/// `log(sigmoid(z))`, so saturated logits do not produce log(0).
pub fn bce_multi(graph: &mut Graph, logits: NodeId, binary_labels: &Tensor) -> Result<NodeId> {
    check_same_shape("bce_multi", graph, logits, binary_labels)?;
    if binary_labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(
            "bce_multi labels must be 0 or 1".into(),
        ));
    }
    let labels = graph.constant(binary_labels.clone());
    let sp = graph.softplus(logits);
    let zy = graph.mul(logits, labels)?;
    let cells = graph.sub(sp, zy)?;
    Ok(graph.mean_all(cells))
}

/// Cross-entropy of the predictive distribution against the uniform
/// distribution over C classes: `-1/N sum_i 1/C sum_c log softmax(z_i)_c`.
///
/// Minimized (at log C) exactly when the logits of each row are constant.
pub fn oe_uniform_loss(graph: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let shape = graph.value(logits).shape().to_vec();
    if shape.is_empty() || *shape.last().unwrap() < 1 {
        return Err(Error::InvalidShape {
            op: "oe_uniform_loss",
            expected: "logits with at least one class".into(),
            got: shape,
        });
    }
    // The mean over all cells equals the batch mean of per-row 1/C sums.
    let log_probs = graph.log_softmax_rows(logits);
    let mean = graph.mean_all(log_probs);
    Ok(graph.scale(mean, -1.0))
}

/// Per-sample free energy `E(x) = -T log sum_c exp(z_c / T)`.
///
/// Lower energy means more in-distribution-like. Returns a vector with one
/// energy per row of `logits`.
pub fn free_energy(graph: &mut Graph, logits: NodeId, temperature: f64) -> Result<NodeId> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled = graph.scale(logits, 1.0 / temperature);
    let lse = graph.logsumexp_rows(scaled);
    Ok(graph.scale(lse, -temperature))
}

/// Squared-hinge energy loss:
/// `mean_i max(0, E_id_i - m_in)^2 + mean_j max(0, m_out - E_ood_j)^2`.
///
/// Zero exactly when no sample violates its margin.
pub fn energy_hinge_loss(
    graph: &mut Graph,
    id_energies: NodeId,
    ood_energies: NodeId,
    margins: &MarginPair,
) -> Result<NodeId> {
    if graph.value(id_energies).is_empty() || graph.value(ood_energies).is_empty() {
        return Err(Error::EmptyInput("energy_hinge_loss batch"));
    }
    if !margins.m_in.is_finite() || !margins.m_out.is_finite() {
        return Err(Error::InvalidArgument("margins must be finite".into()));
    }
    let id_excess = graph.add_scalar(id_energies, -margins.m_in);
    let id_hinge = graph.relu(id_excess);
    let id_sq = graph.square(id_hinge);
    let id_term = graph.mean_all(id_sq);

    let neg_ood = graph.scale(ood_energies, -1.0);
    let ood_short = graph.add_scalar(neg_ood, margins.m_out);
    let ood_hinge = graph.relu(ood_short);
    let ood_sq = graph.square(ood_hinge);
    let ood_term = graph.mean_all(ood_sq);

    graph.add(id_term, ood_term)
}

/// Derive margins empirically: medians of the validation energies of a
/// reference checkpoint, in-distribution for `m_in` and OOD for `m_out`.
/// Even-length inputs use the midpoint of the two central order statistics.
pub fn derive_margins(val_id_energies: &[f64], val_ood_energies: &[f64]) -> Result<MarginPair> {
    if val_id_energies.is_empty() {
        return Err(Error::EmptyInput("derive_margins id energies"));
    }
    if val_ood_energies.is_empty() {
        return Err(Error::EmptyInput("derive_margins ood energies"));
    }
    MarginPair::new(
        crate::metrics::median(val_id_energies)?,
        crate::metrics::median(val_ood_energies)?,
    )
}

/// `ce + lambda * oe`, the outlier-exposure composite.
pub fn combined_oe_objective(
    graph: &mut Graph,
    ce_loss: NodeId,
    oe_loss: NodeId,
    lambda_oe: f64,
) -> Result<NodeId> {
    combine(graph, "lambda_oe", ce_loss, oe_loss, lambda_oe)
}

/// `ce + lambda * energy_loss`, the energy fine-tuning composite.
pub fn combined_energy_objective(
    graph: &mut Graph,
    ce_loss: NodeId,
    energy_loss: NodeId,
    lambda_energy: f64,
) -> Result<NodeId> {
    combine(graph, "lambda_energy", ce_loss, energy_loss, lambda_energy)
}

fn combine(
    graph: &mut Graph,
    name: &str,
    base: NodeId,
    extra: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "{name} must be nonnegative, got {lambda}"
        )));
    }
    let scaled = graph.scale(extra, lambda);
    graph.add(base, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;

    const LOG5: f64 = 1.6094379124341003;

    fn onehot(rows: &[usize], classes: usize) -> Tensor {
        let mut data = vec![0.0; rows.len() * classes];
        for (i, &c) in rows.iter().enumerate() {
            data[i * classes + c] = 1.0;
        }
        Tensor::new(vec![rows.len(), classes], data).unwrap()
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 5, vec![0.0; 5]).unwrap());
        let loss = cross_entropy(&mut g, z, &onehot(&[2], 5)).unwrap();
        assert!((g.value(loss).scalar_value() - LOG5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 5, vec![10.0, -10.0, -10.0, -10.0, -10.0]).unwrap());
        let loss = cross_entropy(&mut g, z, &onehot(&[0], 5)).unwrap();
        assert!(g.value(loss).scalar_value() < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_per_sample_mean() {
        // Hand-computed oracle: mean of per-row -log softmax at the label.
        let logits = vec![
            vec![0.3, -1.2, 0.7],
            vec![2.0, 0.1, -0.4],
            vec![-0.5, -0.5, 1.5],
            vec![0.0, 0.0, 0.0],
        ];
        let labels = [2usize, 0, 1, 1];
        let mut expected = 0.0;
        for (row, &label) in logits.iter().zip(&labels) {
            let lse = crate::diffcore::logsumexp_slice(row);
            expected += lse - row[label];
        }
        expected /= 4.0;

        let mut g = Graph::new();
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let z = g.input(Tensor::matrix(4, 3, flat).unwrap());
        let loss = cross_entropy(&mut g, z, &onehot(&labels, 3)).unwrap();
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_non_onehot() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let bad = Tensor::matrix(1, 3, vec![0.5, 0.5, 0.0]).unwrap();
        assert!(cross_entropy(&mut g, z, &bad).is_err());
        let two_hot = Tensor::matrix(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&mut g, z, &two_hot).is_err());
    }

    #[test]
    fn bce_cells_match_hand_values() {
        // logit 0, label 1 -> log 2; logit +20, label 1 -> ~0.
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let loss = bce_multi(&mut g, z, &Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!((g.value(loss).scalar_value() - 2.0f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 1, vec![20.0]).unwrap());
        let loss = bce_multi(&mut g, z, &Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!(g.value(loss).scalar_value() < 1e-8);
    }

    #[test]
    fn bce_two_by_two_matches_hand_mean() {
        let z = [[0.7, -1.1], [2.3, 0.0]];
        let y = [[1.0, 0.0], [0.0, 1.0]];
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let (zv, yv) = (z[i][j], y[i][j]);
                expected += crate::diffcore::softplus(zv) - zv * yv;
            }
        }
        expected /= 4.0;
        let mut g = Graph::new();
        let zn = g.input(Tensor::matrix(2, 2, z.concat()).unwrap());
        let loss = bce_multi(&mut g, zn, &Tensor::matrix(2, 2, y.concat()).unwrap()).unwrap();
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let bad = Tensor::matrix(1, 2, vec![0.3, 1.0]).unwrap();
        assert!(bce_multi(&mut g, z, &bad).is_err());
    }

    #[test]
    fn oe_loss_minimum_at_uniform_logits() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 5, vec![0.0; 5]).unwrap());
        let loss = oe_uniform_loss(&mut g, z).unwrap();
        assert!((g.value(loss).scalar_value() - LOG5).abs() < 1e-12);
    }

    #[test]
    fn oe_loss_on_peaked_logits() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 5, vec![10.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let loss = oe_uniform_loss(&mut g, z).unwrap();
        // Direct evaluation: -(1/5) sum_c (z_c - lse).
        let lse = crate::diffcore::logsumexp_slice(&[10.0, 0.0, 0.0, 0.0, 0.0]);
        let expected = -(10.0 - lse + 4.0 * (0.0 - lse)) / 5.0;
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-12);
        assert!((g.value(loss).scalar_value() - 8.0003).abs() < 1e-3);
    }

    #[test]
    fn oe_loss_shift_invariant() {
        let base = vec![0.4, -0.9, 1.3, 0.0, 2.2];
        let shifted: Vec<f64> = base.iter().map(|v| v + 37.5).collect();
        let mut g = Graph::new();
        let z1 = g.input(Tensor::matrix(1, 5, base).unwrap());
        let z2 = g.input(Tensor::matrix(1, 5, shifted).unwrap());
        let l1 = oe_uniform_loss(&mut g, z1).unwrap();
        let l2 = oe_uniform_loss(&mut g, z2).unwrap();
        assert!((g.value(l1).scalar_value() - g.value(l2).scalar_value()).abs() < 1e-9);
    }

    #[test]
    fn oe_loss_at_least_log_c_over_random_logits() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let row: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut g = Graph::new();
            let z = g.input(Tensor::matrix(1, 5, row).unwrap());
            let loss = oe_uniform_loss(&mut g, z).unwrap();
            assert!(g.value(loss).scalar_value() >= LOG5 - 1e-9);
        }
    }

    #[test]
    fn free_energy_of_zero_logits() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 5, vec![0.0; 5]).unwrap());
        let e = free_energy(&mut g, z, 1.0).unwrap();
        assert!((g.value(e).data()[0] + LOG5).abs() < 1e-12);
    }

    #[test]
    fn free_energy_single_class_is_negative_logit() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 1, vec![3.7]).unwrap());
        let e = free_energy(&mut g, z, 1.0).unwrap();
        assert!((g.value(e).data()[0] + 3.7).abs() < 1e-12);
    }

    #[test]
    fn free_energy_direction_id_below_ood() {
        // A high-magnitude confident row gets much lower energy than a flat
        // low-magnitude row.
        let mut g = Graph::new();
        let z = g.input(
            Tensor::matrix(2, 5, vec![9.0, 1.0, 0.5, 0.0, -1.0, 0.4, 0.2, 0.3, 0.1, 0.2]).unwrap(),
        );
        let e = free_energy(&mut g, z, 1.0).unwrap();
        let values = g.value(e).data().to_vec();
        assert!(values[0] < values[1] - 5.0, "{values:?}");
    }

    #[test]
    fn free_energy_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(free_energy(&mut g, z, 0.0).is_err());
        assert!(free_energy(&mut g, z, -1.0).is_err());
    }

    #[test]
    fn hinge_zero_when_margins_satisfied() {
        let margins = MarginPair::new(-2.0, 2.0).unwrap();
        let mut g = Graph::new();
        let id = g.input(Tensor::vector(vec![-3.0, -2.0, -5.0]));
        let ood = g.input(Tensor::vector(vec![2.0, 4.0]));
        let loss = energy_hinge_loss(&mut g, id, ood, &margins).unwrap();
        assert_eq!(g.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn hinge_single_violation_squared() {
        let margins = MarginPair::new(0.0, 5.0).unwrap();
        let mut g = Graph::new();
        let id = g.input(Tensor::vector(vec![2.0]));
        let ood = g.input(Tensor::vector(vec![6.0]));
        let loss = energy_hinge_loss(&mut g, id, ood, &margins).unwrap();
        assert_eq!(g.value(loss).scalar_value(), 4.0);
    }

    #[test]
    fn hinge_mixed_case_matches_hand_sum() {
        let margins = MarginPair::new(-1.0, 1.0).unwrap();
        let id: [f64; 3] = [-2.0, 0.5, -0.9];
        let ood: [f64; 2] = [0.0, 3.0];
        let id_term: f64 =
            id.iter().map(|e| (e + 1.0).max(0.0).powi(2)).sum::<f64>() / id.len() as f64;
        let ood_term: f64 =
            ood.iter().map(|e| (1.0 - e).max(0.0).powi(2)).sum::<f64>() / ood.len() as f64;
        let mut g = Graph::new();
        let idn = g.input(Tensor::vector(id.to_vec()));
        let oodn = g.input(Tensor::vector(ood.to_vec()));
        let loss = energy_hinge_loss(&mut g, idn, oodn, &margins).unwrap();
        assert!((g.value(loss).scalar_value() - (id_term + ood_term)).abs() < 1e-12);
    }

    #[test]
    fn derive_margins_medians() {
        let m = derive_margins(&[1.0, 2.0, 3.0], &[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(m.m_in, 2.0);
        assert_eq!(m.m_out, 6.0);
        let m = derive_margins(&[1.0, 2.0, 3.0, 4.0], &[9.0]).unwrap();
        assert_eq!(m.m_in, 2.5);
        assert!(derive_margins(&[], &[1.0]).is_err());
    }

    #[test]
    fn derive_margins_permutation_invariant() {
        let a = derive_margins(&[3.0, 1.0, 2.0, 8.0], &[0.5, -0.5]).unwrap();
        let b = derive_margins(&[8.0, 2.0, 3.0, 1.0], &[-0.5, 0.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn combined_objectives_are_linear() {
        let mut g = Graph::new();
        let ce = g.input(Tensor::scalar(1.0));
        let oe = g.input(Tensor::scalar(2.0));
        let c = combined_oe_objective(&mut g, ce, oe, 0.5).unwrap();
        assert_eq!(g.value(c).scalar_value(), 2.0);
        let c0 = combined_oe_objective(&mut g, ce, oe, 0.0).unwrap();
        assert_eq!(g.value(c0).scalar_value(), 1.0);
        assert!(combined_oe_objective(&mut g, ce, oe, -0.1).is_err());
        assert!(combined_energy_objective(&mut g, ce, oe, -2.0).is_err());
    }

    #[test]
    fn combined_gradient_splits_linearly() {
        // d/dz [ce(z) + lambda*oe(z)] must match fd on the composite.
        let params = vec![Tensor::matrix(2, 3, vec![0.2, -0.7, 1.1, 0.0, 0.4, -0.3]).unwrap()];
        let labels = onehot(&[1, 2], 3);
        let report = finite_difference_check(
            |g, ids| {
                let ce = cross_entropy(g, ids[0], &labels)?;
                let oe = oe_uniform_loss(g, ids[0])?;
                combined_oe_objective(g, ce, oe, 0.5)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn energy_decomposes_into_max_logit_and_residual() {
        // E = -f_max - T * log sum exp((z_c - f_max)/T): the residual is the
        // part softmax normalization keeps, the max is what it discards.
        let logits = vec![2.5, -0.3, 1.1, 0.0];
        let t = 0.7;
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 4, logits.clone()).unwrap());
        let e = free_energy(&mut g, z, t).unwrap();
        let f_max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let residual: f64 = logits.iter().map(|&v| ((v - f_max) / t).exp()).sum::<f64>().ln();
        assert!((g.value(e).data()[0] - (-f_max - t * residual)).abs() < 1e-12);
    }

    #[test]
    fn energy_shift_covariance_vs_softmax_invariance() {
        // Adding c to all logits shifts energy by -c while softmax (and the
        // maximum softmax probability) is unchanged.
        let base = vec![1.2, -0.3, 0.8, 0.0, 2.0];
        let shift = 4.2;
        let shifted: Vec<f64> = base.iter().map(|v| v + shift).collect();
        let mut g = Graph::new();
        let z1 = g.input(Tensor::matrix(1, 5, base.clone()).unwrap());
        let z2 = g.input(Tensor::matrix(1, 5, shifted.clone()).unwrap());
        let e1 = free_energy(&mut g, z1, 1.0).unwrap();
        let e2 = free_energy(&mut g, z2, 1.0).unwrap();
        let d = g.value(e2).data()[0] - g.value(e1).data()[0];
        assert!((d + shift).abs() < 1e-9);

        let sm1 = crate::diffcore::softmax_slice(&base);
        let sm2 = crate::diffcore::softmax_slice(&shifted);
        for (a, b) in sm1.iter().zip(&sm2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
