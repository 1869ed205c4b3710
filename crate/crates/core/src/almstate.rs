//! Augmented Lagrangian state machine for wild-data constrained training.
//!
//! The constrained problem — minimize the wild-data detector loss subject to
//! an ID false-alarm bound alpha and a classification-loss bound tau — is
//! solved by alternating gradient steps on a penalized objective with
//! once-per-epoch dual updates. Two stability modifications are built in:
//! a small dual learning rate and a hard cap on the penalty weights. Without
//! the cap, repeated constraint violations double the penalty every epoch
//! until the wild term dominates the whole objective.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId};
use crate::{Error, Result};

/// Tunables of the augmented Lagrangian scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmConfig {
    /// Maximum tolerated ID false-alarm surrogate loss.
    pub alpha: f64,
    /// Bound on the classification loss.
    pub tau: f64,
    /// Dual learning rate.
    pub eta_lambda: f64,
    /// Hard cap on the penalty weights; may be infinite to disable capping.
    pub beta_max: f64,
    /// Multiplicative penalty growth applied on violation.
    pub beta_growth: f64,
    /// Initial penalty weights.
    pub beta_init: f64,
}

impl AlmConfig {
    /// Stable defaults; `tau` is anchored to the fine-tuning start point by
    /// the caller, so it has no universal default.
    pub fn defaults_with_tau(tau: f64) -> Self {
        AlmConfig {
            alpha: 0.1,
            tau,
            eta_lambda: 0.001,
            beta_max: 5.0,
            beta_growth: 2.0,
            beta_init: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.alpha < 1.0
            && self.eta_lambda > 0.0
            && self.beta_init > 0.0
            && self.beta_max >= self.beta_init
            && self.beta_growth > 1.0
            && self.tau.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid ALM config: {self:?}")))
        }
    }
}

/// Dual variables, penalty weights, and the last measured constraint values
/// `c1 = id_false_alarm - alpha` and `c2 = cls_loss - tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmState {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub c1: f64,
    pub c2: f64,
}

impl AlmState {
    /// Fresh state: zero duals, initial penalties.
    pub fn fresh(config: &AlmConfig) -> Self {
        AlmState {
            lambda1: 0.0,
            lambda2: 0.0,
            beta1: config.beta_init,
            beta2: config.beta_init,
            c1: 0.0,
            c2: 0.0,
        }
    }

    pub fn validate(&self, config: &AlmConfig) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.beta1 >= config.beta_init
            && self.beta1 <= config.beta_max
            && self.beta2 >= config.beta_init
            && self.beta2 <= config.beta_max;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid ALM state: {self:?}")))
        }
    }
}

/// Which side of the detector threshold a batch is pushed toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSide {
    In,
    Out,
}

/// Differentiable detector loss: mean sigmoid cross-entropy of
/// `(energy - threshold)` against the target side. Energies far below the
/// threshold have near-zero loss for target `In`; an energy exactly at the
/// threshold costs log 2 on either side.
pub fn ood_detector_loss(
    graph: &mut Graph,
    energies: NodeId,
    target_side: TargetSide,
    threshold: f64,
) -> Result<NodeId> {
    if graph.value(energies).is_empty() {
        return Err(Error::EmptyInput("ood_detector_loss batch"));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "detector threshold must be finite, got {threshold}"
        )));
    }
    let centered = graph.add_scalar(energies, -threshold);
    // BCE with logits z: target "in" (label 0 on the OOD side) costs
    // softplus(z); target "out" costs softplus(-z).
    let logits = match target_side {
        TargetSide::In => centered,
        TargetSide::Out => graph.scale(centered, -1.0),
    };
    let cells = graph.softplus(logits);
    Ok(graph.mean_all(cells))
}

/// The penalized training objective:
/// `wild_loss + sum_i [lambda_i * c_i + (beta_i / 2) * max(0, c_i)^2]`
/// with `c1 = id_false_alarm_loss - alpha` and `c2 = cls_loss - tau`.
///
/// Reduces to `wild_loss` exactly when both duals are zero and both
/// constraints are satisfied.
pub fn alm_objective(
    graph: &mut Graph,
    wild_loss: NodeId,
    id_false_alarm_loss: NodeId,
    cls_loss: NodeId,
    state: &AlmState,
    config: &AlmConfig,
) -> Result<NodeId> {
    config.validate()?;
    state.validate(config)?;
    for (name, node) in [
        ("wild_loss", wild_loss),
        ("id_false_alarm_loss", id_false_alarm_loss),
        ("cls_loss", cls_loss),
    ] {
        if !graph.value(node).is_scalar() {
            return Err(Error::InvalidShape {
                op: "alm_objective",
                expected: format!("scalar {name}"),
                got: graph.value(node).shape().to_vec(),
            });
        }
    }
    let c1 = graph.add_scalar(id_false_alarm_loss, -config.alpha);
    let c2 = graph.add_scalar(cls_loss, -config.tau);
    let mut total = wild_loss;
    for (c, lambda, beta) in [(c1, state.lambda1, state.beta1), (c2, state.lambda2, state.beta2)] {
        let dual_term = graph.scale(c, lambda);
        let hinge = graph.relu(c);
        let sq = graph.square(hinge);
        let penalty = graph.scale(sq, beta / 2.0);
        total = graph.add(total, dual_term)?;
        total = graph.add(total, penalty)?;
    }
    Ok(total)
}

/// Once-per-epoch dual ascent and penalty growth from measured constraints:
/// `lambda_i <- max(0, lambda_i + eta * c_i)`; on violation (`c_i > 0`)
/// `beta_i <- min(beta_i * growth, beta_max)`. Penalties never shrink.
pub fn alm_epoch_update(
    state: &AlmState,
    measured_c1: f64,
    measured_c2: f64,
    config: &AlmConfig,
) -> AlmState {
    let step = |lambda: f64, beta: f64, c: f64| -> (f64, f64) {
        let lambda = (lambda + config.eta_lambda * c).max(0.0);
        let beta = if c > 0.0 {
            (beta * config.beta_growth).min(config.beta_max)
        } else {
            beta
        };
        (lambda, beta)
    };
    let (lambda1, beta1) = step(state.lambda1, state.beta1, measured_c1);
    let (lambda2, beta2) = step(state.lambda2, state.beta2, measured_c2);
    AlmState {
        lambda1,
        lambda2,
        beta1,
        beta2,
        c1: measured_c1,
        c2: measured_c2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use proptest::prelude::*;

    fn config() -> AlmConfig {
        AlmConfig::defaults_with_tau(0.5)
    }

    #[test]
    fn objective_reduces_to_wild_loss_when_inactive() {
        let cfg = config();
        let state = AlmState::fresh(&cfg);
        let mut g = Graph::new();
        let wild = g.input(Tensor::scalar(0.37));
        let fa = g.input(Tensor::scalar(0.05)); // c1 = -0.05
        let cls = g.input(Tensor::scalar(0.3)); // c2 = -0.2
        let obj = alm_objective(&mut g, wild, fa, cls, &state, &cfg).unwrap();
        assert_eq!(g.value(obj).scalar_value(), 0.37);
    }

    #[test]
    fn penalty_contribution_matches_formula() {
        // c1 = 0.2, lambda1 = 0.1, beta1 = 2 -> 0.1*0.2 + 1*0.04 = 0.06
        let mut cfg = config();
        cfg.beta_init = 2.0;
        let mut state = AlmState::fresh(&cfg);
        state.lambda1 = 0.1;
        state.beta2 = 2.0;
        let mut g = Graph::new();
        let wild = g.input(Tensor::scalar(0.0));
        let fa = g.input(Tensor::scalar(cfg.alpha + 0.2));
        let cls = g.input(Tensor::scalar(cfg.tau)); // c2 = 0 exactly
        let obj = alm_objective(&mut g, wild, fa, cls, &state, &cfg).unwrap();
        assert!((g.value(obj).scalar_value() - 0.06).abs() < 1e-12);
    }

    #[test]
    fn invalid_state_rejected() {
        let cfg = config();
        let mut state = AlmState::fresh(&cfg);
        state.lambda1 = -0.1;
        let mut g = Graph::new();
        let s = g.input(Tensor::scalar(0.0));
        assert!(alm_objective(&mut g, s, s, s, &state, &cfg).is_err());
    }

    #[test]
    fn update_is_fixed_point_when_satisfied() {
        let cfg = config();
        let state = AlmState::fresh(&cfg);
        let mut s = state;
        for _ in 0..10 {
            s = alm_epoch_update(&s, -0.02, -0.1, &cfg);
        }
        assert_eq!(s.lambda1, 0.0);
        assert_eq!(s.lambda2, 0.0);
        assert_eq!(s.beta1, cfg.beta_init);
        assert_eq!(s.beta2, cfg.beta_init);
    }

    #[test]
    fn beta_stays_exactly_at_cap() {
        let cfg = config();
        let mut s = AlmState::fresh(&cfg);
        for _ in 0..20 {
            s = alm_epoch_update(&s, 0.3, 0.3, &cfg);
        }
        assert_eq!(s.beta1, cfg.beta_max);
        assert_eq!(s.beta2, cfg.beta_max);
        let next = alm_epoch_update(&s, 0.3, 0.3, &cfg);
        assert_eq!(next.beta1, cfg.beta_max);
    }

    #[test]
    fn uncapped_beta_exceeds_twenty_within_bounded_epochs() {
        // The documented instability: aggressive dual rate, no cap.
        let mut cfg = config();
        cfg.eta_lambda = 0.1;
        cfg.alpha = 0.05;
        cfg.beta_max = f64::INFINITY;
        let mut s = AlmState::fresh(&cfg);
        let mut epochs = 0;
        while s.beta1 <= 20.0 {
            s = alm_epoch_update(&s, 0.2, 0.0, &cfg);
            epochs += 1;
            assert!(epochs <= 7, "beta should blow past 20 within 7 violations");
        }
        assert!(s.beta1 > 20.0);
    }

    #[test]
    fn detector_loss_values() {
        let mut g = Graph::new();
        let far_in = g.input(Tensor::vector(vec![-40.0]));
        let loss = ood_detector_loss(&mut g, far_in, TargetSide::In, 0.0).unwrap();
        assert!(g.value(loss).scalar_value() < 1e-6);

        let at = g.input(Tensor::vector(vec![0.0]));
        let loss = ood_detector_loss(&mut g, at, TargetSide::In, 0.0).unwrap();
        assert!((g.value(loss).scalar_value() - 2.0f64.ln()).abs() < 1e-12);
        let loss = ood_detector_loss(&mut g, at, TargetSide::Out, 0.0).unwrap();
        assert!((g.value(loss).scalar_value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn detector_loss_matches_hand_mean() {
        let energies = [-2.0, 0.5, 1.5];
        let threshold = 0.25;
        let expected: f64 = energies
            .iter()
            .map(|e| crate::diffcore::softplus(-(e - threshold)))
            .sum::<f64>()
            / 3.0;
        let mut g = Graph::new();
        let e = g.input(Tensor::vector(energies.to_vec()));
        let loss = ood_detector_loss(&mut g, e, TargetSide::Out, threshold).unwrap();
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn detector_loss_rejects_non_finite_threshold() {
        let mut g = Graph::new();
        let e = g.input(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        assert!(ood_detector_loss(&mut g, e, TargetSide::In, f64::NAN).is_err());
    }

    proptest! {
        // Invariants over arbitrary constraint trajectories: duals stay
        // nonnegative, penalties stay within [beta_init, beta_max] and never
        // decrease.
        #[test]
        fn state_invariants_over_random_trajectories(
            cs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..200)
        ) {
            let cfg = config();
            let mut s = AlmState::fresh(&cfg);
            let mut prev_beta = (s.beta1, s.beta2);
            for (c1, c2) in cs {
                s = alm_epoch_update(&s, c1, c2, &cfg);
                prop_assert!(s.lambda1 >= 0.0 && s.lambda2 >= 0.0);
                prop_assert!(s.beta1 >= cfg.beta_init && s.beta1 <= cfg.beta_max);
                prop_assert!(s.beta2 >= cfg.beta_init && s.beta2 <= cfg.beta_max);
                prop_assert!(s.beta1 >= prev_beta.0 && s.beta2 >= prev_beta.1);
                prev_beta = (s.beta1, s.beta2);
            }
        }
    }
}
