//! Verification of analytic gradients against central finite differences.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of a finite-difference sweep over every parameter coordinate.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Index into the parameter list where the maximum occurred.
    pub worst_param: usize,
    /// Flat coordinate within that parameter.
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Check the gradient of a scalar loss against central finite differences.
///
/// `build` must deterministically reconstruct the loss from parameter nodes;
/// it is invoked once for the analytic gradient and twice per coordinate for
/// the numeric probe with step `step`.
pub fn finite_difference_check<F>(build: F, params: &[Tensor], step: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let eval = |point: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = point.iter().map(|p| graph.input(p.clone())).collect();
        let loss = build(&mut graph, &ids)?;
        if !graph.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                got: graph.value(loss).shape().to_vec(),
            });
        }
        Ok((graph, ids, loss))
    };

    let (graph, ids, loss) = eval(params)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zero(id, p.shape()))
        .collect();

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };

    let mut point: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.len() {
            let base = param.data()[ci];
            let mut probe = |v: f64| -> Result<f64> {
                point[pi].data_mut()[ci] = v;
                let (g, _, l) = eval(&point)?;
                let out = g.value(l).scalar_value();
                if !out.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        param: pi,
                        coord: ci,
                    });
                }
                Ok(out)
            };
            let plus = probe(base + step)?;
            let minus = probe(base - step)?;
            point[pi].data_mut()[ci] = base;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report = FdReport {
                    max_rel_error: rel,
                    worst_param: pi,
                    worst_coord: ci,
                    analytic_at_worst: a,
                    numeric_at_worst: numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact_up_to_roundoff() {
        let params = vec![Tensor::vector(vec![0.4, -1.7, 3.0])];
        let report = finite_difference_check(
            |g, ids| {
                let sq = g.square(ids[0]);
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        // Central differences are exact for quadratics up to roundoff.
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let params = vec![Tensor::scalar(1.0)];
        let err = finite_difference_check(|g, ids| Ok(g.mean_all(ids[0])), &params, 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn reports_non_finite_loss_coordinate() {
        // log(x) at x = step/2 probes a negative point -> NaN.
        let params = vec![Tensor::vector(vec![1.0, 5e-6])];
        let err = finite_difference_check(
            |g, ids| {
                let l = g.log(ids[0]);
                Ok(g.sum_all(l))
            },
            &params,
            1e-5,
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { param: 0, coord: 1 } => {}
            other => panic!("expected NonFiniteLoss at (0,1), got {other:?}"),
        }
    }

    #[test]
    fn unused_parameter_has_zero_gradient_and_passes() {
        let params = vec![Tensor::scalar(2.0), Tensor::scalar(7.0)];
        let report = finite_difference_check(
            |g, ids| {
                let sq = g.square(ids[0]);
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8);
    }
}
