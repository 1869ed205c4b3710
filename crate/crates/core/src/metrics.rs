//! Evaluation stack: balanced accuracy, ROC/AUROC, FPR95, 1-D Wasserstein
//! distance, and histogram export.
//!
//! Orientation everywhere: OOD is the positive class and scores increase
//! with OOD-likeness.

use serde::Serialize;

use crate::{Error, Result};

/// Unweighted mean of per-class recalls; classes absent from `labels` are
/// excluded. Robust to class imbalance.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "predictions ({}) and labels ({}) differ in length",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("balanced_accuracy labels"));
    }
    let max_class = *labels.iter().max().unwrap();
    let mut correct = vec![0usize; max_class + 1];
    let mut total = vec![0usize; max_class + 1];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0usize;
    for (c, t) in correct.iter().zip(&total) {
        if *t > 0 {
            sum += *c as f64 / *t as f64;
            classes += 1;
        }
    }
    Ok(sum / classes as f64)
}

/// An ROC curve stored as ordered (fpr, tpr) points from (0,0) to (1,1),
/// with its trapezoidal area.
#[derive(Clone, Debug, Serialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

fn check_nonempty(id_scores: &[f64], ood_scores: &[f64]) -> Result<()> {
    if id_scores.is_empty() {
        return Err(Error::EmptyInput("id scores"));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyInput("ood scores"));
    }
    Ok(())
}

/// Probability that a random OOD score exceeds a random ID score, with ties
/// counted one half — the rank (Mann-Whitney) formulation, which equals the
/// trapezoidal area under the ROC curve.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));

    // Midranks over tie groups, accumulated for the OOD sample set.
    let mut ood_rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        let ood_in_group = pooled[i..j].iter().filter(|(_, is_ood)| *is_ood).count();
        ood_rank_sum += midrank * ood_in_group as f64;
        i = j;
    }
    let n_ood = ood_scores.len() as f64;
    let n_id = id_scores.len() as f64;
    let u = ood_rank_sum - n_ood * (n_ood + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// Full ROC curve by sweeping every distinct score as a threshold, highest
/// first. The stored `auroc` is the trapezoidal area of the stored points.
pub fn roc_curve(id_scores: &[f64], ood_scores: &[f64]) -> Result<RocCurve> {
    check_nonempty(id_scores, ood_scores)?;
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    // Descending: flag everything scoring >= threshold as OOD.
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must not be NaN"));

    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n_id, tp as f64 / n_ood));
        i = j;
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x1, y1), (x2, y2)) = (w[0], w[1]);
        area += (x2 - x1) * (y1 + y2) / 2.0;
    }
    Ok(RocCurve {
        points,
        auroc: area,
    })
}

/// Smallest achievable fraction of ID samples scored at or above a threshold
/// that keeps at least 95% of OOD samples at or above it. With n OOD samples
/// the requirement is ceil(0.95 n) of them above threshold.
pub fn fpr_at_95_tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let mut ood_desc = ood_scores.to_vec();
    ood_desc.sort_by(|a, b| b.partial_cmp(a).expect("scores must not be NaN"));
    let required = ((0.95 * ood_desc.len() as f64).ceil() as usize).max(1);
    // The highest feasible threshold is the required-th largest OOD score;
    // FPR is nonincreasing in the threshold, so this is optimal.
    let threshold = ood_desc[required - 1];
    let false_alarms = id_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(false_alarms as f64 / id_scores.len() as f64)
}

/// Empirical 1-D Wasserstein-1 distance.
///
/// Both samples are viewed through piecewise-linear empirical quantile
/// functions anchored at midpoint positions (j + 0.5)/n with flat tails, and
/// the integral of |Q_a(u) - Q_b(u)| over [0,1] is computed exactly segment
/// by segment. For equal-length samples with aligned sign this reduces to
/// the classic sorted-sample coupling mean |a_(i) - b_(i)|.
pub fn wasserstein1(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::EmptyInput("wasserstein1 samples"));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("samples must not be NaN"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("samples must not be NaN"));

    // Breakpoints of either quantile interpolant.
    let mut knots: Vec<f64> = Vec::with_capacity(a.len() + b.len() + 2);
    knots.push(0.0);
    knots.push(1.0);
    for (j, _) in a.iter().enumerate() {
        knots.push((j as f64 + 0.5) / a.len() as f64);
    }
    for (j, _) in b.iter().enumerate() {
        knots.push((j as f64 + 0.5) / b.len() as f64);
    }
    knots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    knots.dedup();

    let mut total = 0.0;
    for w in knots.windows(2) {
        let (u0, u1) = (w[0], w[1]);
        let width = u1 - u0;
        if width <= 0.0 {
            continue;
        }
        let d0 = quantile_midpoint(&a, u0) - quantile_midpoint(&b, u0);
        let d1 = quantile_midpoint(&a, u1) - quantile_midpoint(&b, u1);
        total += if d0 * d1 >= 0.0 {
            width * (d0.abs() + d1.abs()) / 2.0
        } else {
            // The linear difference crosses zero inside the segment.
            let root = d0 / (d0 - d1);
            width * (root * d0.abs() + (1.0 - root) * d1.abs()) / 2.0
        };
    }
    Ok(total)
}

/// Median with the midpoint convention for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values must not be NaN"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Piecewise-linear empirical quantile with sample j at position
/// (j + 0.5)/n and flat extrapolation beyond the extreme samples.
pub fn quantile_midpoint(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    let t = u * n as f64 - 0.5;
    if t <= 0.0 {
        sorted[0]
    } else if t >= (n - 1) as f64 {
        sorted[n - 1]
    } else {
        let j = t.floor() as usize;
        let frac = t - j as f64;
        sorted[j] * (1.0 - frac) + sorted[j + 1] * frac
    }
}

/// Fixed-bin histogram export for figure reproduction.
#[derive(Clone, Debug, Serialize)]
pub struct Histogram {
    /// bins + 1 edges, evenly spaced over [lo, hi].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Histogram of `samples` over [lo, hi] with `bins` equal bins; values at
/// `hi` land in the last bin, values outside the range are clamped into the
/// boundary bins. Figures pool the min/max of every series they draw so all
/// series share edges.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    assert!(bins > 0, "histogram needs at least one bin");
    let span = if hi > lo { hi - lo } else { 1.0 };
    let edges: Vec<f64> = (0..=bins)
        .map(|i| lo + span * i as f64 / bins as f64)
        .collect();
    let mut counts = vec![0u64; bins];
    for &s in samples {
        let mut idx = ((s - lo) / span * bins as f64).floor() as i64;
        idx = idx.clamp(0, bins as i64 - 1);
        counts[idx as usize] += 1;
    }
    Histogram { edges, counts }
}
