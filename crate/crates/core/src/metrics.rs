//! Accuracy, average precision, demographic parity and equal-opportunity
//! gaps, and the area-over-curve summary of a trade-off curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores at or above `threshold` are predicted positive.
pub fn hard_labels(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

fn check_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{op}: length mismatch ({a} vs {b})")));
    }
    Ok(())
}

pub fn accuracy(predicted: &[bool], labels: &[bool]) -> Result<f64> {
    check_len("accuracy", predicted.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty sample".into()));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Rate of `predicted` within each group of `groups`, restricted to rows
/// where `keep` holds. Groups are `0..num_groups`; a group with no kept rows
/// maps to `None`.
fn conditional_rates(
    predicted: &[bool],
    groups: &[usize],
    keep: impl Fn(usize) -> bool,
    num_groups: usize,
) -> Vec<(usize, Option<f64>)> {
    let mut hits = vec![0usize; num_groups];
    let mut totals = vec![0usize; num_groups];
    for (i, (&p, &g)) in predicted.iter().zip(groups).enumerate() {
        if g < num_groups && keep(i) {
            totals[g] += 1;
            hits[g] += p as usize;
        }
    }
    totals
        .iter()
        .zip(&hits)
        .map(|(&n, &h)| (n, (n > 0).then(|| h as f64 / n as f64)))
        .collect()
}

fn max_gap(rates: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = rates.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r), hi.max(r))
    });
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

fn group_count(groups: &[usize]) -> usize {
    groups.iter().max().map_or(0, |&g| g + 1)
}

/// `max_{i,j} |P(ŷ=1 | a=i) − P(ŷ=1 | a=j)|` over groups `0..G`, where `G`
/// is one more than the largest group id seen.
pub fn demographic_parity(predicted: &[bool], groups: &[usize]) -> Result<f64> {
    demographic_parity_over(predicted, groups, group_count(groups))
}

pub fn demographic_parity_over(predicted: &[bool], groups: &[usize], num_groups: usize) -> Result<f64> {
    check_len("demographic parity", predicted.len(), groups.len())?;
    let rates = conditional_rates(predicted, groups, |_| true, num_groups);
    let mut present = Vec::with_capacity(num_groups);
    for (g, (_, rate)) in rates.into_iter().enumerate() {
        match rate {
            Some(r) => present.push(r),
            None => return Err(Error::Metric(format!("group {g} has no samples"))),
        }
    }
    Ok(max_gap(present.into_iter()))
}

/// Largest pairwise difference in true-positive rate across groups.
pub fn equal_opportunity_gap(predicted: &[bool], labels: &[bool], groups: &[usize]) -> Result<f64> {
    equal_opportunity_gap_over(predicted, labels, groups, group_count(groups))
}

pub fn equal_opportunity_gap_over(
    predicted: &[bool],
    labels: &[bool],
    groups: &[usize],
    num_groups: usize,
) -> Result<f64> {
    check_len("equal opportunity", predicted.len(), labels.len())?;
    check_len("equal opportunity", predicted.len(), groups.len())?;
    let rates = conditional_rates(predicted, groups, |i| labels[i], num_groups);
    let mut present = Vec::with_capacity(num_groups);
    for (g, (_, rate)) in rates.into_iter().enumerate() {
        match rate {
            Some(r) => present.push(r),
            None => return Err(Error::Metric(format!("group {g} has no positive labels"))),
        }
    }
    Ok(max_gap(present.into_iter()))
}

/// Step-wise average precision. Rows are ranked by descending score with
/// ties kept in original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len("average precision", scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Area over a `(Δ_DP, accuracy)` curve, normalised by `dp_max`:
///
/// `(1/dp_max) ∫₀^dp_max max(0, acc*(t) − acc_base) dt`, where `acc*(t)` is
/// the best accuracy among points with `Δ_DP ≤ t` (or `acc_base` if none).
/// The integrand is a step function, so the integral is exact.
pub fn area_over_curve(points: &[(f64, f64)], dp_max: f64, acc_base: f64) -> Result<f64> {
    if !(dp_max > 0.0) || !dp_max.is_finite() {
        return Err(Error::Config(format!("dp_max must be positive, got {dp_max}")));
    }
    if points.is_empty() {
        return Err(Error::Config("area over curve needs at least one point".into()));
    }
    let mut sorted: Vec<(f64, f64)> = points
        .iter()
        .filter(|(dp, _)| *dp <= dp_max)
        .map(|&(dp, acc)| (dp.max(0.0), acc))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best = acc_base;
    let mut prev = 0.0;
    let mut area = 0.0;
    for (dp, acc) in sorted {
        // only points that raise the running best open a new step
        if acc > best {
            area += (best - acc_base) * (dp - prev);
            prev = dp;
            best = acc;
        }
    }
    area += (best - acc_base) * (dp_max - prev);
    Ok(area / dp_max)
}

/// Accuracy of always predicting the more frequent label.
pub fn majority_accuracy(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pos = labels.iter().filter(|&&y| y).count();
    pos.max(labels.len() - pos) as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: usize,
    pub count: usize,
    pub positive_rate: Option<f64>,
    pub true_positive_rate: Option<f64>,
}

/// Every metric for one set of predictions. Serialized field names are a
/// stable interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub average_precision: Option<f64>,
    pub dp_gap: f64,
    pub eo_gap: Option<f64>,
    pub groups: Vec<GroupReport>,
}

/// Computes the full report over groups `0..num_groups`. Gaps are taken over
/// the groups that have samples (for Δ_DP) or positive labels (for ΔEO);
/// undefined quantities are `None`.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    groups: &[usize],
    num_groups: usize,
    threshold: f64,
) -> Result<MetricsReport> {
    check_len("evaluate", scores.len(), labels.len())?;
    check_len("evaluate", scores.len(), groups.len())?;
    let predicted = hard_labels(scores, threshold);
    let pos_rates = conditional_rates(&predicted, groups, |_| true, num_groups);
    let tprs = conditional_rates(&predicted, groups, |i| labels[i], num_groups);
    let defined_tprs: Vec<f64> = tprs.iter().filter_map(|t| t.1).collect();
    let eo_gap = (defined_tprs.len() == pos_rates.iter().filter(|r| r.1.is_some()).count()
        && !defined_tprs.is_empty())
    .then(|| max_gap(defined_tprs.into_iter()));

    Ok(MetricsReport {
        n: scores.len(),
        threshold,
        accuracy: accuracy(&predicted, labels)?,
        average_precision: average_precision(scores, labels).ok(),
        dp_gap: max_gap(pos_rates.iter().filter_map(|r| r.1)),
        eo_gap,
        groups: pos_rates
            .iter()
            .zip(&tprs)
            .enumerate()
            .map(|(g, (&(count, pr), &(_, tpr)))| GroupReport {
                group: g,
                count,
                positive_rate: pr,
                true_positive_rate: tpr,
            })
            .collect(),
    })
}

/// Mean and maximum of a slice of values, for per-cell seed aggregation.
pub fn mean_and_max(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, max)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_len("spearman", xs.len(), ys.len())?;
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Metric("spearman correlation of a constant sequence".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Per-group positive prediction rates keyed by group id, for groups present
/// in the sample.
pub fn positive_rates(predicted: &[bool], groups: &[usize]) -> BTreeMap<usize, f64> {
    conditional_rates(predicted, groups, |_| true, group_count(groups))
        .into_iter()
        .enumerate()
        .filter_map(|(g, (_, r))| r.map(|r| (g, r)))
        .collect()
}
