//! Classification and fairness objectives over recorded graphs.
//!
//! Every optimizer in this crate minimizes. The distraction player wants the
//! protected attribute to be unpredictable from the scores, so
//! [`scaled_fairness_loss`] returns `η·gap` for the group-gap surrogate and
//! `-η·nll` for the protected negative log-likelihood; descending either one
//! pushes the group-conditional score distributions together.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId, Op};
use crate::error::{Error, Result};

/// Probabilities are kept this far away from 0 and 1 when no logit is
/// available.
pub const PROB_CLAMP: f64 = 1e-12;
/// Logits are clamped to `±LOGIT_CLAMP` before Gaussian fitting.
pub const LOGIT_CLAMP: f64 = 30.0;
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessLossKind {
    /// `Σ_g π_g (mean_g(s) − mean(s))²`.
    #[default]
    GroupGap,
    /// Batch-Bayes estimate of `mean_i −log p(a_i | s_i)`.
    ProtectedNll,
}

impl std::fmt::Display for FairnessLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FairnessLossKind::GroupGap => "group-gap",
            FairnessLossKind::ProtectedNll => "protected-nll",
        })
    }
}

/// Per-group summary of a batch of scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    /// Group ids present in the batch, ascending.
    pub groups: Vec<usize>,
    pub counts: Vec<usize>,
    pub means: Vec<f64>,
    /// Population (biased) variances.
    pub variances: Vec<f64>,
    pub priors: Vec<f64>,
}

impl GroupStats {
    pub fn compute(scores: &[f64], groups: &[usize]) -> Result<Self> {
        if scores.len() != groups.len() {
            return Err(Error::Shape {
                op: "group-stats",
                left: (scores.len(), 1),
                right: (groups.len(), 1),
            });
        }
        let members = group_members(groups);
        let m = scores.len() as f64;
        let mut stats = GroupStats {
            groups: Vec::new(),
            counts: Vec::new(),
            means: Vec::new(),
            variances: Vec::new(),
            priors: Vec::new(),
        };
        for (g, idx) in members {
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| scores[i]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (scores[i] - mean).powi(2)).sum::<f64>() / n;
            stats.groups.push(g);
            stats.counts.push(idx.len());
            stats.means.push(mean);
            stats.variances.push(var);
            stats.priors.push(n / m);
        }
        Ok(stats)
    }
}

/// Row indices of each present group, keyed by group id.
pub fn group_members(groups: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    members
}

fn check_column(g: &Graph, s: NodeId, n: usize, op: &'static str) -> Result<usize> {
    let shape = g.value(s).shape();
    if shape.1 != 1 || shape.0 != n {
        return Err(Error::Shape {
            op,
            left: shape,
            right: (n, 1),
        });
    }
    if n == 0 {
        return Err(Error::Contract(format!("{op} needs at least one sample")));
    }
    Ok(n)
}

/// The pre-sigmoid node when `s` was produced by a sigmoid.
fn sigmoid_input(g: &Graph, s: NodeId) -> Option<NodeId> {
    (*g.op(s) == Op::Sigmoid).then(|| g.parents(s)[0])
}

/// Mean binary cross-entropy of probabilities `s` (`m×1`) against 0/1 labels.
pub fn bce_loss(g: &mut Graph, s: NodeId, labels: &[f64]) -> Result<NodeId> {
    let m = check_column(g, s, labels.len(), "bce")?;
    let pos = g.constant(Matrix::column(labels.to_vec()));
    let neg = g.constant(Matrix::column(labels.iter().map(|y| 1.0 - y).collect()));
    let (log_p, log_q) = match sigmoid_input(g, s) {
        Some(z) => {
            let lp = g.log_sigmoid(z);
            let nz = g.neg(z);
            (lp, g.log_sigmoid(nz))
        }
        None => {
            let sc = g.clamp(s, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let lp = g.log(sc)?;
            let ones = g.constant(Matrix::filled(m, 1, 1.0));
            let q = g.sub(ones, sc)?;
            (lp, g.log(q)?)
        }
    };
    let a = g.mul(pos, log_p)?;
    let b = g.mul(neg, log_q)?;
    let ll = g.add(a, b)?;
    let total = g.sum(ll);
    Ok(g.scale(total, -1.0 / m as f64))
}

/// Demographic-parity surrogate `Σ_g π_g (mean_g(s) − mean(s))²`.
/// Exactly zero, with no gradient, for a single-group batch.
pub fn group_gap_loss(g: &mut Graph, s: NodeId, groups: &[usize]) -> Result<NodeId> {
    let m = check_column(g, s, groups.len(), "group-gap")?;
    let members = group_members(groups);
    if members.len() < 2 {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let overall = g.mean(s)?;
    let neg_overall = g.neg(overall);
    let mut total: Option<NodeId> = None;
    for idx in members.values() {
        let rows = g.select_rows(s, idx)?;
        let mean_g = g.mean(rows)?;
        let diff = g.add(mean_g, neg_overall)?;
        let sq = g.square(diff);
        let term = g.scale(sq, idx.len() as f64 / m as f64);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least two groups"))
}

/// Logits of `s`, clamped to `±LOGIT_CLAMP`.
fn clamped_logits(g: &mut Graph, s: NodeId) -> Result<NodeId> {
    let z = match sigmoid_input(g, s) {
        Some(z) => z,
        None => {
            let sc = g.clamp(s, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let m = g.value(s).rows();
            let ones = g.constant(Matrix::filled(m, 1, 1.0));
            let q = g.sub(ones, sc)?;
            let lp = g.log(sc)?;
            let lq = g.log(q)?;
            g.sub(lp, lq)?
        }
    };
    Ok(g.clamp(z, -LOGIT_CLAMP, LOGIT_CLAMP))
}

/// Mean negative log posterior `−log p(a_i | s_i)` under per-group Gaussians
/// fitted to the batch logits, with priors from group frequencies.
///
/// A single-group batch scores 0. If any present group has fewer than two
/// samples, no Gaussian is fitted and the posterior falls back to the prior.
pub fn protected_nll_loss(g: &mut Graph, s: NodeId, groups: &[usize]) -> Result<NodeId> {
    let m = check_column(g, s, groups.len(), "protected-nll")?;
    let members = group_members(groups);
    if members.len() < 2 {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let log_prior: BTreeMap<usize, f64> = members
        .iter()
        .map(|(&k, idx)| (k, (idx.len() as f64 / m as f64).ln()))
        .collect();
    if members.values().any(|idx| idx.len() < 2) {
        let value = -groups.iter().map(|k| log_prior[k]).sum::<f64>() / m as f64;
        return Ok(g.constant(Matrix::scalar(value)));
    }

    let l = clamped_logits(g, s)?;
    let mut columns = Vec::with_capacity(members.len());
    for (k, idx) in &members {
        let lk = g.select_rows(l, idx)?;
        let mu = g.mean(lk)?;
        let neg_mu = g.neg(mu);
        let dev = g.add_row(lk, neg_mu)?;
        let dev_sq = g.square(dev);
        let raw_var = g.mean(dev_sq)?;
        if g.scalar(raw_var) < VARIANCE_FLOOR {
            log::warn!(
                "group {k}: logit variance {:.3e} floored to {VARIANCE_FLOOR:e}",
                g.scalar(raw_var)
            );
        }
        let var = g.clamp(raw_var, VARIANCE_FLOOR, f64::INFINITY);

        // log π_k + log N(l_i; μ_k, σ²_k) for every sample i
        let d = g.add_row(l, neg_mu)?;
        let d2 = g.square(d);
        let inv_var = g.recip(var)?;
        let quad = g.mul_scalar(d2, inv_var)?;
        let quad = g.scale(quad, -0.5);
        let log_var = g.log(var)?;
        let half_log_var = g.scale(log_var, -0.5);
        let offset = g.constant(Matrix::scalar(log_prior[k] - 0.5 * (2.0 * PI).ln()));
        let bias = g.add(half_log_var, offset)?;
        columns.push(g.add_row(quad, bias)?);
    }
    let joint = g.concat_cols(&columns)?;
    let evidence = g.log_sum_exp_rows(joint);

    let position: BTreeMap<usize, usize> = members.keys().enumerate().map(|(c, &k)| (k, c)).collect();
    let mut mask = Matrix::zeros(m, members.len());
    for (i, k) in groups.iter().enumerate() {
        mask.set(i, position[k], 1.0);
    }
    let mask = g.constant(mask);
    let picked = g.mul(mask, joint)?;
    let picked = g.sum(picked);
    let evidence = g.sum(evidence);
    let log_post = g.sub(picked, evidence)?;
    Ok(g.scale(log_post, -1.0 / m as f64))
}

/// The selected fairness measure, unscaled and with its natural sign.
pub fn fairness_loss(
    g: &mut Graph,
    kind: FairnessLossKind,
    s: NodeId,
    groups: &[usize],
) -> Result<NodeId> {
    match kind {
        FairnessLossKind::GroupGap => group_gap_loss(g, s, groups),
        FairnessLossKind::ProtectedNll => protected_nll_loss(g, s, groups),
    }
}

/// Maps a raw fairness value onto the quantity the distraction optimizer
/// descends: `η·gap` or `−η·nll`.
pub fn descent_objective(
    g: &mut Graph,
    kind: FairnessLossKind,
    raw: NodeId,
    eta: f64,
) -> Result<NodeId> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("eta must be a finite value >= 0, got {eta}")));
    }
    Ok(match kind {
        FairnessLossKind::GroupGap => g.scale(raw, eta),
        FairnessLossKind::ProtectedNll => g.scale(raw, -eta),
    })
}

pub fn scaled_fairness_loss(
    g: &mut Graph,
    kind: FairnessLossKind,
    s: NodeId,
    groups: &[usize],
    eta: f64,
) -> Result<NodeId> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("eta must be a finite value >= 0, got {eta}")));
    }
    let raw = fairness_loss(g, kind, s, groups)?;
    descent_objective(g, kind, raw, eta)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn probs(g: &mut Graph, values: &[f64]) -> NodeId {
        g.param(Matrix::column(values.to_vec()))
    }

    /// Scores produced through a sigmoid, as in the model.
    fn via_logits(g: &mut Graph, logits: &[f64]) -> (NodeId, NodeId) {
        let z = g.param(Matrix::column(logits.to_vec()));
        (z, g.sigmoid(z))
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.5]);
        let l = bce_loss(&mut g, s, &[1.0]).unwrap();
        assert!((g.scalar(l) - LN2).abs() < 1e-15);
    }

    #[test]
    fn bce_of_perfect_prediction_is_tiny() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[1.0, 0.0, 1.0]);
        let l = bce_loss(&mut g, s, &[1.0, 0.0, 1.0]).unwrap();
        assert!(g.scalar(l) < 1e-10);
    }

    #[test]
    fn bce_hand_value() {
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((expected - 0.164252).abs() < 1e-6);
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.9, 0.2]);
        let l = bce_loss(&mut g, s, &[1.0, 0.0]).unwrap();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        // Same value through the fused log-sigmoid route.
        let mut g = Graph::new();
        let (_, s) = via_logits(&mut g, &[(0.9f64 / 0.1).ln(), (0.2f64 / 0.8).ln()]);
        let l = bce_loss(&mut g, s, &[1.0, 0.0]).unwrap();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_is_finite_when_saturated() {
        let mut g = Graph::new();
        let (z, s) = via_logits(&mut g, &[-60.0, 60.0]);
        let l = bce_loss(&mut g, s, &[1.0, 0.0]).unwrap();
        assert!((g.scalar(l) - 60.0).abs() < 1e-9);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(z).unwrap().is_finite());
    }

    #[test]
    fn bce_length_mismatch() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.5, 0.5]);
        assert!(matches!(bce_loss(&mut g, s, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn group_gap_two_singletons() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.8, 0.6]);
        let l = group_gap_loss(&mut g, s, &[0, 1]).unwrap();
        assert!((g.scalar(l) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn group_gap_zero_cases() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.1, 0.9, 0.4]);
        let l = group_gap_loss(&mut g, s, &[2, 2, 2]).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        let mut g = Graph::new();
        let s = probs(&mut g, &[0.3; 5]);
        let l = group_gap_loss(&mut g, s, &[0, 1, 2, 1, 0]).unwrap();
        assert!(g.scalar(l).abs() < 1e-30);
    }

    #[test]
    fn protected_nll_indistinguishable_groups_is_ln2() {
        let mut g = Graph::new();
        let (_, s) = via_logits(&mut g, &[-1.0, 0.5, 2.0, 2.0, -1.0, 0.5]);
        let l = protected_nll_loss(&mut g, s, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((g.scalar(l) - LN2).abs() < 1e-12, "{}", g.scalar(l));
    }

    #[test]
    fn protected_nll_single_group_is_zero() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.2, 0.7]);
        let l = protected_nll_loss(&mut g, s, &[1, 1]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn protected_nll_singleton_group_falls_back_to_prior() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.2, 0.7, 0.4]);
        let l = protected_nll_loss(&mut g, s, &[0, 0, 1]).unwrap();
        let expected = -(2.0 * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln()) / 3.0;
        assert!((g.scalar(l) - expected).abs() < 1e-15);
    }

    /// Posterior computed directly from the batch statistics, sample by
    /// sample, with no graph involved.
    fn brute_force_nll(logits: &[f64], groups: &[usize]) -> f64 {
        let ids: Vec<usize> = {
            let mut v = groups.to_vec();
            v.sort();
            v.dedup();
            v
        };
        let m = logits.len() as f64;
        let fit: Vec<(f64, f64, f64)> = ids
            .iter()
            .map(|&k| {
                let xs: Vec<f64> = logits
                    .iter()
                    .zip(groups)
                    .filter(|(_, &a)| a == k)
                    .map(|(&l, _)| l.clamp(-30.0, 30.0))
                    .collect();
                let n = xs.len() as f64;
                let mu = xs.iter().sum::<f64>() / n;
                let var = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).max(1e-8);
                (n / m, mu, var)
            })
            .collect();
        let density = |x: f64, mu: f64, var: f64| {
            (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
        };
        let mut total = 0.0;
        for (&l, &a) in logits.iter().zip(groups) {
            let l = l.clamp(-30.0, 30.0);
            let joint: Vec<f64> = fit.iter().map(|&(p, mu, v)| p * density(l, mu, v)).collect();
            let k = ids.iter().position(|&id| id == a).unwrap();
            total += -(joint[k] / joint.iter().sum::<f64>()).ln();
        }
        total / m
    }

    #[test]
    fn protected_nll_matches_brute_force_posterior() {
        let cases: [(&[f64], &[usize]); 3] = [
            (&[-4.0, -3.5, -4.2, 3.9, 4.1, 3.6], &[0, 0, 0, 1, 1, 1]),
            (&[0.3, -1.1, 0.8, 1.5, -0.2, 0.9], &[1, 0, 1, 0, 0, 1]),
            (&[0.1, 2.0, -2.0, 0.5, 0.7, -0.4], &[0, 2, 1, 2, 1, 0]),
        ];
        for (logits, groups) in cases {
            let mut g = Graph::new();
            let (_, s) = via_logits(&mut g, logits);
            let l = protected_nll_loss(&mut g, s, groups).unwrap();
            let oracle = brute_force_nll(logits, groups);
            assert!((g.scalar(l) - oracle).abs() < 1e-10, "{} vs {oracle}", g.scalar(l));
        }
        // Well separated groups are almost perfectly predictable.
        assert!(brute_force_nll(cases[0].0, cases[0].1) < 1e-6);
    }

    #[test]
    fn protected_nll_without_sigmoid_parent_uses_log_odds() {
        let logits = [0.3, -1.1, 0.8, 1.5, -0.2, 0.9];
        let p: Vec<f64> = logits.iter().map(|z: &f64| 1.0 / (1.0 + (-z).exp())).collect();
        let groups = [1, 0, 1, 0, 0, 1];
        let mut g = Graph::new();
        let s = probs(&mut g, &p);
        let l = protected_nll_loss(&mut g, s, &groups).unwrap();
        assert!((g.scalar(l) - brute_force_nll(&logits, &groups)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_variance_is_floored() {
        let mut g = Graph::new();
        let (_, s) = via_logits(&mut g, &[1.0, 1.0, -1.0, 0.0]);
        let l = protected_nll_loss(&mut g, s, &[0, 0, 1, 1]).unwrap();
        assert!(g.scalar(l).is_finite());
        let grads = g.backward(l).unwrap();
        assert!(grads.iter().all(|(_, m)| m.is_finite()));
    }

    #[test]
    fn eta_zero_gives_zero_loss_and_gradient() {
        for kind in [FairnessLossKind::GroupGap, FairnessLossKind::ProtectedNll] {
            let mut g = Graph::new();
            let (z, s) = via_logits(&mut g, &[0.2, -0.4, 1.1, 0.3]);
            let l = scaled_fairness_loss(&mut g, kind, s, &[0, 1, 0, 1], 0.0).unwrap();
            assert_eq!(g.scalar(l), 0.0);
            let grads = g.backward(l).unwrap();
            assert!(grads.get(z).unwrap().as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scaling_is_linear_in_eta() {
        for kind in [FairnessLossKind::GroupGap, FairnessLossKind::ProtectedNll] {
            let mut g = Graph::new();
            let (_, s) = via_logits(&mut g, &[0.2, -0.4, 1.1, 0.3]);
            let a = scaled_fairness_loss(&mut g, kind, s, &[0, 1, 0, 1], 100.0).unwrap();
            let b = scaled_fairness_loss(&mut g, kind, s, &[0, 1, 0, 1], 200.0).unwrap();
            assert_eq!(g.scalar(b), 2.0 * g.scalar(a));
        }
    }

    #[test]
    fn negative_eta_is_a_config_error() {
        let mut g = Graph::new();
        let s = probs(&mut g, &[0.5, 0.5]);
        let err = scaled_fairness_loss(&mut g, FairnessLossKind::GroupGap, s, &[0, 1], -1.0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    /// A small descent step on the scaled objective must make the groups
    /// harder to tell apart under both variants.
    #[test]
    fn descent_direction_reduces_group_predictability() {
        let logits = [1.2, 0.8, 1.5, -0.3, -0.9, 0.1];
        let groups = [0, 0, 0, 1, 1, 1];
        for kind in [FairnessLossKind::GroupGap, FairnessLossKind::ProtectedNll] {
            let mut g = Graph::new();
            let (z, s) = via_logits(&mut g, &logits);
            let raw = fairness_loss(&mut g, kind, s, &groups).unwrap();
            let before = g.scalar(raw);
            let obj = descent_objective(&mut g, kind, raw, 1.0).unwrap();
            let grads = g.backward(obj).unwrap();
            let step: Vec<f64> = logits
                .iter()
                .zip(grads.get(z).unwrap().as_slice())
                .map(|(l, d)| l - 1e-3 * d)
                .collect();
            let mut g2 = Graph::new();
            let (_, s2) = via_logits(&mut g2, &step);
            let after = fairness_loss(&mut g2, kind, s2, &groups).unwrap();
            let after = g2.scalar(after);
            match kind {
                FairnessLossKind::GroupGap => assert!(after < before),
                FairnessLossKind::ProtectedNll => assert!(after > before),
            }
        }
    }

    #[test]
    fn group_stats_invariants() {
        let st = GroupStats::compute(&[0.1, 0.5, 0.9, 0.3], &[1, 0, 1, 1]).unwrap();
        assert_eq!(st.groups, vec![0, 1]);
        assert_eq!(st.counts.iter().sum::<usize>(), 4);
        assert!((st.priors.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(st.variances.iter().all(|&v| v >= 0.0));
        assert_eq!(st.variances[0], 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn group_gap_nonnegative_and_order_invariant(
                rows in prop::collection::vec((0.01f64..0.99, 0usize..3), 2..20),
                seed in any::<u64>(),
            ) {
                let (s, a): (Vec<f64>, Vec<usize>) = rows.iter().copied().unzip();
                let mut g = Graph::new();
                let n = g.constant(Matrix::column(s.clone()));
                let l = group_gap_loss(&mut g, n, &a).unwrap();
                let v = g.scalar(l);
                prop_assert!(v >= 0.0);

                let mut perm: Vec<usize> = (0..s.len()).collect();
                let k = (seed as usize) % s.len();
                perm.rotate_left(k);
                perm.reverse();
                let s2: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
                let a2: Vec<usize> = perm.iter().map(|&i| a[i]).collect();
                for kind in [FairnessLossKind::GroupGap, FairnessLossKind::ProtectedNll] {
                    let mut g = Graph::new();
                    let n1 = g.constant(Matrix::column(s.clone()));
                    let l1 = fairness_loss(&mut g, kind, n1, &a).unwrap();
                    let v1 = g.scalar(l1);
                    let mut g = Graph::new();
                    let n2 = g.constant(Matrix::column(s2.clone()));
                    let l2 = fairness_loss(&mut g, kind, n2, &a2).unwrap();
                    let v2 = g.scalar(l2);
                    prop_assert!((v1 - v2).abs() <= 1e-12 * (1.0 + v1.abs()));
                }
            }
        }
    }
}
