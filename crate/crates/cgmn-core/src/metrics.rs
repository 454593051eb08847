//! Evaluation metrics: MSE, Spearman's rho, Kendall's tau-b, precision at k
//! and ROC AUC.
//!
//! Ranking direction is "higher score = more similar" throughout; edit
//! distances are converted to similarities before they reach this module, so
//! top-k always means most similar.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("degenerate input: {0} is constant")]
    Degenerate(&'static str),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds candidate count {count}")]
    KTooLarge { k: usize, count: usize },
    #[error("auc needs both classes; labels are single-class")]
    SingleClass,
    #[error("labels must be 1 or -1, got {0}")]
    BadLabel(i8),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

fn check_paired(pred: &[f64], truth: &[f64]) -> Result<(), MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, v) in pred.iter().chain(truth).enumerate() {
        if !v.is_finite() {
            return Err(MetricsError::NonFinite(i % pred.len()));
        }
    }
    Ok(())
}

/// Mean squared error between predictions and ground truth.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check_paired(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Average ranks (1-based), with tied values receiving the mean of the
/// positions they span.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
/// Constant inputs have no defined rank correlation and are rejected.
pub fn spearman_rho(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check_paired(pred, truth)?;
    if pred.len() < 2 {
        return Err(MetricsError::TooShort(pred.len()));
    }
    if pred.iter().all(|&v| v == pred[0]) {
        return Err(MetricsError::Degenerate("pred"));
    }
    if truth.iter().all(|&v| v == truth[0]) {
        return Err(MetricsError::Degenerate("truth"));
    }
    let rp = average_ranks(pred);
    let rt = average_ranks(truth);
    let n = pred.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut var_p, mut var_t) = (0.0, 0.0, 0.0);
    for (p, t) in rp.iter().zip(&rt) {
        let (dp, dt) = (p - mean, t - mean);
        cov += dp * dt;
        var_p += dp * dp;
        var_t += dt * dt;
    }
    Ok(cov / (var_p.sqrt() * var_t.sqrt()))
}

/// Kendall's rank correlation with tie handling (tau-b):
/// `(C - D) / sqrt((n0 - t_pred)(n0 - t_truth))` where `n0 = n(n-1)/2` and
/// `t_*` count tied pairs in each argument. Without ties this reduces to
/// `(C - D) / n0`.
pub fn kendall_tau(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check_paired(pred, truth)?;
    let n = pred.len();
    if n < 2 {
        return Err(MetricsError::TooShort(n));
    }
    if pred.iter().all(|&v| v == pred[0]) {
        return Err(MetricsError::Degenerate("pred"));
    }
    if truth.iter().all(|&v| v == truth[0]) {
        return Err(MetricsError::Degenerate("truth"));
    }
    let (mut concordant, mut discordant) = (0u64, 0u64);
    let (mut ties_pred, mut ties_truth) = (0u64, 0u64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dp = pred[i] - pred[j];
            let dt = truth[i] - truth[j];
            if dp == 0.0 {
                ties_pred += 1;
            }
            if dt == 0.0 {
                ties_truth += 1;
            }
            if dp != 0.0 && dt != 0.0 {
                if (dp > 0.0) == (dt > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = ((n0 - ties_pred as f64) * (n0 - ties_truth as f64)).sqrt();
    Ok((concordant as f64 - discordant as f64) / denom)
}

/// One query graph with its scored candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedQueryResult {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub pred: f64,
    pub truth: f64,
}

fn top_k_ids<'a>(
    candidates: &'a [Candidate],
    k: usize,
    key: impl Fn(&Candidate) -> f64,
) -> Vec<&'a str> {
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    // descending score; ties broken by candidate id for determinism
    order.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.id.cmp(&b.id)));
    order[..k].iter().map(|c| c.id.as_str()).collect()
}

/// `|top_k(pred) ∩ top_k(truth)| / k` for one query.
pub fn precision_at_k(result: &RankedQueryResult, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if k > result.candidates.len() {
        return Err(MetricsError::KTooLarge {
            k,
            count: result.candidates.len(),
        });
    }
    let by_pred = top_k_ids(&result.candidates, k, |c| c.pred);
    let by_truth = top_k_ids(&result.candidates, k, |c| c.truth);
    let hits = by_pred.iter().filter(|id| by_truth.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

/// Area under the ROC curve via the rank-sum statistic: the probability that
/// a random positive outranks a random negative, with ties counting one half.
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(MetricsError::NonFinite(i));
        }
    }
    for &l in labels {
        if l != 1 && l != -1 {
            return Err(MetricsError::BadLabel(l));
        }
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cands(list: &[(&str, f64, f64)]) -> RankedQueryResult {
        RankedQueryResult {
            query_id: "q".into(),
            candidates: list
                .iter()
                .map(|&(id, pred, truth)| Candidate {
                    id: id.into(),
                    pred,
                    truth,
                })
                .collect(),
        }
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[0.5, 0.25], &[0.5, 0.25]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!((mse(&[0.1, 0.2], &[0.2, 0.4]).unwrap() - 0.025).abs() < 1e-15);
        assert_eq!(mse(&[0.0], &[1.0, 2.0]), Err(MetricsError::LengthMismatch(1, 2)));
        assert_eq!(mse(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let rho = spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((rho - 0.5).abs() < 1e-15);
        assert_eq!(
            spearman_rho(&[1.0, 1.0], &[1.0, 2.0]),
            Err(MetricsError::Degenerate("pred"))
        );
    }

    #[test]
    fn kendall_cases() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[5.0, 6.0, 7.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let tau = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((tau - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            kendall_tau(&[2.0, 2.0], &[1.0, 2.0]),
            Err(MetricsError::Degenerate("pred"))
        );
    }

    #[test]
    fn precision_cases() {
        let identical = cands(&[("a", 3.0, 3.0), ("b", 2.0, 2.0), ("c", 1.0, 1.0)]);
        assert_eq!(precision_at_k(&identical, 3).unwrap(), 1.0);

        let disjoint = cands(&[
            ("a", 4.0, 1.0),
            ("b", 3.0, 2.0),
            ("c", 2.0, 3.0),
            ("d", 1.0, 4.0),
        ]);
        assert_eq!(precision_at_k(&disjoint, 2).unwrap(), 0.0);

        // pred top3 = {a,b,c}, truth top3 = {a,c,d} -> 2/3
        let mixed = cands(&[
            ("a", 4.0, 4.0),
            ("b", 3.0, 1.0),
            ("c", 2.0, 3.0),
            ("d", 1.0, 2.0),
        ]);
        assert!((precision_at_k(&mixed, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        assert_eq!(precision_at_k(&identical, 0), Err(MetricsError::ZeroK));
        assert_eq!(
            precision_at_k(&identical, 4),
            Err(MetricsError::KTooLarge { k: 4, count: 3 })
        );
    }

    #[test]
    fn precision_tie_break_is_deterministic() {
        // all-equal predictions: top-k by id
        let tied = cands(&[("b", 1.0, 3.0), ("a", 1.0, 1.0), ("c", 1.0, 2.0)]);
        // pred top2 by id = {a,b}; truth top2 = {b,c} -> 1/2
        assert!((precision_at_k(&tied, 2).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, -1, -1]).unwrap(), 1.0);
        assert!((auc(&[0.9, 0.8, 0.3, 0.2], &[1, -1, 1, -1]).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[1, -1, 1, -1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.5, 0.7], &[1, 1]), Err(MetricsError::SingleClass));
        assert_eq!(auc(&[0.5], &[2]), Err(MetricsError::BadLabel(2)));
    }

    #[test]
    fn rank_metrics_invariant_under_monotone_transform() {
        let pred = [0.3f64, 0.9, 0.1, 0.5, 0.7];
        let truth = [1.0, 4.0, 2.0, 3.0, 5.0];
        let transformed: Vec<f64> = pred.iter().map(|&x| (5.0 * x).exp()).collect();
        let rho_a = spearman_rho(&pred, &truth).unwrap();
        let rho_b = spearman_rho(&transformed, &truth).unwrap();
        assert!((rho_a - rho_b).abs() < 1e-12);
        let tau_a = kendall_tau(&pred, &truth).unwrap();
        let tau_b = kendall_tau(&transformed, &truth).unwrap();
        assert!((tau_a - tau_b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_flip_and_transform(scores in proptest::collection::vec(0.0f64..1.0, 4..40)) {
            let labels: Vec<i8> = scores
                .iter()
                .enumerate()
                .map(|(i, _)| if i % 2 == 0 { 1 } else { -1 })
                .collect();
            let a = auc(&scores, &labels).unwrap();
            // strictly increasing transform preserves AUC
            let transformed: Vec<f64> = scores.iter().map(|&s| s.powi(3) + 2.0 * s).collect();
            let b = auc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            // flipping labels maps AUC to 1 - AUC
            let flipped: Vec<i8> = labels.iter().map(|&l| -l).collect();
            let c = auc(&scores, &flipped).unwrap();
            prop_assert!((a + c - 1.0).abs() < 1e-12);
        }
    }
}
