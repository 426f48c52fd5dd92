//! Evaluation metrics: ranking (AUROC, AUPRC), thresholded classification,
//! Pearson correlation with a t-test p-value, and masked regression error.
//!
//! AUROC and AUPRC are computed so the only rounding is one final division
//! (AUROC) or a fixed-order sum of integer-ratio terms (AUPRC): ties
//! contribute exact half-pairs, and the AUPRC ranking breaks score ties by
//! original index under a stable descending sort. A brute-force pairwise
//! re-derivation therefore reproduces both values bit-for-bit, which the
//! tests assert on random instances.

use serde::{Deserialize, Serialize};

use crate::special::t_two_sided_p;

fn check_inputs(scores: &[f64], labels: &[u8]) {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    assert!(scores.iter().all(|s| s.is_finite()), "scores must be finite");
    assert!(labels.iter().all(|&l| l <= 1), "labels must be 0 or 1");
}

/// Area under the ROC curve; ties count as half a concordant pair.
/// `None` when only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    check_inputs(scores, labels);
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));

    // Twice the concordant-pair count, so a tie adds an integer 1.
    let mut num2: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos_here = 0u64;
        let mut neg_here = 0u64;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        num2 += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }
    Some(num2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Ranking by descending score with ties broken by original index.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: equal scores keep index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));
    order
}

/// Average precision: mean over positives of precision at each positive's
/// rank. `None` when there are no positives.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    check_inputs(scores, labels);
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return None;
    }
    let order = descending_order(scores);
    let mut tp = 0u64;
    let mut acc = 0.0f64;
    for (k0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            tp += 1;
            acc += tp as f64 / (k0 as u64 + 1) as f64;
        }
    }
    Some(acc / n_pos as f64)
}

/// Classification quality at a fixed decision threshold (predict positive
/// when score >= threshold), plus cohort composition. `precision` is 0 with
/// `precision_defined` false when nothing is predicted positive; `recall`
/// likewise when there are no true positives in the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub precision_defined: bool,
    pub recall: f64,
    pub recall_defined: bool,
    pub f1: f64,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        check_inputs(scores, labels);
        assert!(!scores.is_empty(), "metrics need at least one example");
        let n = scores.len();
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        let n_neg = n - n_pos;
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        let mut correct = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            let pred = s >= threshold;
            match (pred, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
            if pred == (l == 1) {
                correct += 1;
            }
        }
        let precision_defined = tp + fp > 0;
        let precision = if precision_defined { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall_defined = tp + fne > 0;
        let recall = if recall_defined { tp as f64 / (tp + fne) as f64 } else { 0.0 };
        let f1 = if precision_defined && recall_defined && precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        MetricsReport {
            n,
            n_pos,
            n_neg,
            threshold,
            auroc: auroc(scores, labels),
            auprc: auprc(scores, labels),
            accuracy: correct as f64 / n as f64,
            precision,
            precision_defined,
            recall,
            recall_defined,
            f1,
        }
    }
}

/// Pearson correlation with a two-sided t-test p-value on n − 2 degrees of
/// freedom. `None` for n < 3 or when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    assert_eq!(x.len(), y.len(), "pearson inputs must align");
    let n = x.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let df = nf - 2.0;
        let t = r * (df / (1.0 - r * r)).sqrt();
        t_two_sided_p(t, df)
    };
    Some((r, p))
}

/// Mean squared error over entries whose mask is true. `None` when the mask
/// selects nothing.
pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Option<f64> {
    assert!(pred.len() == target.len() && pred.len() == mask.len(), "masked_mse inputs must align");
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i] - target[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) pairwise AUROC sharing the exact integer numerator.
    fn auroc_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> =
            scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
        let neg: Vec<f64> =
            scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut num2 = 0u64;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    num2 += 2;
                } else if p == n {
                    num2 += 1;
                }
            }
        }
        Some(num2 as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64)
    }

    /// Average precision recomputing each prefix from scratch, same ranking
    /// rule and summation order as the fast path.
    fn auprc_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        if n_pos == 0 {
            return None;
        }
        let order = descending_order(scores);
        let mut acc = 0.0;
        for k in 1..=order.len() {
            if labels[order[k - 1]] == 1 {
                let tp = order[..k].iter().filter(|&&i| labels[i] == 1).count();
                acc += tp as f64 / k as f64;
            }
        }
        Some(acc / n_pos as f64)
    }

    #[test]
    fn auroc_known_value() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(auroc(&scores, &labels), Some(0.75));
    }

    #[test]
    fn auprc_known_value() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        // Positives sit at descending ranks 1 and 3: (1/1 + 2/3) / 2.
        assert_eq!(auprc(&scores, &labels), Some((1.0 + 2.0 / 3.0) / 2.0));
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auroc(&scores, &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(auroc(&scores, &[0, 0, 1, 1]), Some(0.0));
        assert_eq!(auprc(&scores, &[1, 1, 0, 0]), Some(1.0));
    }

    #[test]
    fn all_tied_scores_give_half_auroc() {
        let scores = [0.3; 10];
        let labels = [1, 0, 1, 0, 0, 0, 1, 0, 0, 1];
        assert_eq!(auroc(&scores, &labels), Some(0.5));
    }

    #[test]
    fn single_class_is_none() {
        assert_eq!(auroc(&[0.1, 0.2], &[1, 1]), None);
        assert_eq!(auroc(&[0.1, 0.2], &[0, 0]), None);
        assert_eq!(auprc(&[0.1, 0.2], &[0, 0]), None);
        // AUPRC is defined with no negatives: every prefix is pure.
        assert_eq!(auprc(&[0.1, 0.2], &[1, 1]), Some(1.0));
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let scores = [0.12, 0.5, 0.5, 0.31, 0.77, 0.04, 0.98, 0.5];
        let labels = [0, 1, 0, 0, 1, 0, 1, 1];
        let shifted: Vec<f64> = scores.iter().map(|s| s * 4.0 + 1.0).collect();
        assert_eq!(auroc(&scores, &labels), auroc(&shifted, &labels));
    }

    #[test]
    fn matches_pairwise_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_11);
        for case in 0..100 {
            let n = rng.gen_range(2..=50);
            // A coarse score grid keeps ties frequent.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=8) as f64 / 8.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1) as u8).collect();
            let (a, ao) = (auroc(&scores, &labels), auroc_oracle(&scores, &labels));
            assert_eq!(a, ao, "auroc case {case}: {scores:?} {labels:?}");
            let (p, po) = (auprc(&scores, &labels), auprc_oracle(&scores, &labels));
            assert_eq!(p, po, "auprc case {case}: {scores:?} {labels:?}");
        }
    }

    #[test]
    fn report_counts_and_threshold() {
        let scores = [0.9, 0.6, 0.4, 0.2, 0.5];
        let labels = [1, 0, 1, 0, 1];
        let r = MetricsReport::from_scores(&scores, &labels, 0.5);
        assert_eq!((r.n, r.n_pos, r.n_neg), (5, 3, 2));
        // Predicted positive: 0.9, 0.6, 0.5 → tp 2, fp 1.
        assert_eq!(r.precision, 2.0 / 3.0);
        assert!(r.precision_defined);
        assert_eq!(r.recall, 2.0 / 3.0);
        assert_eq!(r.accuracy, 3.0 / 5.0);
        let p = 2.0 / 3.0;
        assert!((r.f1 - 2.0 * p * p / (p + p)).abs() < 1e-15);
    }

    #[test]
    fn no_positive_predictions_flags_precision() {
        let scores = [0.1, 0.2, 0.3];
        let labels = [0, 1, 0];
        let r = MetricsReport::from_scores(&scores, &labels, 0.9);
        assert!(!r.precision_defined);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.f1, 0.0);
        assert!(r.recall_defined);
        assert_eq!(r.recall, 0.0);
    }

    #[test]
    fn pearson_exact_lines() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -0.5 * v).collect();
        let (r, p) = pearson(&x, &up).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(p, 0.0);
        let (r, _) = pearson(&x, &down).unwrap();
        assert_eq!(r, -1.0);
    }

    #[test]
    fn pearson_degenerate_inputs() {
        assert_eq!(pearson(&[1.0, 2.0], &[3.0, 4.0]), None);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[3.0, 4.0, 5.0]), None);
    }

    #[test]
    fn pearson_p_value_anchors() {
        // For n = 28 paired points, r = -0.425 sits just inside the 5% level
        // and r = 0.975 is overwhelming; both p-values are standard table
        // results for a t-test on 26 degrees of freedom.
        let t = |r: f64| r * (26.0 / (1.0 - r * r)).sqrt();
        let p_mid = t_two_sided_p(t(-0.425), 26.0);
        assert!((0.022..0.027).contains(&p_mid), "p = {p_mid}");
        let p_strong = t_two_sided_p(t(0.975), 26.0);
        assert!(p_strong < 1e-4, "p = {p_strong}");
    }

    #[test]
    fn pearson_p_from_samples() {
        // Noisy but strongly correlated sample: p must be far below 0.01.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.8 * v + rng.gen_range(-2.0..2.0)).collect();
        let (r, p) = pearson(&x, &y).unwrap();
        assert!(r > 0.9);
        assert!(p < 1e-6);
    }

    #[test]
    fn masked_mse_ignores_masked_entries() {
        let pred = [1.0, 2.0, 100.0];
        let target = [1.5, 1.0, 0.0];
        let mask = [true, true, false];
        assert_eq!(masked_mse(&pred, &target, &mask), Some((0.25 + 1.0) / 2.0));
        assert_eq!(masked_mse(&pred, &target, &[false; 3]), None);
    }
}
