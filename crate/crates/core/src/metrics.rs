//! Binary classification metrics. The positive class is "deceptive".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Scores at or above `threshold` are predicted positive.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMatrix> {
    check_lengths(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Precision, recall, accuracy and F1 of a confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
}

pub fn prf_accuracy(cm: &ConfusionMatrix) -> Scores {
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let accuracy = ratio(cm.tp + cm.tn, cm.total());
    let degenerate = precision.is_none() || recall.is_none() || accuracy.is_none();
    let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    Scores {
        precision,
        recall,
        accuracy: accuracy.unwrap_or(0.0),
        f1: f1(precision, recall),
        degenerate,
    }
}

/// Harmonic mean of precision and recall (0 when both are 0).
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let positive = prf_accuracy(cm).f1;
    let flipped = ConfusionMatrix {
        tp: cm.tn,
        fp: cm.fn_,
        fn_: cm.fp,
        tn: cm.tp,
    };
    (positive + prf_accuracy(&flipped).f1) / 2.0
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("ROC-AUC needs both positive and negative labels"));
    }
    let order = sorted_indices(scores, false);
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let average_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += average_rank * tied_positives as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `Σ (R_n - R_{n-1}) · P_n` over descending distinct score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::invalid("average precision needs at least one positive label"));
    }
    let order = sorted_indices(scores, true);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut previous_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - previous_recall) * precision;
        previous_recall = recall;
    }
    Ok(ap)
}

/// Full evaluation summary; serializes with fixed key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub average_precision: f64,
    pub confusion: ConfusionMatrix,
    pub macro_f1: f64,
    pub degenerate: bool,
}

impl MetricsReport {
    pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let cm = confusion(scores, labels, 0.5)?;
        let s = prf_accuracy(&cm);
        Ok(MetricsReport {
            precision: s.precision,
            recall: s.recall,
            accuracy: s.accuracy,
            f1: s.f1,
            roc_auc: roc_auc(scores, labels)?,
            average_precision: average_precision(scores, labels)?,
            confusion: cm,
            macro_f1: macro_f1(&cm),
            degenerate: s.degenerate,
        })
    }
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metrics", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::invalid("metrics of an empty score list"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    Ok(())
}

fn sorted_indices(scores: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn confusion_fixtures() {
        let cm = confusion(&[0.9, 0.2], &b(&[1, 0]), 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 0, fn_: 0, tn: 1 });
        let cm = confusion(&[0.5], &b(&[0]), 0.5).unwrap();
        assert_eq!(cm.fp, 1, "0.5 counts as positive");
        let cm = confusion(&[0.9, 0.9, 0.9, 0.2, 0.2], &b(&[1, 1, 0, 1, 0]), 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 2, fp: 1, fn_: 1, tn: 1 });
        assert!(confusion(&[0.1], &b(&[1, 0]), 0.5).is_err());
    }

    #[test]
    fn prf_fixtures() {
        let s = prf_accuracy(&ConfusionMatrix { tp: 2, fp: 1, fn_: 1, tn: 1 });
        assert_eq!(s.precision, 2.0 / 3.0);
        assert_eq!(s.recall, 2.0 / 3.0);
        assert_eq!(s.accuracy, 3.0 / 5.0);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(!s.degenerate);

        let s = prf_accuracy(&ConfusionMatrix { tp: 5, fp: 0, fn_: 0, tn: 7 });
        assert_eq!((s.precision, s.recall, s.accuracy, s.f1), (1.0, 1.0, 1.0, 1.0));

        assert!((f1(0.9006, 0.8265) - 0.8620).abs() < 5e-5);
    }

    #[test]
    fn degenerate_denominators_flagged() {
        let s = prf_accuracy(&ConfusionMatrix { tp: 0, fp: 0, fn_: 3, tn: 2 });
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.f1, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &b(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &b(&[0, 1, 0, 1])).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap(), 0.75);
        assert!(roc_auc(&[0.1, 0.2], &b(&[1, 1])).is_err());
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &b(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.1], &b(&[0, 1])).unwrap(), 0.5);
        let ap = average_precision(&[0.9, 0.8, 0.7], &b(&[1, 0, 1])).unwrap();
        assert!((ap - (0.5 + (2.0 / 3.0) * 0.5)).abs() < 1e-15);
        assert!(average_precision(&[0.9], &b(&[0])).is_err());
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let r = MetricsReport::evaluate(&[0.9, 0.2, 0.6, 0.4], &b(&[1, 0, 0, 1])).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["precision", "recall", "accuracy", "f1", "roc_auc", "average_precision"] {
            assert!(v[key].is_number(), "{key}");
        }
        for key in ["tp", "fp", "fn", "tn"] {
            assert!(v["confusion"][key].is_number(), "{key}");
        }
        assert!((r.f1 - f1(r.precision, r.recall)).abs() < 1e-12);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn macro_f1_averages_classes() {
        let cm = ConfusionMatrix { tp: 2, fp: 1, fn_: 1, tn: 1 };
        // negative class: precision 1/2, recall 1/2
        assert!((macro_f1(&cm) - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }
}
