//! AUROC, per-class precision/recall and report rendering.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("AUROC needs both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    match scores.iter().find(|s| !s.is_finite()) {
        Some(s) => Err(MetricsError::NonFinite(*s)),
        None => Ok(()),
    }
}

/// Mann-Whitney AUROC from rank sums, ties receiving their average rank.
/// A label counts as positive iff it is nonzero.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Ranks are 1-based; doubled so tied averages stay integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_avg = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u64;
        doubled_rank_sum += doubled_avg * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (positives as u64, negatives as u64);
    // 2U = 2R - p(p+1)
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    /// False when nothing was predicted as this class (precision reported 0).
    pub precision_defined: bool,
    pub recall: f64,
    /// False when the class never occurs (recall reported 0).
    pub recall_defined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, false)
    } else {
        (num as f64 / den as f64, true)
    }
}

impl ClassMetrics {
    fn from_counts(correct: usize, predicted: usize, actual: usize) -> Self {
        let (precision, precision_defined) = ratio(correct, predicted);
        let (recall, recall_defined) = ratio(correct, actual);
        Self {
            precision,
            precision_defined,
            recall,
            recall_defined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Predicts class 1 iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion, MetricsError> {
    check_inputs(scores, labels)?;
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `[class 0, class 1]`.
pub fn precision_recall(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<[ClassMetrics; 2], MetricsError> {
    let c = confusion(scores, labels, threshold)?;
    Ok(per_class(&c))
}

fn per_class(c: &Confusion) -> [ClassMetrics; 2] {
    [
        ClassMetrics::from_counts(c.tn, c.tn + c.fn_, c.tn + c.fp),
        ClassMetrics::from_counts(c.tp, c.tp + c.fp, c.tp + c.fn_),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub n_examples: usize,
    pub positive_rate: f64,
    pub threshold: f64,
    /// `None` when the evaluated set holds a single class.
    pub auroc: Option<f64>,
    pub class_0: ClassMetrics,
    pub class_1: ClassMetrics,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn evaluate(
        model: &str,
        split: &str,
        scores: &[f64],
        labels: &[u8],
        threshold: f64,
    ) -> Result<Self, MetricsError> {
        let confusion = confusion(scores, labels, threshold)?;
        let auroc = match auroc(scores, labels) {
            Ok(a) => Some(a),
            Err(MetricsError::SingleClass { .. }) => None,
            Err(e) => return Err(e),
        };
        let [class_0, class_1] = per_class(&confusion);
        let n = labels.len();
        Ok(Self {
            model: model.to_string(),
            split: split.to_string(),
            n_examples: n,
            positive_rate: ratio(confusion.tp + confusion.fn_, n).0,
            threshold,
            auroc,
            class_0,
            class_1,
            confusion,
        })
    }

    /// Human-readable block; four decimals throughout.
    pub fn to_text(&self) -> String {
        let flag = |v: f64, defined: bool| {
            if defined {
                format!("{v:.4}")
            } else {
                format!("{v:.4} (undefined)")
            }
        };
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.model);
        let _ = writeln!(out, "split: {}", self.split);
        let _ = writeln!(out, "n_examples: {}", self.n_examples);
        let _ = writeln!(out, "positive_rate: {:.4}", self.positive_rate);
        let _ = writeln!(out, "threshold: {:.4}", self.threshold);
        match self.auroc {
            Some(a) => {
                let _ = writeln!(out, "auroc: {a:.4}");
            }
            None => out.push_str("auroc: undefined (single class)\n"),
        }
        for (name, c) in [("class_0", &self.class_0), ("class_1", &self.class_1)] {
            let _ = writeln!(
                out,
                "{name}: precision {} recall {}",
                flag(c.precision, c.precision_defined),
                flag(c.recall, c.recall_defined)
            );
        }
        let c = &self.confusion;
        let _ = writeln!(out, "confusion: tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
        out
    }

    /// One-line machine-readable form.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive pair count, ties worth one half.
    fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[1, 1, 0]), Ok(1.0));
        assert_eq!(auroc(&[0.3; 6], &[1, 0, 1, 0, 0, 0]), Ok(0.5));
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]), Ok(0.0));
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::SingleClass { .. })));
        assert!(matches!(auroc(&[0.1], &[1, 0]), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(auroc(&[f64::NAN, 0.2], &[1, 0]), Err(MetricsError::NonFinite(_))));
    }

    #[test]
    fn hand_counted_confusion() {
        let scores = [0.9, 0.7, 0.5, 0.49, 0.2, 0.8, 0.6, 0.1, 0.3, 0.55];
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        // Predicted 1: 0.9 0.7 0.5 | 0.8 0.6 0.55
        let c = confusion(&scores, &labels, 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 3, fp: 3, tn: 2, fn_: 2 });
        let [c0, c1] = precision_recall(&scores, &labels, 0.5).unwrap();
        assert_eq!((c1.precision, c1.recall), (0.5, 0.6));
        assert_eq!((c0.precision, c0.recall), (0.5, 0.4));
    }

    #[test]
    fn perfect_and_degenerate_classifiers() {
        let [c0, c1] = precision_recall(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        for c in [c0, c1] {
            assert_eq!((c.precision, c.recall), (1.0, 1.0));
        }
        let [_, c1] = precision_recall(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(c1.recall, 0.0);
        assert_eq!(c1.precision, 0.0);
        assert!(!c1.precision_defined);
    }

    #[test]
    fn report_rendering() {
        let mut r = EvalReport::evaluate("lstm", "test", &[0.9, 0.2, 0.6, 0.1], &[1, 0, 0, 0], 0.5).unwrap();
        r.auroc = Some(0.7626);
        let text = r.to_text();
        assert!(text.contains("auroc: 0.7626\n"), "{text}");
        assert_eq!(text, r.to_text());
        assert_eq!(EvalReport::from_json_line(&r.to_json_line()).unwrap(), r);
        let single = EvalReport::evaluate("lstm", "test", &[0.3, 0.4], &[0, 0], 0.5).unwrap();
        assert_eq!(single.auroc, None);
        assert!(single.to_text().contains("auroc: undefined"));
        assert!(single.to_text().contains("recall 0.0000 (undefined)"));
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..20).prop_map(|k| k as f64 / 19.0), n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rank_formula_matches_pairs((scores, labels) in scored()) {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - brute_auroc(&scores, &labels)).abs() <= 1e-12);
            // Strictly monotone transform.
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((auroc(&t, &labels).unwrap() - a).abs() <= 1e-12);
            // Label swap.
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            prop_assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() <= 1e-12);
        }

        #[test]
        fn counts_are_consistent((scores, labels) in scored(), th in 0.0f64..1.0) {
            let c = confusion(&scores, &labels, th).unwrap();
            prop_assert_eq!(c.tp + c.fp + c.tn + c.fn_, labels.len());
            let [c0, c1] = per_class(&c);
            for m in [c0, c1] {
                prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
            }
        }
    }
}
