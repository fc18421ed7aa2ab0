//! Accuracy, confusion matrix and per-class precision/recall/F1.

use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub index: usize,
    /// Number of samples whose true class is this one.
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a score's denominator was zero and it was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

impl ClassScores {
    pub fn degenerate(&self) -> bool {
        self.precision_undefined || self.recall_undefined || self.f1_undefined
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub per_class: Vec<ClassScores>,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn compute_metrics(predicted: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let mut cm = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (i, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
        if p >= NUM_CLASSES || t >= NUM_CLASSES {
            return Err(Error::Input(format!(
                "sample {i}: class index out of range (predicted {p}, true {t})"
            )));
        }
        cm[t][p] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| cm[c][c]).sum();
    let per_class = ClassLabel::ALL
        .iter()
        .map(|&label| {
            let c = label.index();
            let row: usize = cm[c].iter().sum();
            let col: usize = cm.iter().map(|r| r[c]).sum();
            let (precision, precision_undefined) = ratio(cm[c][c], col);
            let (recall, recall_undefined) = ratio(cm[c][c], row);
            let (f1, f1_undefined) = if precision + recall == 0.0 {
                (0.0, true)
            } else {
                (2.0 * precision * recall / (precision + recall), false)
            };
            ClassScores {
                class: label.name().to_string(),
                index: c,
                support: row,
                precision,
                recall,
                f1,
                precision_undefined,
                recall_undefined,
                f1_undefined,
            }
        })
        .collect();
    Ok(MetricsReport {
        total: truth.len(),
        correct,
        accuracy: correct as f64 / truth.len() as f64,
        confusion_matrix: cm,
        per_class,
    })
}

impl MetricsReport {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "accuracy {:.4} ({}/{})\n\nconfusion matrix (rows = true, cols = predicted)\n{:>8}",
            self.accuracy, self.correct, self.total, ""
        );
        for label in ClassLabel::ALL {
            out.push_str(&format!("{:>8}", label.name()));
        }
        out.push('\n');
        for label in ClassLabel::ALL {
            out.push_str(&format!("{:>8}", label.name()));
            for count in self.confusion_matrix[label.index()] {
                out.push_str(&format!("{count:>8}"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\n{:>8}{:>11}{:>9}{:>9}{:>9}\n",
            "class", "precision", "recall", "f1", "support"
        ));
        for s in &self.per_class {
            out.push_str(&format!(
                "{:>8}{:>11.4}{:>9.4}{:>9.4}{:>9}{}\n",
                s.class,
                s.precision,
                s.recall,
                s.f1,
                s.support,
                if s.degenerate() {
                    "  (undefined -> 0)"
                } else {
                    ""
                }
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1, 0, 0];
        let r = compute_metrics(&y, &y).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion_matrix, [[3, 0, 0], [0, 2, 0], [0, 0, 2]]);
        assert!(r.per_class.iter().all(|s| s.f1 == 1.0 && !s.degenerate()));
    }

    #[test]
    fn six_sample_hand_tally() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 0, 2];
        let r = compute_metrics(&pred, &truth).unwrap();
        assert_eq!(r.confusion_matrix, [[1, 1, 0], [0, 2, 0], [1, 0, 1]]);
        assert_eq!(r.correct, 4);
        let p: Vec<f64> = r.per_class.iter().map(|s| s.precision).collect();
        let rc: Vec<f64> = r.per_class.iter().map(|s| s.recall).collect();
        let f1: Vec<f64> = r.per_class.iter().map(|s| s.f1).collect();
        assert_eq!(p, vec![0.5, 2.0 / 3.0, 1.0]);
        assert_eq!(rc, vec![0.5, 1.0, 0.5]);
        let expected_f1 = [0.5, 0.8, 2.0 / 3.0];
        for (a, e) in f1.iter().zip(expected_f1) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn seventy_two_percent() {
        let truth = vec![1usize; 400];
        let pred: Vec<usize> = (0..400).map(|i| if i < 288 { 1 } else { 0 }).collect();
        let r = compute_metrics(&pred, &truth).unwrap();
        assert_eq!(r.accuracy, 0.72);
    }

    #[test]
    fn empty_denominators_are_flagged() {
        let r = compute_metrics(&[0, 0], &[0, 0]).unwrap();
        let small = &r.per_class[2];
        assert_eq!((small.precision, small.recall, small.f1), (0.0, 0.0, 0.0));
        assert!(small.precision_undefined && small.recall_undefined && small.f1_undefined);
        assert!(r.to_table().contains("undefined"));
    }

    #[test]
    fn rejects_mismatched_or_invalid_input() {
        assert!(compute_metrics(&[0, 1], &[0]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[3], &[0]).is_err());
    }

    proptest! {
        #[test]
        fn invariants(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60), rot in 0usize..60) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let r = compute_metrics(&pred, &truth).unwrap();
            let cm_total: usize = r.confusion_matrix.iter().flatten().sum();
            prop_assert_eq!(cm_total, pred.len());
            let hits = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
            prop_assert_eq!(r.accuracy, hits as f64 / pred.len() as f64);

            let k = rot % pairs.len();
            let mut rotated = pairs.clone();
            rotated.rotate_left(k);
            let (p2, t2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            prop_assert_eq!(compute_metrics(&p2, &t2).unwrap(), r);
        }
    }
}
