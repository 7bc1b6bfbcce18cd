//! Sentiment and multi-label emotion scores.
//!
//! Weighted accuracy is the balanced form `(TP/P + TN/N) / 2`. Precision,
//! recall and F1 use `0/0 = 0`; the raw confusion counts are kept alongside
//! every score so degenerate cases stay visible.

use crate::data::{EMOTION_NAMES, NUM_EMOTIONS};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction has {pred} entries but gold has {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("no instances to score")]
    Empty,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(pred: &[bool], gold: &[bool]) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(MetricsError::LengthMismatch {
                pred: pred.len(),
                gold: gold.len(),
            });
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.positives())
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// `None` when gold lacks either class.
    pub fn weighted_accuracy(&self) -> Option<f64> {
        if self.positives() == 0 || self.negatives() == 0 {
            return None;
        }
        let tpr = self.tp as f64 / self.positives() as f64;
        let tnr = self.tn as f64 / self.negatives() as f64;
        Some((tpr + tnr) / 2.0)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub counts: Confusion,
}

/// Precision, recall and F1 of the positive class, plus accuracy.
pub fn binary_prf(pred: &[bool], gold: &[bool]) -> Result<BinaryScores> {
    let counts = Confusion::tally(pred, gold)?;
    if counts.total() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(BinaryScores {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        accuracy: counts.accuracy(),
        counts,
    })
}

/// Mean of positive-class and negative-class recall; `None` if gold holds a
/// single class.
pub fn weighted_accuracy(pred: &[bool], gold: &[bool]) -> Result<Option<f64>> {
    Ok(Confusion::tally(pred, gold)?.weighted_accuracy())
}

/// Emotion decision thresholds, one per metric family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub f1: f64,
    pub wacc: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { f1: 0.4, wacc: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionClassScores {
    pub name: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub weighted_accuracy: Option<f64>,
    /// Counts at the F1 threshold.
    pub f1_counts: Confusion,
    /// Counts at the weighted-accuracy threshold.
    pub wacc_counts: Confusion,
}

/// Number of utterances whose thresholded label set came out empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptyPredictions {
    pub f1: usize,
    pub wacc: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionReport {
    pub thresholds: Thresholds,
    pub per_class: Vec<EmotionClassScores>,
    /// Mean F1 over the six emotions (no-emotion excluded).
    pub average_f1: f64,
    /// Mean weighted accuracy over those of the six emotions where it is
    /// defined.
    pub average_weighted_accuracy: Option<f64>,
    pub empty_predictions: EmptyPredictions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentReport {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Confusion,
}

impl From<BinaryScores> for SentimentReport {
    fn from(s: BinaryScores) -> Self {
        Self {
            f1: s.f1,
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            counts: s.counts,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub utterances: usize,
    pub sentiment: Option<SentimentReport>,
    pub emotion: Option<EmotionReport>,
}

/// Labels `{c : prob_c > threshold}`.
pub fn threshold_labels(probs: &[f64; NUM_EMOTIONS], threshold: f64) -> [bool; NUM_EMOTIONS] {
    probs.map(|p| p > threshold)
}

/// Thresholds emotion probabilities separately for each metric family and
/// scores every class one-vs-rest.
pub fn multilabel_report(
    probs: &[[f64; NUM_EMOTIONS]],
    gold: &[[u8; NUM_EMOTIONS]],
    thresholds: Thresholds,
) -> Result<EmotionReport> {
    if probs.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: probs.len(),
            gold: gold.len(),
        });
    }
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let f1_labels: Vec<[bool; NUM_EMOTIONS]> = probs
        .iter()
        .map(|p| threshold_labels(p, thresholds.f1))
        .collect();
    let wacc_labels: Vec<[bool; NUM_EMOTIONS]> = probs
        .iter()
        .map(|p| threshold_labels(p, thresholds.wacc))
        .collect();
    let empty =
        |labels: &[[bool; NUM_EMOTIONS]]| labels.iter().filter(|l| !l.contains(&true)).count();

    let mut per_class = Vec::with_capacity(NUM_EMOTIONS);
    for (c, name) in EMOTION_NAMES.iter().enumerate() {
        let g: Vec<bool> = gold.iter().map(|row| row[c] == 1).collect();
        let pf: Vec<bool> = f1_labels.iter().map(|row| row[c]).collect();
        let pw: Vec<bool> = wacc_labels.iter().map(|row| row[c]).collect();
        let f1_counts = Confusion::tally(&pf, &g)?;
        let wacc_counts = Confusion::tally(&pw, &g)?;
        per_class.push(EmotionClassScores {
            name: (*name).to_string(),
            f1: f1_counts.f1(),
            precision: f1_counts.precision(),
            recall: f1_counts.recall(),
            weighted_accuracy: wacc_counts.weighted_accuracy(),
            f1_counts,
            wacc_counts,
        });
    }
    let six = &per_class[..6];
    let average_f1 = six.iter().map(|c| c.f1).sum::<f64>() / 6.0;
    let defined: Vec<f64> = six.iter().filter_map(|c| c.weighted_accuracy).collect();
    let average_weighted_accuracy =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EmotionReport {
        thresholds,
        per_class,
        average_f1,
        average_weighted_accuracy,
        empty_predictions: EmptyPredictions {
            f1: empty(&f1_labels),
            wacc: empty(&wacc_labels),
        },
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "utterances = {}", self.utterances);
        if let Some(r) = &self.sentiment {
            let _ = writeln!(s, "sentiment.f1 = {}", r.f1);
            let _ = writeln!(s, "sentiment.accuracy = {}", r.accuracy);
            let _ = writeln!(s, "sentiment.precision = {}", r.precision);
            let _ = writeln!(s, "sentiment.recall = {}", r.recall);
            let c = r.counts;
            let _ = writeln!(
                s,
                "sentiment.counts = tp:{} fp:{} tn:{} fn:{}",
                c.tp, c.fp, c.tn, c.fn_
            );
        }
        if let Some(r) = &self.emotion {
            let _ = writeln!(s, "emotion.threshold.f1 = {}", r.thresholds.f1);
            let _ = writeln!(s, "emotion.threshold.wacc = {}", r.thresholds.wacc);
            for c in &r.per_class {
                let _ = writeln!(s, "emotion.{}.f1 = {}", c.name, c.f1);
                let _ = writeln!(
                    s,
                    "emotion.{}.weighted_accuracy = {}",
                    c.name,
                    fmt_opt(c.weighted_accuracy)
                );
            }
            let _ = writeln!(s, "emotion.average.f1 = {}", r.average_f1);
            let _ = writeln!(
                s,
                "emotion.average.weighted_accuracy = {}",
                fmt_opt(r.average_weighted_accuracy)
            );
            let _ = writeln!(
                s,
                "emotion.empty_predictions.f1 = {}",
                r.empty_predictions.f1
            );
            let _ = writeln!(
                s,
                "emotion.empty_predictions.wacc = {}",
                r.empty_predictions.wacc
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn perfect_prediction() {
        let g = b(&[1, 0, 1, 1, 0]);
        let s = binary_prf(&g, &g).unwrap();
        assert_eq!(
            (s.precision, s.recall, s.f1, s.accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(weighted_accuracy(&g, &g).unwrap(), Some(1.0));
    }

    #[test]
    fn all_negative_prediction() {
        let s = binary_prf(&b(&[0, 0, 0, 0]), &b(&[1, 0, 1, 0])).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(s.accuracy, 0.5);
    }

    #[test]
    fn counted_case() {
        // TP=2, FP=1, FN=1, TN=1
        let s = binary_prf(&b(&[1, 1, 1, 0, 0]), &b(&[1, 1, 0, 1, 0])).unwrap();
        assert_eq!(
            s.counts,
            Confusion {
                tp: 2,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_accuracy_cases() {
        let gold = b(&[1, 1, 0, 0]);
        assert_eq!(
            weighted_accuracy(&b(&[1, 1, 1, 1]), &gold).unwrap(),
            Some(0.5)
        );
        // TP=3 of P=4, TN=1 of N=2
        let w = weighted_accuracy(&b(&[1, 1, 1, 0, 0, 1]), &b(&[1, 1, 1, 1, 0, 0])).unwrap();
        assert_eq!(w, Some(0.625));
        assert_eq!(weighted_accuracy(&b(&[1, 0]), &b(&[1, 1])).unwrap(), None);
        assert!(weighted_accuracy(&b(&[1]), &b(&[1, 0])).is_err());
    }

    #[test]
    fn length_and_empty_errors() {
        assert_eq!(
            binary_prf(&b(&[1]), &b(&[1, 0])),
            Err(MetricsError::LengthMismatch { pred: 1, gold: 2 })
        );
        assert_eq!(binary_prf(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn multilabel_probs_equal_gold() {
        let gold = [
            [1, 0, 0, 1, 0, 0, 0],
            [0, 0, 0, 0, 0, 0, 1],
            [0, 1, 1, 0, 1, 1, 0],
        ];
        let probs: Vec<[f64; 7]> = gold.iter().map(|r| r.map(f64::from)).collect();
        let r = multilabel_report(&probs, &gold, Thresholds::default()).unwrap();
        for c in &r.per_class {
            assert_eq!(c.f1, 1.0, "{}", c.name);
            assert_eq!(c.f1_counts, c.wacc_counts);
        }
        assert_eq!(r.average_f1, 1.0);
    }

    #[test]
    fn threshold_split_on_constant_probs() {
        let gold = [[1, 0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0, 1]];
        let probs = [[0.3; 7]; 2];
        let r = multilabel_report(&probs, &gold, Thresholds::default()).unwrap();
        assert_eq!(r.empty_predictions, EmptyPredictions { f1: 2, wacc: 0 });
        for c in &r.per_class {
            assert_eq!(c.f1_counts.tp + c.f1_counts.fp, 0);
            assert_eq!(c.wacc_counts.tp + c.wacc_counts.fp, 2);
        }
        assert_eq!(threshold_labels(&probs[0], 0.4), [false; 7]);
        assert_eq!(threshold_labels(&probs[0], 0.2), [true; 7]);
    }

    #[test]
    fn strict_threshold() {
        let p = [0.41, 0.39, 0.2, 0.2, 0.2, 0.2, 0.2];
        assert_eq!(
            threshold_labels(&p, 0.4),
            [true, false, false, false, false, false, false]
        );
        assert_eq!(
            threshold_labels(&p, 0.2),
            [true, true, false, false, false, false, false]
        );
    }

    #[test]
    fn averages_exclude_no_emotion_and_undefined() {
        // class 0 has only positives in gold, so its weighted accuracy is undefined
        let gold = [[1, 1, 0, 0, 0, 0, 0], [1, 0, 1, 0, 0, 0, 0]];
        let probs = [
            [0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.9],
            [0.9, 0.1, 0.9, 0.1, 0.1, 0.1, 0.9],
        ];
        let r = multilabel_report(&probs, &gold, Thresholds::default()).unwrap();
        assert_eq!(r.per_class[0].weighted_accuracy, None);
        assert_eq!(r.per_class[1].weighted_accuracy, Some(1.0));
        assert_eq!(r.average_weighted_accuracy, Some(1.0));
        // classes 0..3 perfect, 3..6 have no positives -> F1 0
        assert!((r.average_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn text_and_json_render() {
        let gold = [[1, 0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0, 1]];
        let report = MetricsReport {
            utterances: 2,
            sentiment: Some(binary_prf(&b(&[1, 0]), &b(&[1, 1])).unwrap().into()),
            emotion: Some(multilabel_report(&[[0.3; 7]; 2], &gold, Thresholds::default()).unwrap()),
        };
        let text = report.to_text();
        assert!(text.contains("sentiment.accuracy = 0.5"));
        assert!(text.contains("emotion.fear.weighted_accuracy = NA"));
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
