//! Confusion counting and the derived precision / recall / F1 / IoU report.

use crate::error::{Error, Result};
use serde::Serialize;

/// Pixel-level confusion counts for the changed class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Merge counts from another region or tile.
    pub fn merge(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Count the confusion matrix of a binary prediction against a binary truth.
/// Values must be exactly 0 or 1.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::config(format!(
            "confusion length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::config(format!(
                    "confusion inputs must be binary, got prediction {p} / truth {t}"
                )))
            }
        }
    }
    Ok(c)
}

/// Threshold probabilities into a binary mask; ties (`p == threshold`) count
/// as changed.
pub fn binarize<E: crate::tensor::Element>(p: &[E], threshold: f64) -> Vec<u8> {
    p.iter()
        .map(|v| u8::from(v.to_f64x() >= threshold))
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
}

/// Derive the report from counts. Degenerate denominators follow a fixed
/// convention: no predicted positives -> precision 0; no actual positives ->
/// recall 0; both zero -> f1 0; nothing to find and nothing found -> iou 1.
pub fn metrics(counts: ConfusionCounts) -> MetricsReport {
    let (tp, fp, fn_) = (counts.tp as f64, counts.fp as f64, counts.fn_ as f64);
    let precision = if counts.tp + counts.fp == 0 {
        0.0
    } else {
        tp / (tp + fp)
    };
    let recall = if counts.tp + counts.fn_ == 0 {
        0.0
    } else {
        tp / (tp + fn_)
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let iou = if counts.tp + counts.fp + counts.fn_ == 0 {
        1.0
    } else {
        tp / (tp + fp + fn_)
    };
    MetricsReport {
        precision,
        recall,
        f1,
        iou,
        counts,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialization")
    }

    /// Flat key=value record; ratios printed as percentages with 2 decimals.
    pub fn to_text(&self) -> String {
        format!(
            "precision={:.2}\nrecall={:.2}\nf1={:.2}\niou={:.2}\ntp={}\nfp={}\nfn={}\ntn={}\n",
            self.precision * 100.0,
            self.recall * 100.0,
            self.f1 * 100.0,
            self.iou * 100.0,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_inverted_predictions() {
        let t = [1u8, 0, 1, 1, 0];
        let c = confusion(&t, &t).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let r = metrics(c);
        assert_eq!((r.precision, r.recall, r.f1, r.iou), (1.0, 1.0, 1.0, 1.0));

        let inv: Vec<u8> = t.iter().map(|&v| 1 - v).collect();
        let c2 = confusion(&inv, &t).unwrap();
        assert_eq!((c2.tp, c2.tn), (0, 0));
    }

    #[test]
    fn enumerated_hand_case() {
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        let r = metrics(c);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.f1, 0.5);
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_binary() {
        assert!(confusion(&[2, 0], &[1, 0]).is_err());
        assert!(confusion(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn degenerate_conventions() {
        let empty = metrics(ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 10,
        });
        assert_eq!(
            (empty.precision, empty.recall, empty.f1, empty.iou),
            (0.0, 0.0, 0.0, 1.0)
        );
        let missed = metrics(ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 7,
        });
        assert_eq!((missed.precision, missed.f1), (0.0, 0.0));
        assert_eq!(missed.iou, 0.0);
    }

    /// IoU and F1 are algebraically linked for the same counts.
    #[test]
    fn iou_identity_exhaustive_small_counts() {
        for total in 1..=20u64 {
            for tp in 1..=total {
                for fp in 0..=total - tp {
                    for fn_ in 0..=total - tp - fp {
                        let tn = total - tp - fp - fn_;
                        let r = metrics(ConfusionCounts { tp, fp, fn_, tn });
                        let implied = r.f1 / (2.0 - r.f1);
                        assert!(
                            (r.iou - implied).abs() < 1e-12,
                            "iou {} vs f1-implied {} at {:?}",
                            r.iou,
                            implied,
                            (tp, fp, fn_, tn)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn confusion_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..200);
            let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            let truth: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
            let fast = confusion(&pred, &truth).unwrap();
            let mut slow = ConfusionCounts::default();
            for i in 0..n {
                if pred[i] == 1 && truth[i] == 1 {
                    slow.tp += 1;
                } else if pred[i] == 1 {
                    slow.fp += 1;
                } else if truth[i] == 1 {
                    slow.fn_ += 1;
                } else {
                    slow.tn += 1;
                }
            }
            assert_eq!(fast, slow);
            assert_eq!(fast.total(), n as u64);
        }
    }

    #[test]
    fn binarize_tie_counts_as_changed() {
        let out = binarize(&[0.49f64, 0.5, 0.51], 0.5);
        assert_eq!(out, vec![0, 1, 1]);
    }

    #[test]
    fn serialized_forms() {
        let r = metrics(ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        });
        let text = r.to_text();
        assert!(text.contains("precision=75.00"));
        assert!(text.contains("tn=5"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["fn"], 1);
        assert_eq!(json["precision"], 0.75);
    }
}
