//! Classification and ranking metrics.
//!
//! * precision `tp / (tp + fp)`, recall `tp / (tp + fn)`, F1 `2pr / (p + r)`,
//!   with every 0/0 taken as 0.
//! * AP over a ranked list of gold labels: `(1/|P|) * sum_i prec@i` where `i`
//!   runs over the ranks holding a positive and `prec@i` is the number of
//!   positives in the top `i` divided by `i`.
//! * mAP: arithmetic mean of AP over queries.

use serde::{Deserialize, Serialize};

use crate::error::{PuError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(preds: &[bool], golds: &[bool]) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(PuError::Validation(format!(
                "predictions ({}) and gold labels ({}) differ in length",
                preds.len(),
                golds.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &g) in preds.iter().zip(golds) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn scores(&self) -> Prf {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn precision_recall_f1(preds: &[bool], golds: &[bool]) -> Result<Prf> {
    if preds.is_empty() {
        return Err(PuError::Validation(
            "metrics need at least one prediction".into(),
        ));
    }
    Ok(Confusion::from_pairs(preds, golds)?.scores())
}

pub fn average_precision(ranked_golds: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &gold) in ranked_golds.iter().enumerate() {
        if gold {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(PuError::Validation(
            "average precision is undefined without a gold positive".into(),
        ));
    }
    Ok(sum / hits as f64)
}

pub fn mean_ap<Q: AsRef<[bool]>>(queries: &[Q]) -> Result<f64> {
    if queries.is_empty() {
        return Err(PuError::Validation(
            "mean AP needs at least one query".into(),
        ));
    }
    let total = queries
        .iter()
        .map(|q| average_precision(q.as_ref()))
        .sum::<Result<f64>>()?;
    Ok(total / queries.len() as f64)
}

/// Orders `golds` by descending score; ties keep the input order.
pub fn rank_by_score(scores: &[f64], golds: &[bool]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.into_iter().map(|i| golds[i]).collect()
}

/// Population mean and standard deviation (divisor N).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn perfect_classifier() {
        let g = bits(&[1, 0, 1, 0]);
        let m = precision_recall_f1(&g, &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_confusion() {
        // tp=3, fp=1, fn=2
        let preds = bits(&[1, 1, 1, 1, 0, 0, 0]);
        let golds = bits(&[1, 1, 1, 0, 1, 1, 0]);
        let m = precision_recall_f1(&preds, &golds).unwrap();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 2.0 * 0.45 / 1.35).abs() < 1e-15);
    }

    #[test]
    fn no_positive_predictions_scores_zero() {
        let m = precision_recall_f1(&bits(&[0, 0, 0]), &bits(&[1, 0, 1])).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_and_empty() {
        assert!(precision_recall_f1(&bits(&[1]), &bits(&[1, 0])).is_err());
        assert!(precision_recall_f1(&[], &[]).is_err());
    }

    #[test]
    fn average_precision_examples() {
        assert!((average_precision(&bits(&[1, 0, 1, 0])).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&bits(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&bits(&[0, 0, 0, 1])).unwrap(), 0.25);
        assert!(average_precision(&bits(&[0, 0])).is_err());
    }

    #[test]
    fn mean_ap_examples() {
        let q = bits(&[0, 1, 1]);
        assert_eq!(
            mean_ap(std::slice::from_ref(&q)).unwrap(),
            average_precision(&q).unwrap()
        );
        assert_eq!(mean_ap(&[bits(&[1, 0]), bits(&[0, 1])]).unwrap(), 0.75);
        assert!(mean_ap::<Vec<bool>>(&[]).is_err());
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        assert_eq!(mean_std(&[0.3, 0.3, 0.3]).1, 0.0);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    proptest! {
        #[test]
        fn f1_symmetric_and_equal_to_p_when_p_eq_r(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            prop_assert_eq!(f1(p, r), f1(r, p));
            prop_assert!((f1(p, p) - p).abs() < 1e-15);
        }

        #[test]
        fn ap_ignores_items_below_last_positive(
            head in proptest::collection::vec(any::<bool>(), 0..12),
            tail_a in 0usize..8,
            tail_b in 0usize..8,
        ) {
            // everything below the lowest-ranked positive is a negative, so any
            // permutation or truncation of that tail yields the same AP
            let mut a = head.clone();
            a.push(true);
            let mut b = a.clone();
            a.extend(std::iter::repeat_n(false, tail_a));
            b.extend(std::iter::repeat_n(false, tail_b));
            prop_assert_eq!(average_precision(&a).unwrap(), average_precision(&b).unwrap());
        }

        #[test]
        fn map_of_identical_queries(q in proptest::collection::vec(any::<bool>(), 1..20)) {
            prop_assume!(q.iter().any(|&b| b));
            let ap = average_precision(&q).unwrap();
            let m = mean_ap(&[q.clone(), q.clone(), q]).unwrap();
            prop_assert!((m - ap).abs() < 1e-15);
            prop_assert!(m > 0.0 && m <= 1.0);
        }
    }
}
