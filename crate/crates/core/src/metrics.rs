//! Sequence-level planning metrics: success rate, mean accuracy, mean IoU.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty batch")]
    Empty,
    #[error("batch sizes differ: {predicted} predicted vs {truth} truth")]
    BatchSize { predicted: usize, truth: usize },
    #[error("pair {index}: predicted length {predicted} != truth length {truth}")]
    Horizon {
        index: usize,
        predicted: usize,
        truth: usize,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalBatch {
    pub predicted: Vec<Vec<usize>>,
    pub truth: Vec<Vec<usize>>,
}

impl EvalBatch {
    pub fn new(predicted: Vec<Vec<usize>>, truth: Vec<Vec<usize>>) -> Result<Self> {
        let b = Self { predicted, truth };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.predicted.len() != self.truth.len() {
            return Err(MetricError::BatchSize {
                predicted: self.predicted.len(),
                truth: self.truth.len(),
            });
        }
        if self.predicted.is_empty() {
            return Err(MetricError::Empty);
        }
        for (index, (p, t)) in self.pairs().enumerate() {
            if p.len() != t.len() {
                return Err(MetricError::Horizon {
                    index,
                    predicted: p.len(),
                    truth: t.len(),
                });
            }
        }
        Ok(())
    }

    fn pairs(&self) -> impl Iterator<Item = (&Vec<usize>, &Vec<usize>)> {
        self.predicted.iter().zip(&self.truth)
    }

    fn mean_over_pairs(&self, f: impl Fn(&[usize], &[usize]) -> f64) -> Result<f64> {
        self.validate()?;
        let total: f64 = self.pairs().map(|(p, t)| f(p, t)).sum();
        Ok(total / self.predicted.len() as f64)
    }
}

/// Fraction of pairs that match exactly.
pub fn success_rate(batch: &EvalBatch) -> Result<f64> {
    batch.mean_over_pairs(|p, t| (p == t) as u8 as f64)
}

/// Mean fraction of matching positions.
pub fn mean_accuracy(batch: &EvalBatch) -> Result<f64> {
    batch.mean_over_pairs(|p, t| {
        if t.is_empty() {
            return 1.0;
        }
        let hits = p.iter().zip(t).filter(|(a, b)| a == b).count();
        hits as f64 / t.len() as f64
    })
}

/// Mean intersection-over-union of the action-id sets.
pub fn mean_iou(batch: &EvalBatch) -> Result<f64> {
    batch.mean_over_pairs(|p, t| {
        let p: BTreeSet<_> = p.iter().collect();
        let t: BTreeSet<_> = t.iter().collect();
        let union = p.union(&t).count();
        if union == 0 {
            return 1.0;
        }
        p.intersection(&t).count() as f64 / union as f64
    })
}

/// IoU counting repeated actions: `Σ min(count) / Σ max(count)`.
pub fn mean_iou_multiset(batch: &EvalBatch) -> Result<f64> {
    fn counts(s: &[usize]) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &a in s {
            *m.entry(a).or_insert(0) += 1;
        }
        m
    }
    batch.mean_over_pairs(|p, t| {
        let (cp, ct) = (counts(p), counts(t));
        let keys: BTreeSet<_> = cp.keys().chain(ct.keys()).collect();
        let (mut inter, mut union) = (0usize, 0usize);
        for k in keys {
            let a = cp.get(k).copied().unwrap_or(0);
            let b = ct.get(k).copied().unwrap_or(0);
            inter += a.min(b);
            union += a.max(b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
}

pub fn summarize(batch: &EvalBatch, multiset_iou: bool) -> Result<MetricSummary> {
    Ok(MetricSummary {
        sr: success_rate(batch)?,
        macc: mean_accuracy(batch)?,
        miou: if multiset_iou {
            mean_iou_multiset(batch)?
        } else {
            mean_iou(batch)?
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(p: &[usize], t: &[usize]) -> EvalBatch {
        EvalBatch::new(vec![p.to_vec()], vec![t.to_vec()]).unwrap()
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(success_rate(&one(&[1, 2, 3], &[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(success_rate(&one(&[1, 2, 4], &[1, 2, 3])).unwrap(), 0.0);
        let b = EvalBatch::new(vec![vec![1, 2], vec![0, 0]], vec![vec![1, 2], vec![0, 1]]).unwrap();
        assert_eq!(success_rate(&b).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_examples() {
        assert!((mean_accuracy(&one(&[1, 2, 4], &[1, 2, 3])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_accuracy(&one(&[5, 6], &[5, 6])).unwrap(), 1.0);
        assert_eq!(mean_accuracy(&one(&[0, 1], &[2, 3])).unwrap(), 0.0);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(mean_iou(&one(&[1, 2, 4], &[1, 2, 3])).unwrap(), 0.5);
        assert_eq!(mean_iou(&one(&[2, 1, 2], &[1, 2, 1])).unwrap(), 1.0);
        let b = one(&[3, 2, 1], &[1, 2, 3]);
        assert_eq!(mean_iou(&b).unwrap(), 1.0);
        assert_eq!(success_rate(&b).unwrap(), 0.0);
        // multiset: {2,2,1} vs {1,1,2} → min counts 1+1, max counts 2+2
        assert_eq!(
            mean_iou_multiset(&one(&[2, 1, 2], &[1, 2, 1])).unwrap(),
            0.5
        );
    }

    #[test]
    fn malformed_batches() {
        assert_eq!(EvalBatch::new(vec![], vec![]), Err(MetricError::Empty));
        assert!(matches!(
            EvalBatch::new(vec![vec![1]], vec![]),
            Err(MetricError::BatchSize { .. })
        ));
        assert!(matches!(
            EvalBatch::new(vec![vec![1]], vec![vec![1, 2]]),
            Err(MetricError::Horizon { index: 0, .. })
        ));
    }

    fn batch_strategy() -> impl Strategy<Value = EvalBatch> {
        (1usize..5, 1usize..8).prop_flat_map(|(t, n)| {
            let seq = proptest::collection::vec(0usize..4, t);
            (
                proptest::collection::vec(seq.clone(), n),
                proptest::collection::vec(seq, n),
            )
                .prop_map(|(predicted, truth)| EvalBatch { predicted, truth })
        })
    }

    proptest! {
        #[test]
        fn metric_bounds_and_orderings(b in batch_strategy()) {
            let s = summarize(&b, false).unwrap();
            for v in [s.sr, s.macc, s.miou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(s.sr <= s.macc + 1e-15);
            for (p, t) in b.predicted.iter().zip(&b.truth) {
                let single = summarize(&one(p, t), false).unwrap();
                if single.sr == 1.0 {
                    prop_assert_eq!(single.macc, 1.0);
                }
                if single.macc == 1.0 {
                    prop_assert_eq!(single.miou, 1.0);
                }
            }
        }

        #[test]
        fn batch_order_is_irrelevant(b in batch_strategy(), rot in 0usize..8) {
            let n = b.predicted.len();
            let mut r = b.clone();
            r.predicted.rotate_left(rot % n);
            r.truth.rotate_left(rot % n);
            let (x, y) = (summarize(&b, false).unwrap(), summarize(&r, false).unwrap());
            prop_assert!((x.sr - y.sr).abs() < 1e-12);
            prop_assert!((x.macc - y.macc).abs() < 1e-12);
            prop_assert!((x.miou - y.miou).abs() < 1e-12);
        }
    }
}
