//! Leave-one-out top-K evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// Top `k` items by descending score, skipping `masked` items. Ties go to
/// the lower item index.
pub fn rank_items(scores: &[f64], masked: &[usize], k: usize) -> Vec<usize> {
    let mut skip = vec![false; scores.len()];
    for &i in masked {
        if i < skip.len() {
            skip[i] = true;
        }
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if cand.len() > k && k > 0 {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    cand.truncate(k);
    cand
}

/// 1-based position of `item` in `top`.
fn position(top: &[usize], item: usize) -> Option<usize> {
    top.iter().position(|&i| i == item).map(|p| p + 1)
}

pub fn recall_at_k(top: &[usize], held_out: usize) -> f64 {
    if top.contains(&held_out) {
        1.0
    } else {
        0.0
    }
}

/// `1/log2(rank + 1)` for a single relevant item, 0 outside the list.
pub fn ndcg_at_k(top: &[usize], held_out: usize) -> f64 {
    position(top, held_out).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    /// Keyed by K.
    pub metrics: BTreeMap<usize, AtK>,
    pub num_evaluated: usize,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.ndcg)
    }
}

/// Means of Recall@K and NDCG@K over `(user, held-out item)` pairs.
///
/// `scores` is `num_users × num_items`. Each user's `train_items` are
/// excluded from ranking except the held-out item itself.
pub fn evaluate(scores: &Matrix, pairs: &[(usize, usize)], train_items: &[Vec<usize>], ks: &[usize]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument(format!("K values must be positive, got {ks:?}")));
    }
    let max_k = *ks.iter().max().expect("nonempty");
    let mut sums: BTreeMap<usize, AtK> = ks.iter().map(|&k| (k, AtK { recall: 0.0, ndcg: 0.0 })).collect();
    for &(u, held) in pairs {
        if u >= scores.nrows() || held >= scores.ncols() {
            return Err(Error::Shape(format!(
                "pair ({u}, {held}) outside a {}×{} score matrix",
                scores.nrows(),
                scores.ncols()
            )));
        }
        let row = scores.row(u);
        let row = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("scores of user {u}"),
                step: 0,
            });
        }
        let masked: Vec<usize> = train_items
            .get(u)
            .map(|items| items.iter().copied().filter(|&i| i != held).collect())
            .unwrap_or_default();
        let top = rank_items(&row, &masked, max_k);
        for (&k, acc) in sums.iter_mut() {
            let head = &top[..k.min(top.len())];
            acc.recall += recall_at_k(head, held);
            acc.ndcg += ndcg_at_k(head, held);
        }
    }
    let n = pairs.len() as f64;
    for acc in sums.values_mut() {
        acc.recall /= n;
        acc.ndcg /= n;
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(MetricReport {
        ks,
        metrics: sums,
        num_evaluated: pairs.len(),
    })
}

/// Relative gain `ours / baseline − 1`.
pub fn relative_gain(ours: f64, baseline: f64) -> f64 {
    ours / baseline - 1.0
}

/// Mean relative gain over aligned cells.
pub fn mean_relative_gain(ours: &[f64], baseline: &[f64]) -> f64 {
    assert_eq!(ours.len(), baseline.len());
    ours.iter()
        .zip(baseline)
        .map(|(&o, &b)| relative_gain(o, b))
        .sum::<f64>()
        / ours.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_items(&[0.1, 0.9, 0.5], &[], 2), vec![1, 2]);
        assert_eq!(rank_items(&[0.1, 0.9, 0.5], &[1], 2), vec![2, 0]);
        assert_eq!(rank_items(&[0.3; 6], &[], 3), vec![0, 1, 2]);
        assert_eq!(rank_items(&[0.3, 0.2], &[], 5), vec![0, 1]);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(&[4, 1], 4), 1.0);
        assert_eq!(recall_at_k(&[4, 1], 2), 0.0);
        assert_eq!(ndcg_at_k(&[4, 1, 2], 4), 1.0);
        assert!((ndcg_at_k(&[4, 1, 2], 2) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[4, 1, 2], 9), 0.0);
    }

    #[test]
    fn perfect_and_adversarial_models() {
        let pairs = vec![(0, 2), (1, 0)];
        let train = vec![vec![0], vec![1]];
        let good = array![[0.0, 0.0, 9.0, 0.0], [9.0, 0.0, 0.0, 0.0]];
        let r = evaluate(&good, &pairs, &train, &[1, 2]).unwrap();
        for m in r.metrics.values() {
            assert_eq!((m.recall, m.ndcg), (1.0, 1.0));
        }
        let bad = good.mapv(|v| -v);
        let r = evaluate(&bad, &pairs, &train, &[1, 2]).unwrap();
        for m in r.metrics.values() {
            assert_eq!((m.recall, m.ndcg), (0.0, 0.0));
        }
        assert!(evaluate(&good, &[], &train, &[1]).is_err());
    }

    #[test]
    fn quoted_gain_arithmetic() {
        assert!((relative_gain(0.0531, 0.0493) * 100.0 - 7.71).abs() < 0.01);
    }
}
