//! Ranking metrics for ID-vs-OOD separation (ID is the positive class) and
//! ID classification accuracy.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Paired confidence scores: ID examples are positives, OOD negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    id: Vec<f64>,
    ood: Vec<f64>,
}

impl ScoredSet {
    pub fn new(id: Vec<f64>, ood: Vec<f64>) -> Result<Self> {
        if id.is_empty() || ood.is_empty() {
            return Err(Error::Metric(format!(
                "need scores on both sides, got {} ID and {} OOD",
                id.len(),
                ood.len()
            )));
        }
        if id.iter().chain(&ood).any(|v| !v.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        Ok(Self { id, ood })
    }

    pub fn id_scores(&self) -> &[f64] {
        &self.id
    }

    pub fn ood_scores(&self) -> &[f64] {
        &self.ood
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counting one half.
pub fn auroc(set: &ScoredSet) -> f64 {
    let ood = sorted(&set.ood);
    let mut twice_wins: u64 = 0;
    for &s in &set.id {
        let below = ood.partition_point(|&o| o < s) as u64;
        let not_above = ood.partition_point(|&o| o <= s) as u64;
        twice_wins += 2 * below + (not_above - below);
    }
    twice_wins as f64 / 2.0 / (set.id.len() as f64 * set.ood.len() as f64)
}

/// Smallest count of ID scores that reaches a 95% true positive rate.
fn tpr95_count(n: usize) -> usize {
    (95 * n).div_ceil(100)
}

/// FPR at the largest threshold whose TPR (fraction of ID scores `>= τ`) is
/// at least 0.95.
pub fn far_at_95(set: &ScoredSet) -> f64 {
    let mut id = set.id.clone();
    id.sort_by(|a, b| b.total_cmp(a));
    let k = tpr95_count(id.len()).max(1);
    let tau = id[k - 1];
    let fp = set.ood.iter().filter(|&&o| o >= tau).count();
    fp as f64 / set.ood.len() as f64
}

/// Step-wise average precision. Equal scores form one block that enters
/// the ranking together, at the block's precision.
pub fn aupr(set: &ScoredSet) -> f64 {
    let mut all: Vec<(f64, bool)> = set
        .id
        .iter()
        .map(|&s| (s, true))
        .chain(set.ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = set.id.len() as f64;
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut block_tp = 0;
        while j < all.len() && all[j].0.total_cmp(&all[i].0) == Ordering::Equal {
            block_tp += usize::from(all[j].1);
            j += 1;
        }
        tp += block_tp;
        seen += j - i;
        if block_tp > 0 {
            ap += block_tp as f64 * (tp as f64 / seen as f64);
        }
        i = j;
    }
    ap / positives
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn id_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Metric(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let correct = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}
