//! Concordance index, AUROC and AUPRC.
//!
//! All three are rank statistics: they depend on scores only through their
//! order, so any strictly increasing transform leaves them unchanged.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("both classes are required")]
    SingleClass,
    #[error("at least one positive label is required")]
    NoPositives,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

fn check_finite(values: &[f64]) -> Result<(), MetricError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MetricError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Fenwick tree over risk ranks.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index. A pair `(i, j)` is comparable when `i` had
/// an observed event and `t_i < t_j`; it is concordant when `risk_i > risk_j`
/// and counts one half on a risk tie.
pub fn concordance_index(times: &[f64], events: &[bool], risks: &[f64]) -> Result<f64, MetricError> {
    if times.len() != events.len() {
        return Err(MetricError::LengthMismatch(times.len(), events.len()));
    }
    if times.len() != risks.len() {
        return Err(MetricError::LengthMismatch(times.len(), risks.len()));
    }
    check_finite(times)?;
    check_finite(risks)?;

    let mut distinct = risks.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    let rank = |r: f64| distinct.partition_point(|&d| d < r);

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = Fenwick::new(distinct.len());
    let mut inserted = 0u64;
    let (mut doubled_concordant, mut comparable) = (0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && times[order[end]] == times[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if !events[i] {
                continue;
            }
            let r = rank(risks[i]);
            let below = tree.below(r);
            let equal = tree.below(r + 1) - below;
            doubled_concordant += 2 * below + equal;
            comparable += inserted;
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    if comparable == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok(doubled_concordant as f64 / (2 * comparable) as f64)
}

/// Area under the ROC curve via the Mann–Whitney statistic with mid-ranks.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::LengthMismatch(labels.len(), scores.len()));
    }
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are doubled so that mid-ranks stay integral.
    let mut doubled_rank_sum = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_mid = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        doubled_rank_sum += doubled_mid * pos_in_group;
        start = end;
    }
    let n_pos = n_pos as u64;
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg as u64) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over distinct score
/// thresholds in descending order, without interpolation.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::LengthMismatch(labels.len(), scores.len()));
    }
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (tp - prev_tp) as f64 / n_pos as f64 * precision;
        prev_tp = tp;
        start = end;
    }
    Ok(ap)
}
