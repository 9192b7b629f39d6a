//! Multi-task logistic regression (MTLR) survival machinery.
//!
//! Time is cut into `K` intervals `(τ_{j−1}, τ_j]` with `τ_0 = 0`. A model
//! emits one logit `φ_j` per interval. The `K + 1` admissible outcomes are
//! "event in interval k" (`k = 1..=K`) and "no event before τ_K"; outcome `k`
//! scores `Σ_{j ≥ k} φ_j`, the no-event outcome scores 0, and probabilities
//! are the softmax of those scores.
//!
//! The response vector `S` has `K` entries aligned with `φ` (`S_j = 1` iff
//! `j ≥ k`), so `score_k = φ · S`. Written with a leading `s_0 = 0` entry it
//! has `K + 1` entries; the extra leading zero never touches `φ`.
//!
//! All normalizers are evaluated with log-sum-exp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{quantile_sorted, sorted_copy};
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurvivalError {
    #[error("need at least {k} distinct event times to build {k} intervals, found {distinct}; use a smaller K")]
    TooFewDistinctTimes { distinct: usize, k: usize },
    #[error("interval boundaries must be finite, positive and strictly increasing: {0:?}")]
    InvalidGrid(Vec<f64>),
    #[error("survival time must be a non-negative number, got {0}")]
    NegativeTime(f64),
    #[error("{0} is not an interval boundary of the grid")]
    NotABoundary(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected {expected} logits per sample, got {actual}")]
    LogitWidth { expected: usize, actual: usize },
    #[error("{logits} logit rows for {targets} targets")]
    LengthMismatch { logits: usize, targets: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Interval boundaries `τ_1 < … < τ_K` in days.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    boundaries: Vec<f64>,
}

impl IntervalGrid {
    pub fn new(boundaries: Vec<f64>) -> Result<Self, SurvivalError> {
        let ok = !boundaries.is_empty()
            && boundaries.iter().all(|b| b.is_finite() && *b > 0.0)
            && boundaries.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(SurvivalError::InvalidGrid(boundaries));
        }
        Ok(Self { boundaries })
    }

    pub fn k(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// 1-based interval containing `t`: the smallest `j` with `t ≤ τ_j`, or
    /// `K + 1` past the horizon.
    pub fn interval_of(&self, t: f64) -> usize {
        self.boundaries.partition_point(|&b| b < t) + 1
    }

    /// Boundary index used to turn a survival curve into a risk score.
    pub fn mid_index(&self) -> usize {
        self.k().div_ceil(2)
    }
}

/// Builds `K` intervals from the `q/K` quantiles (`q = 1..=K`) of observed
/// event times.
pub fn discretize(event_times: &[f64], k: usize) -> Result<IntervalGrid, SurvivalError> {
    if let Some(&bad) = event_times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(SurvivalError::NegativeTime(bad));
    }
    let sorted = sorted_copy(event_times);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if k == 0 || distinct.len() < k {
        return Err(SurvivalError::TooFewDistinctTimes {
            distinct: distinct.len(),
            k,
        });
    }
    let boundaries = (1..=k).map(|q| quantile_sorted(&sorted, q as f64 / k as f64)).collect();
    IntervalGrid::new(boundaries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTarget {
    /// 1-based interval of the event (or of censoring); `K + 1` = past horizon.
    pub interval: usize,
    pub event_observed: bool,
    /// `S_j = 1` iff `j ≥ interval`; all zeros past the horizon.
    pub response: Vec<u8>,
}

impl SurvivalTarget {
    /// 0-based outcome indices consistent with this record: the event
    /// interval itself when observed; when censored, every interval strictly
    /// after the censoring interval plus "no event".
    pub fn consistent_outcomes(&self, k: usize) -> std::ops::RangeInclusive<usize> {
        let idx = self.interval - 1;
        if self.event_observed {
            idx..=idx
        } else {
            (idx + 1).min(k)..=k
        }
    }

    fn consistent_mask(&self, k: usize) -> Vec<bool> {
        let range = self.consistent_outcomes(k);
        (0..=k).map(|c| range.contains(&c)).collect()
    }
}

pub fn encode_target(t: f64, observed: bool, grid: &IntervalGrid) -> Result<SurvivalTarget, SurvivalError> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(SurvivalError::NegativeTime(t));
    }
    let interval = grid.interval_of(t);
    let response = (1..=grid.k()).map(|j| u8::from(j >= interval)).collect();
    Ok(SurvivalTarget {
        interval,
        event_observed: observed,
        response,
    })
}

/// Outcome scores `[Σ_{j≥1} φ_j, …, φ_K, 0]`.
fn outcome_scores(phi: &[f64]) -> Vec<f64> {
    let k = phi.len();
    let mut scores = vec![0.0; k + 1];
    let mut acc = 0.0;
    for j in (0..k).rev() {
        acc += phi[j];
        scores[j] = acc;
    }
    scores
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Probabilities `p_1..p_K, p_{K+1}` of the `K + 1` outcomes.
pub fn event_distribution(phi: &[f64]) -> Vec<f64> {
    let scores = outcome_scores(phi);
    let log_z = logsumexp(scores.iter().copied());
    scores.iter().map(|s| (s - log_z).exp()).collect()
}

/// `F(τ_0), …, F(τ_K)` where `F(τ_k) = Σ_{m > k} p_m`.
pub fn survival_curve(phi: &[f64]) -> Vec<f64> {
    let p = event_distribution(phi);
    let k = phi.len();
    let mut curve = vec![0.0; k + 1];
    let mut tail = 0.0;
    for idx in (0..=k).rev() {
        tail += p[idx];
        curve[idx] = tail;
    }
    curve[0] = 1.0;
    curve
}

/// `F(t)` for `t` equal to `0` or one of the grid boundaries.
pub fn survival_at(phi: &[f64], grid: &IntervalGrid, t: f64) -> Result<f64, SurvivalError> {
    if phi.len() != grid.k() {
        return Err(SurvivalError::LogitWidth {
            expected: grid.k(),
            actual: phi.len(),
        });
    }
    let idx = if t == 0.0 {
        0
    } else {
        grid.boundaries
            .iter()
            .position(|&b| b == t)
            .map(|i| i + 1)
            .ok_or(SurvivalError::NotABoundary(t))?
    };
    Ok(survival_curve(phi)[idx])
}

/// Risk score for ranking: `1 − F(τ_mid)` at the middle boundary.
pub fn risk_score(phi: &[f64], grid: &IntervalGrid) -> f64 {
    1.0 - survival_curve(phi)[grid.mid_index()]
}

/// Mean censoring-aware negative log-likelihood over a batch of logit rows.
pub fn mtlr_loss(phis: &[Vec<f64>], targets: &[SurvivalTarget]) -> Result<f64, SurvivalError> {
    if phis.is_empty() {
        return Err(SurvivalError::EmptyBatch);
    }
    if phis.len() != targets.len() {
        return Err(SurvivalError::LengthMismatch {
            logits: phis.len(),
            targets: targets.len(),
        });
    }
    let k = phis[0].len();
    let mut total = 0.0;
    for (phi, target) in phis.iter().zip(targets) {
        if phi.len() != k || target.response.len() != k {
            return Err(SurvivalError::LogitWidth {
                expected: k,
                actual: phi.len().min(target.response.len()),
            });
        }
        let scores = outcome_scores(phi);
        let log_z = logsumexp(scores.iter().copied());
        let range = target.consistent_outcomes(k);
        let log_consistent = logsumexp(scores[range].iter().copied());
        total += log_z - log_consistent;
    }
    Ok(total / phis.len() as f64)
}

/// `[K, K+1]` matrix mapping logits to outcome scores: entry `(j, c)` is 1
/// when `j ≥ c` and `c < K`.
pub fn score_matrix<T: Element>(k: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); k * (k + 1)];
    for j in 0..k {
        for c in 0..=j {
            data[j * (k + 1) + c] = T::one();
        }
    }
    Tensor::new(vec![k, k + 1], data).expect("score matrix shape")
}

/// Graph version of [`mtlr_loss`] over logits of shape `[B, K]`.
pub fn mtlr_loss_graph<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[SurvivalTarget],
) -> Result<Var, SurvivalError> {
    let shape = g.shape(logits).to_vec();
    if targets.is_empty() {
        return Err(SurvivalError::EmptyBatch);
    }
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(SurvivalError::LengthMismatch {
            logits: shape.first().copied().unwrap_or(0),
            targets: targets.len(),
        });
    }
    let k = shape[1];
    let delta = g.constant(score_matrix(k));
    let scores = g.matmul(logits, delta)?;
    let all = vec![true; targets.len() * (k + 1)];
    let consistent: Vec<bool> = targets.iter().flat_map(|t| t.consistent_mask(k)).collect();
    let log_z = g.masked_logsumexp(scores, &all)?;
    let log_c = g.masked_logsumexp(scores, &consistent)?;
    let nll = g.sub(log_z, log_c)?;
    Ok(g.mean(nll))
}
