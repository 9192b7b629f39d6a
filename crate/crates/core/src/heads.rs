//! Prediction heads over `[patient ‖ drug]` features and their losses.
//!
//! The RECIST and AUDRC heads are `2d → d → 1` MLPs with a sigmoid output;
//! the MTLR head is `2d → d → K` and emits one logit per interval.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Linear;
use crate::tensor::{Element, Graph, ParamStore, Tensor, TensorError, Var};

/// Clamp applied inside every log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{predictions} predictions for {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("focal alpha must lie in [0, 1] and gamma be non-negative, got alpha={alpha}, gamma={gamma}")]
    FocalParams { alpha: f64, gamma: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<(), HeadError> {
        if (0.0..=1.0).contains(&self.alpha) && self.gamma >= 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(HeadError::FocalParams {
                alpha: self.alpha,
                gamma: self.gamma,
            })
        }
    }
}

/// Two-layer MLP with a ReLU hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        dropout: f64,
    ) -> Result<Var, TensorError> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        self.fc2.forward(g, store, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub recist: Mlp,
    pub audrc: Mlp,
    pub mtlr: Mlp,
    pub dropout: f64,
}

impl Heads {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d: usize, k: usize, dropout: f64) -> Self {
        Self {
            recist: Mlp::new(store, rng, "heads.recist", 2 * d, d, 1),
            audrc: Mlp::new(store, rng, "heads.audrc", 2 * d, d, 1),
            mtlr: Mlp::new(store, rng, "heads.mtlr", 2 * d, d, k),
            dropout,
        }
    }

    /// `[N, 2d]` features → `[N]` good-response probabilities.
    pub fn predict_recist<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
    ) -> Result<Var, TensorError> {
        let logit = self.recist.forward(g, store, features, self.dropout)?;
        let n = g.shape(features)[0];
        let logit = g.reshape(logit, &[n])?;
        Ok(g.sigmoid(logit))
    }

    /// `[N, 2d]` features → `[N]` predicted AUDRC in `(0, 1)`.
    pub fn predict_audrc<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
    ) -> Result<Var, TensorError> {
        let out = self.audrc.forward(g, store, features, self.dropout)?;
        let n = g.shape(features)[0];
        let out = g.reshape(out, &[n])?;
        Ok(g.sigmoid(out))
    }

    /// `[N, 2d]` features → `[N, K]` interval logits.
    pub fn mtlr_logits<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
    ) -> Result<Var, TensorError> {
        self.mtlr.forward(g, store, features, self.dropout)
    }
}

/// Mean focal loss of probabilities `p` against binary labels.
pub fn focal_loss(p: &[f64], labels: &[bool], fp: FocalParams) -> Result<f64, HeadError> {
    if p.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    if p.len() != labels.len() {
        return Err(HeadError::LengthMismatch {
            predictions: p.len(),
            targets: labels.len(),
        });
    }
    fp.validate()?;
    let total: f64 = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if y {
                -fp.alpha * (1.0 - p).powf(fp.gamma) * p.max(LOG_EPS).ln()
            } else {
                -(1.0 - fp.alpha) * p.powf(fp.gamma) * (1.0 - p).max(LOG_EPS).ln()
            }
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Mean squared error.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64, HeadError> {
    if pred.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    if pred.len() != target.len() {
        return Err(HeadError::LengthMismatch {
            predictions: pred.len(),
            targets: target.len(),
        });
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

fn vector<T: Element>(values: impl Iterator<Item = f64>) -> Tensor<T> {
    let data: Vec<T> = values.map(T::from_f64_lossy).collect();
    let n = data.len();
    Tensor::new(vec![n], data).expect("vector shape")
}

/// `x^γ` as `exp(γ·log x)`, exact 1 at `γ = 0`.
fn pow<T: Element>(g: &mut Graph<T>, x: Var, gamma: f64) -> Var {
    if gamma == 0.0 {
        let shape = g.shape(x).to_vec();
        return g.constant(Tensor::full(&shape, T::one()));
    }
    if gamma == 1.0 {
        return x;
    }
    let lx = g.log(x, LOG_EPS);
    let scaled = g.scale(lx, T::from_f64_lossy(gamma));
    g.exp(scaled)
}

/// Graph version of [`focal_loss`] over a `[N]` probability vector.
pub fn focal_loss_graph<T: Element>(
    g: &mut Graph<T>,
    p: Var,
    labels: &[bool],
    fp: FocalParams,
) -> Result<Var, HeadError> {
    fp.validate()?;
    let n = g.value(p).len();
    if labels.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    if n != labels.len() {
        return Err(HeadError::LengthMismatch {
            predictions: n,
            targets: labels.len(),
        });
    }
    let q = g.affine(p, -T::one(), T::one());
    let log_p = g.log(p, LOG_EPS);
    let log_q = g.log(q, LOG_EPS);
    let wq = pow(g, q, fp.gamma);
    let wp = pow(g, p, fp.gamma);
    let c_pos = g.constant(vector(labels.iter().map(|&y| if y { -fp.alpha } else { 0.0 })));
    let c_neg = g.constant(vector(labels.iter().map(|&y| if y { 0.0 } else { -(1.0 - fp.alpha) })));
    let pos = g.mul(wq, log_p)?;
    let pos = g.mul(pos, c_pos)?;
    let neg = g.mul(wp, log_q)?;
    let neg = g.mul(neg, c_neg)?;
    let total = g.add(pos, neg)?;
    Ok(g.mean(total))
}

/// Graph version of [`mse_loss`] over a `[N]` prediction vector.
pub fn mse_loss_graph<T: Element>(g: &mut Graph<T>, pred: Var, target: &[f64]) -> Result<Var, HeadError> {
    let n = g.value(pred).len();
    if target.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    if n != target.len() {
        return Err(HeadError::LengthMismatch {
            predictions: n,
            targets: target.len(),
        });
    }
    let t = g.constant(vector(target.iter().copied()));
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use approx::assert_abs_diff_eq;

    #[test]
    fn focal_worked_values() {
        let half = FocalParams { alpha: 0.5, gamma: 0.0 };
        assert_abs_diff_eq!(
            focal_loss(&[0.5], &[true], half).unwrap(),
            0.5 * 2f64.ln(),
            epsilon = 1e-15
        );
        let v = focal_loss(&[0.9], &[true], FocalParams::default()).unwrap();
        assert_abs_diff_eq!(v, 0.25 * 0.01 * -(0.9f64.ln()), epsilon = 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
        assert_eq!(focal_loss(&[], &[], half), Err(HeadError::EmptyBatch));
    }

    #[test]
    fn mse_worked_values() {
        assert_eq!(mse_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[], &[]), Err(HeadError::EmptyBatch));
    }

    #[test]
    fn graph_losses_match_scalar() {
        let p = [0.2, 0.7, 0.95, 0.01];
        let y = [true, false, true, false];
        let fp = FocalParams::default();
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let pv = g.constant(Tensor::from_f64(&[4], &p).unwrap());
        let l = focal_loss_graph(&mut g, pv, &y, fp).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), focal_loss(&p, &y, fp).unwrap(), epsilon = 1e-14);
        let m = mse_loss_graph(&mut g, pv, &[0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(
            g.value(m).item(),
            mse_loss(&p, &[0.0, 1.0, 0.5, 0.5]).unwrap(),
            epsilon = 1e-14
        );
    }
}
