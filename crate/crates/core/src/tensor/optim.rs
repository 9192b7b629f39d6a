use serde::{Deserialize, Serialize};

use super::{Element, Gradients, ParamId, ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam or plain SGD over a [`ParamStore`].
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore<T>) -> Self {
        let moments = |k: OptimizerKind| -> Vec<Tensor<T>> {
            match k {
                OptimizerKind::Adam { .. } => store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
                OptimizerKind::Sgd => Vec::new(),
            }
        };
        Self {
            kind,
            lr,
            step: 0,
            first: moments(kind),
            second: moments(kind),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient and passes
    /// `filter`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        filter: impl Fn(ParamId) -> bool,
    ) -> Result<(), TensorError> {
        if let OptimizerKind::Adam { .. } = self.kind {
            if self.first.len() != store.len() {
                return Err(TensorError::OptimizerMismatch(format!(
                    "{} moment buffers for {} parameters",
                    self.first.len(),
                    store.len()
                )));
            }
        }
        self.step += 1;
        for (id, grad) in grads.params() {
            if !filter(id) {
                continue;
            }
            if grad.shape() != store.get(id).shape() {
                return Err(TensorError::OptimizerMismatch(format!(
                    "gradient shape {:?} for {}",
                    grad.shape(),
                    store.name(id)
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => sgd_update(store.get_mut(id).data_mut(), grad.data(), self.lr),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.step as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    adam_update(
                        store.get_mut(id).data_mut(),
                        grad.data(),
                        self.first[id.index()].data_mut(),
                        self.second[id.index()].data_mut(),
                        AdamCoefficients {
                            lr: self.lr,
                            beta1,
                            beta2,
                            eps,
                            bc1,
                            bc2,
                        },
                    );
                }
            }
        }
        Ok(())
    }
}

struct AdamCoefficients {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

fn sgd_update<T: Element>(param: &mut [T], grad: &[T], lr: f64) {
    let lr = T::from_f64_lossy(lr);
    for (p, &g) in param.iter_mut().zip(grad) {
        *p = *p - lr * g;
    }
}

fn adam_update<T: Element>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], c: AdamCoefficients) {
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let one = T::one();
    let step = T::from_f64_lossy(c.lr / c.bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / c.bc2);
    let eps = T::from_f64_lossy(c.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        param[i] = param[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Mode};

    fn quadratic_loss(store: &ParamStore<f64>, id: ParamId) -> (f64, Gradients<f64>) {
        // f(x) = Σ (x_i − 3)² · c_i with curvature c = [1, 4]
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(store, id);
        let shift = g.constant(Tensor::from_f64(&[2], &[3.0, 3.0]).unwrap());
        let c = g.constant(Tensor::from_f64(&[2], &[1.0, 4.0]).unwrap());
        let d = g.sub(x, shift).unwrap();
        let sq = g.mul(d, d).unwrap();
        let w = g.mul(sq, c).unwrap();
        let loss = g.sum(w);
        (g.value(loss).item(), g.backward(loss).unwrap())
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, &store);
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(&store, id);
        let z = g.scale(x, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        drop(g);
        opt.step(&mut store, &grads, |_| true).unwrap();
        assert_eq!(store.get(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g² → Δ = lr · g / (|g| + ε) ≈ lr for g = 1.
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", Tensor::scalar(0.0));
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, &store);
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(&store, id);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        drop(g);
        opt.step(&mut store, &grads, |_| true).unwrap();
        let moved = store.get(id).item();
        assert!((moved + 0.1).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn adam_decreases_convex_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, &store);
        let (l0, g0) = quadratic_loss(&store, id);
        opt.step(&mut store, &g0, |_| true).unwrap();
        let (l1, g1) = quadratic_loss(&store, id);
        opt.step(&mut store, &g1, |_| true).unwrap();
        let (l2, _) = quadratic_loss(&store, id);
        assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");
    }

    #[test]
    fn sgd_arithmetic_and_identity() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", Tensor::scalar(1.0));
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(&store, id);
        let two = g.scale(x, 2.0);
        let loss = g.sum(two);
        let grads = g.backward(loss).unwrap();
        drop(g);
        let mut frozen = Optimizer::new(OptimizerKind::Sgd, 0.0, &store);
        frozen.step(&mut store, &grads, |_| true).unwrap();
        assert_eq!(store.get(id).item(), 1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &store);
        opt.step(&mut store, &grads, |_| true).unwrap();
        assert_eq!(store.get(id).item(), 0.0);
    }

    #[test]
    fn sgd_monotone_below_curvature_bound() {
        // Largest curvature of f is 2·4 = 8, so lr < 2/8 converges monotonically.
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", Tensor::from_f64(&[2], &[0.0, 10.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &store);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let (l, grads) = quadratic_loss(&store, id);
            assert!(l < prev);
            prev = l;
            opt.step(&mut store, &grads, |_| true).unwrap();
        }
    }
}
