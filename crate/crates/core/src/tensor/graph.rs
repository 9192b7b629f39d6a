use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Element, ParamId, ParamStore, Tensor, TensorError};

/// Whether stochastic ops (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Affine {
        a: usize,
        scale: T,
    },
    Concat {
        parts: Vec<(usize, usize)>,
    },
    Slice {
        a: usize,
        start: usize,
        width: usize,
    },
    Reshape {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Log {
        a: usize,
        eps: T,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    MaskedMean {
        a: usize,
        valid: Vec<bool>,
        counts: Vec<usize>,
    },
    MaskedLogSumExp {
        a: usize,
        weights: Vec<T>,
    },
    Dropout {
        a: usize,
        scale_mask: Vec<T>,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaskedMean { .. } => "masked_mean",
            Op::MaskedLogSumExp { .. } => "masked_logsumexp",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation tape. Ops evaluate eagerly as they are recorded, so node
/// order is a topological order by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

fn add_into<T: Element>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => {
            for (x, y) in d.iter_mut().zip(src) {
                *x = *x + y;
            }
        }
        None => *dst = Some(src),
    }
}

impl<T: Element> Graph<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input leaf (gradient available through [`Gradients::wrt`]).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[.., k] · b[k, n]`, flattening all leading dims of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(a_s, b_s, c_s, m, k, n);
                } else {
                    gemm_nn(a_s, b_s, c_s, m, k, n);
                }
            }
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    /// Elementwise sum; `b` may also be a vector broadcast over the last dim.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            true
        } else {
            return Err(self.mismatch("add", a, b));
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<T> = if broadcast {
            let w = bv.len();
            av.data().iter().enumerate().map(|(i, &x)| x + bv[i % w]).collect()
        } else {
            av.data().iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        let shape = av.shape().to_vec();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Add {
                a: a.0,
                b: b.0,
                broadcast,
            },
            ng,
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().map(|&x| scale * x + shift).collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: out,
        };
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Affine { a: a.0, scale }, ng)
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(self.mismatch("concat", parts[0], p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: ids.into_iter().zip(widths).collect(),
            },
            ng,
        ))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let width = av.last_dim();
        if start + len > width || av.shape().is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                node: self.nodes.len(),
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = av.outer();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[a.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a: a.0, start, width }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = (*self.nodes[a.0].value)
            .clone()
            .reshaped(shape)
            .map_err(|_| TensorError::ShapeMismatch {
                op: "reshape",
                node: self.nodes.len(),
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            })?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(t, Op::Reshape { a: a.0 }, ng))
    }

    /// Softmax over the last dimension. Subtracts the row max first.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let w = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_row(row, None);
        }
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: out,
        };
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Softmax { a: a.0 }, ng)
    }

    /// Softmax over the last dim of `[B, Lq, Lk]` scores with a key padding
    /// mask of `B·Lk` flags (`true` = attendable). Masked keys get a −∞
    /// logit, i.e. exactly zero weight. Rows with no attendable key are zero.
    pub fn masked_softmax(&mut self, a: Var, valid: &[bool]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || valid.len() != s[0] * s[2] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                node: self.nodes.len(),
                lhs: s.to_vec(),
                rhs: vec![valid.len()],
            });
        }
        let (lq, lk) = (s[1], s[2]);
        let mut out = av.data().to_vec();
        for (r, row) in out.chunks_mut(lk).enumerate() {
            let b = r / lq;
            softmax_row(row, Some(&valid[b * lk..(b + 1) * lk]));
        }
        let t = Tensor {
            shape: s.to_vec(),
            data: out,
        };
        let ng = self.ng(&[a.0]);
        Ok(self.push(t, Op::Softmax { a: a.0 }, ng))
    }

    /// Layer normalization over the last dimension with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let w = self.value(a).last_dim();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(self.mismatch("layer_norm", a, gamma));
        }
        let eps = T::from_f64_lossy(eps);
        let wt = T::from_usize(w).unwrap();
        let av = self.value(a);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = av.outer();
        let mut xhat = vec![T::zero(); av.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); av.len()];
        for r in 0..rows {
            let x = &av.data()[r * w..(r + 1) * w];
            let mean = x.iter().fold(T::zero(), |s, &v| s + v) / wt;
            let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / wt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let xh = (x[j] - mean) * is;
                xhat[r * w + j] = xh;
                out[r * w + j] = xh * g[j] + bt[j];
            }
        }
        let shape = av.shape().to_vec();
        let ng = self.ng(&[a.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let av = self.value(a);
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(&[a.0]);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp { a: a.0 })
    }

    /// Natural log of `max(x, eps)`.
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        let eps = T::from_f64_lossy(eps);
        self.unary(a, |x| x.max(eps).ln(), Op::Log { a: a.0, eps })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        let ng = self.ng(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s = av.data().iter().fold(T::zero(), |s, &v| s + v) / n;
        let ng = self.ng(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, ng)
    }

    /// Mean over the middle axis of `[B, L, d]` restricted to valid positions.
    pub fn masked_mean(&mut self, a: Var, valid: &[bool]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || valid.len() != s[0] * s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean",
                node: self.nodes.len(),
                lhs: s.to_vec(),
                rhs: vec![valid.len()],
            });
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut counts = vec![0usize; b];
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for li in 0..l {
                if !valid[bi * l + li] {
                    continue;
                }
                counts[bi] += 1;
                let row = &av.data()[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, &x) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o = *o + x;
                }
            }
            if counts[bi] == 0 {
                return Err(TensorError::EmptyMask {
                    op: "masked_mean",
                    node: self.nodes.len(),
                    row: bi,
                });
            }
            let c = T::from_usize(counts[bi]).unwrap();
            for o in &mut out[bi * d..(bi + 1) * d] {
                *o = *o / c;
            }
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::MaskedMean {
                a: a.0,
                valid: valid.to_vec(),
                counts,
            },
            ng,
        ))
    }

    /// `log Σ exp(x)` over the valid entries of each row of `[N, n]`.
    pub fn masked_logsumexp(&mut self, a: Var, valid: &[bool]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let w = av.last_dim();
        if av.shape().len() != 2 || valid.len() != av.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_logsumexp",
                node: self.nodes.len(),
                lhs: av.shape().to_vec(),
                rhs: vec![valid.len()],
            });
        }
        let rows = av.outer();
        let mut out = Vec::with_capacity(rows);
        let mut weights = av.data().to_vec();
        for r in 0..rows {
            let mask = &valid[r * w..(r + 1) * w];
            if !mask.iter().any(|&v| v) {
                return Err(TensorError::EmptyMask {
                    op: "masked_logsumexp",
                    node: self.nodes.len(),
                    row: r,
                });
            }
            let row = &mut weights[r * w..(r + 1) * w];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .fold(T::neg_infinity(), |m, (&x, _)| m.max(x));
            let mut total = T::zero();
            for (x, &m) in row.iter_mut().zip(mask) {
                *x = if m { (*x - max).exp() } else { T::zero() };
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
            out.push(max + total.ln());
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(
            Tensor::new(vec![rows], out)?,
            Op::MaskedLogSumExp { a: a.0, weights },
            ng,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = T::from_f64_lossy(1.0 / keep);
        let n = self.value(a).len();
        let scale_mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let av = self.value(a);
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().zip(&scale_mask).map(|(&x, &m)| x * m).collect(),
        };
        let ng = self.ng(&[a.0]);
        self.push(t, Op::Dropout { a: a.0, scale_mask }, ng)
    }

    /// Row lookup: `table[V, d]` gathered at `indices` → `[n, d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                node: self.nodes.len(),
                lhs: tv.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    node: self.nodes.len(),
                    index: i,
                    rows,
                });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table.0]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut done: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor<T>>> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if let Op::Param(pid) = node.op {
                if params.len() <= pid.0 {
                    params.resize_with(pid.0 + 1, || None);
                }
                let gt = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g.clone(),
                };
                match &mut params[pid.0] {
                    Some(acc) => {
                        for (x, y) in acc.data.iter_mut().zip(&gt.data) {
                            *x = *x + *y;
                        }
                    }
                    slot @ None => *slot = Some(gt),
                }
            }
            done[i] = Some(Tensor {
                shape: node.value.shape().to_vec(),
                data: g,
            });
        }
        Ok(Gradients { params, nodes: done })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| -> &Tensor<T> { &self.nodes[j].value };
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, val(*b).data(), &mut da, m, n, k);
                    add_into(&mut grads[*a], da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(val(*a).data(), g, &mut db, m, k, n);
                    add_into(&mut grads[*b], db);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = val(*a).data();
                let bd = val(*b).data();
                if wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                        let d_s = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(g_s, b_s, d_s, m, n, k);
                        } else {
                            gemm_nt(g_s, b_s, d_s, m, n, k);
                        }
                    }
                    add_into(&mut grads[*a], da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                        let d_s = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(g_s, a_s, d_s, m, n, k);
                        } else {
                            gemm_tn(a_s, g_s, d_s, m, k, n);
                        }
                    }
                    add_into(&mut grads[*b], db);
                }
            }
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    add_into(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    if *broadcast {
                        let w = val(*b).len();
                        let mut db = vec![T::zero(); w];
                        for (idx, &gv) in g.iter().enumerate() {
                            db[idx % w] = db[idx % w] + gv;
                        }
                        add_into(&mut grads[*b], db);
                    } else {
                        add_into(&mut grads[*b], g.to_vec());
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    add_into(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    add_into(&mut grads[*b], g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[*a], d);
                }
                if wants(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[*b], d);
                }
            }
            Op::Affine { a, scale } => {
                let d = g.iter().map(|&x| x * *scale).collect();
                add_into(&mut grads[*a], d);
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, w) in parts {
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        add_into(&mut grads[p], d);
                    }
                    offset += w;
                }
            }
            Op::Slice { a, start, width } => {
                let len = node.value.last_dim();
                let rows = node.value.outer();
                let mut d = vec![T::zero(); rows * width];
                for r in 0..rows {
                    d[r * width + start..r * width + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                add_into(&mut grads[*a], d);
            }
            Op::Reshape { a } => add_into(&mut grads[*a], g.to_vec()),
            Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &g)| s + y * g);
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                add_into(&mut grads[*a], d);
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = node.value.last_dim();
                let gm = val(*gamma).data();
                if wants(*gamma) {
                    let mut dg = vec![T::zero(); w];
                    for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[idx % w] = dg[idx % w] + gv * xh;
                    }
                    add_into(&mut grads[*gamma], dg);
                }
                if wants(*beta) {
                    let mut db = vec![T::zero(); w];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % w] = db[idx % w] + gv;
                    }
                    add_into(&mut grads[*beta], db);
                }
                if wants(*a) {
                    let wt = T::from_usize(w).unwrap();
                    let mut d = vec![T::zero(); g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let xr = &xhat[r * w..(r + 1) * w];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..w {
                            let dxh = gr[j] * gm[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                        }
                        mean_dxh = mean_dxh / wt;
                        mean_dxh_xh = mean_dxh_xh / wt;
                        for j in 0..w {
                            let dxh = gr[j] * gm[j];
                            d[r * w + j] = is * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    add_into(&mut grads[*a], d);
                }
            }
            Op::Relu { a } => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                add_into(&mut grads[*a], d);
            }
            Op::Sigmoid { a } => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                add_into(&mut grads[*a], d);
            }
            Op::Exp { a } => {
                let d = g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y).collect();
                add_into(&mut grads[*a], d);
            }
            Op::Log { a, eps } => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > *eps { gv / x } else { T::zero() })
                    .collect();
                add_into(&mut grads[*a], d);
            }
            Op::Sum { a } => {
                add_into(&mut grads[*a], vec![g[0]; val(*a).len()]);
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                let v = g[0] / T::from_usize(n.max(1)).unwrap();
                add_into(&mut grads[*a], vec![v; n]);
            }
            Op::MaskedMean { a, valid, counts } => {
                let s = val(*a).shape();
                let (l, d) = (s[1], s[2]);
                let mut da = vec![T::zero(); val(*a).len()];
                for (bi, &c) in counts.iter().enumerate() {
                    let c = T::from_usize(c).unwrap();
                    for li in 0..l {
                        if !valid[bi * l + li] {
                            continue;
                        }
                        for j in 0..d {
                            da[(bi * l + li) * d + j] = g[bi * d + j] / c;
                        }
                    }
                }
                add_into(&mut grads[*a], da);
            }
            Op::MaskedLogSumExp { a, weights } => {
                let w = val(*a).last_dim();
                let d = weights.iter().enumerate().map(|(idx, &p)| p * g[idx / w]).collect();
                add_into(&mut grads[*a], d);
            }
            Op::Dropout { a, scale_mask } => {
                let d = g.iter().zip(scale_mask).map(|(&x, &m)| x * m).collect();
                add_into(&mut grads[*a], d);
            }
            Op::Gather { table, indices } => {
                let d = val(*table).last_dim();
                let mut dt = vec![T::zero(); val(*table).len()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] = dt[idx * d + j] + g[r * d + j];
                    }
                }
                add_into(&mut grads[*table], dt);
            }
        }
    }

    /// Name of the op that produced `v`; used in diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn softmax_row<T: Element>(row: &mut [T], valid: Option<&[bool]>) {
    let ok = |j: usize| valid.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if ok(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        *x = if ok(j) { (*x - max).exp() } else { T::zero() };
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

pub(crate) fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
