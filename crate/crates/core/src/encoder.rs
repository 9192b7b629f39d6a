//! Transformer patient encoder and fingerprint drug embedder.
//!
//! Each token position fuses the two tracks: a learned gene embedding is
//! concatenated with a mutation representation (learned pair embedding plus
//! a linear projection of the 23 annotation bits), and the `2d` vector is
//! projected back to `d`. Post-norm encoder layers follow, then masked mean
//! pooling (or the `<s>` position) yields the patient embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Fingerprint, FINGERPRINT_BITS};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::tokenizer::{Batch, ANNOTATION_DIM};

pub const DRUG_HIDDEN: usize = 256;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("embedding dim {d} is not divisible by {heads} heads")]
    HeadSplit { d: usize, heads: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("{track} index {index} out of range for vocabulary of {size}")]
    IndexOutOfRange {
        track: &'static str,
        index: usize,
        size: usize,
    },
    #[error("sample {0} has no unmasked positions to pool")]
    EmptySample(usize),
    #[error("fingerprint input has {0} columns, expected 2048")]
    FingerprintWidth(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    /// Output at the `<s>` position.
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub positional: bool,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            layers: 2,
            ffn_dim: 256,
            dropout: 0.1,
            positional: false,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(EncoderError::Config("d, heads and ffn_dim must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(EncoderError::HeadSplit {
                d: self.d,
                heads: self.heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Glorot-uniform weight tensor.
pub(crate) fn glorot<T: Element>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

fn normal_table<T: Element>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, sd).expect("positive sd");
    let data = (0..rows * cols).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("table shape")
}

/// Affine layer `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            weight: store.register(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: Some(store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    /// `x·W` only.
    pub(crate) fn without_bias<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            weight: store.register(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: None,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let xw = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(xw, b)
            }
            None => Ok(xw),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub(crate) fn new<T: Element>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[d], T::one())),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention block output with per-head intermediates.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[B, L, d]` after the output projection.
    pub output: Var,
    /// Per head, `[B, L, L]` attention weights.
    pub weights: Vec<Var>,
    /// Per head, `[B, L, d/h]` outputs before concatenation.
    pub head_outputs: Vec<Var>,
}

impl MultiHeadAttention {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            // A key bias shifts every score in a row equally and cancels in
            // the softmax, so it would never receive a gradient.
            k: Linear::without_bias(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// Scaled dot-product attention over `x: [B, L, d]`; `valid` has `B·L`
    /// key flags.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        valid: &[bool],
    ) -> Result<AttentionOutput, TensorError> {
        let d = *g.shape(x).last().expect("rank-3 input");
        let dh = d / self.heads;
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut weights = Vec::with_capacity(self.heads);
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, h * dh, dh)?;
            let kh = g.slice(k, h * dh, dh)?;
            let vh = g.slice(v, h * dh, dh)?;
            let scores = g.batch_matmul(qh, kh, true)?;
            let scores = g.scale(scores, scale);
            let a = g.masked_softmax(scores, valid)?;
            head_outputs.push(g.batch_matmul(a, vh, false)?);
            weights.push(a);
        }
        let concat = if self.heads == 1 {
            head_outputs[0]
        } else {
            g.concat(&head_outputs)?
        };
        let output = self.o.forward(g, store, concat)?;
        Ok(AttentionOutput {
            output,
            weights,
            head_outputs,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNormParams,
}

impl EncoderLayer {
    /// `LN(x + Drop(MHA(x)))`, then `LN(h + Drop(FFN(h)))`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        valid: &[bool],
        dropout: f64,
    ) -> Result<Var, TensorError> {
        let att = self.attention.forward(g, store, x, valid)?.output;
        let att = g.dropout(att, dropout);
        let h = g.add(x, att)?;
        let h = self.norm1.forward(g, store, h)?;
        let f = self.ffn1.forward(g, store, h)?;
        let f = g.relu(f);
        let f = self.ffn2.forward(g, store, f)?;
        let f = g.dropout(f, dropout);
        let out = g.add(h, f)?;
        self.norm2.forward(g, store, out)
    }
}

/// Parameter handles of the patient encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientEncoder {
    pub config: EncoderConfig,
    pub gene_vocab_size: usize,
    pub mutation_table_size: usize,
    pub gene_embedding: ParamId,
    pub pair_embedding: ParamId,
    pub annotation: Linear,
    pub fuse: Linear,
    pub layers: Vec<EncoderLayer>,
}

/// Sinusoidal position table `[L, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

impl PatientEncoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        config: &EncoderConfig,
        gene_vocab_size: usize,
        mutation_table_size: usize,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d;
        let sd = 1.0 / (d as f64).sqrt();
        let gene_embedding = store.register("encoder.gene_embedding", normal_table(rng, gene_vocab_size, d, sd));
        let pair_embedding = store.register("encoder.pair_embedding", normal_table(rng, mutation_table_size, d, sd));
        let annotation = Linear::new(store, rng, "encoder.annotation", ANNOTATION_DIM, d);
        let fuse = Linear::new(store, rng, "encoder.fuse", 2 * d, d);
        let layers = (0..config.layers)
            .map(|i| {
                let name = format!("encoder.layer{i}");
                EncoderLayer {
                    attention: MultiHeadAttention::new(store, rng, &format!("{name}.attention"), d, config.heads),
                    norm1: LayerNormParams::new(store, &format!("{name}.norm1"), d),
                    ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), d, config.ffn_dim),
                    ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), config.ffn_dim, d),
                    norm2: LayerNormParams::new(store, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            gene_vocab_size,
            mutation_table_size,
            gene_embedding,
            pair_embedding,
            annotation,
            fuse,
            layers,
        })
    }

    fn check_indices(&self, batch: &Batch) -> Result<(), EncoderError> {
        if let Some(&i) = batch.gene_ids.iter().find(|&&i| i >= self.gene_vocab_size) {
            return Err(EncoderError::IndexOutOfRange {
                track: "gene",
                index: i,
                size: self.gene_vocab_size,
            });
        }
        if let Some(&i) = batch.mutation_ids.iter().find(|&&i| i >= self.mutation_table_size) {
            return Err(EncoderError::IndexOutOfRange {
                track: "mutation",
                index: i,
                size: self.mutation_table_size,
            });
        }
        Ok(())
    }

    /// Fused token matrix `[B, L, d]` and the `B·L` validity mask.
    pub fn embed_tokens<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
    ) -> Result<(Var, Vec<bool>), EncoderError> {
        self.check_indices(batch)?;
        let (b, l, d) = (batch.batch_size, batch.seq_len, self.config.d);
        let gene_table = g.param(store, self.gene_embedding);
        let genes = g.gather(gene_table, &batch.gene_ids)?;
        let pair_table = g.param(store, self.pair_embedding);
        let pairs = g.gather(pair_table, &batch.mutation_ids)?;
        let ann = g.constant(Tensor::new(
            vec![b * l, ANNOTATION_DIM],
            batch.annotations.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )?);
        let ann = self.annotation.forward(g, store, ann)?;
        let mutations = g.add(pairs, ann)?;
        let both = g.concat(&[genes, mutations])?;
        let mut x = self.fuse.forward(g, store, both)?;
        if self.config.positional {
            let table = sinusoidal_positions(l, d);
            let pe: Vec<T> = (0..b)
                .flat_map(|_| table.iter().map(|&v| T::from_f64_lossy(v)))
                .collect();
            let pe = g.constant(Tensor::new(vec![b * l, d], pe)?);
            x = g.add(x, pe)?;
        }
        let x = g.reshape(x, &[b, l, d])?;
        Ok((x, batch.valid()))
    }

    /// Patient embeddings `[B, d]`.
    pub fn encode<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
    ) -> Result<Var, EncoderError> {
        for i in 0..batch.batch_size {
            if batch.lengths[i] == 0
                || batch.pad_mask[i * batch.seq_len..(i + 1) * batch.seq_len]
                    .iter()
                    .all(|&p| p)
            {
                return Err(EncoderError::EmptySample(i));
            }
        }
        let (mut x, valid) = self.embed_tokens(g, store, batch)?;
        x = g.dropout(x, self.config.dropout);
        for layer in &self.layers {
            x = layer.forward(g, store, x, &valid, self.config.dropout)?;
        }
        match self.config.pooling {
            Pooling::Mean => Ok(g.masked_mean(x, &valid)?),
            Pooling::Cls => {
                let (b, l, d) = (batch.batch_size, batch.seq_len, self.config.d);
                let flat = g.reshape(x, &[b, l * d])?;
                Ok(g.slice(flat, 0, d)?)
            }
        }
    }
}

/// `2048 → 256 → LN → ReLU → d` fingerprint embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct DrugEmbedder {
    pub fc1: Linear,
    pub norm: LayerNormParams,
    pub fc2: Linear,
    pub dropout: f64,
}

impl DrugEmbedder {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d: usize, dropout: f64) -> Self {
        Self {
            fc1: Linear::new(store, rng, "drug.fc1", FINGERPRINT_BITS, DRUG_HIDDEN),
            norm: LayerNormParams::new(store, "drug.norm", DRUG_HIDDEN),
            fc2: Linear::new(store, rng, "drug.fc2", DRUG_HIDDEN, d),
            dropout,
        }
    }

    /// Embeds fingerprint rows `[N, 2048]` into `[N, d]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fps: Var) -> Result<Var, EncoderError> {
        let width = *g.shape(fps).last().unwrap_or(&0);
        if width != FINGERPRINT_BITS {
            return Err(EncoderError::FingerprintWidth(width));
        }
        let h = self.fc1.forward(g, store, fps)?;
        let h = self.norm.forward(g, store, h)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        Ok(self.fc2.forward(g, store, h)?)
    }
}

/// Constant `[N, 2048]` fingerprint matrix.
pub fn fingerprint_tensor<T: Element>(fps: &[&Fingerprint]) -> Tensor<T> {
    let mut data = Vec::with_capacity(fps.len() * FINGERPRINT_BITS);
    for fp in fps {
        data.extend((0..FINGERPRINT_BITS).map(|i| if fp.get(i) { T::one() } else { T::zero() }));
    }
    Tensor::new(vec![fps.len(), FINGERPRINT_BITS], data).expect("fingerprint shape")
}

/// Deterministic parameter-initialization stream.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
