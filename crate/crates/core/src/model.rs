//! The assembled network: tokenizer vocabularies, patient encoder, drug
//! embedder and the three heads sharing one parameter store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Fingerprint;
use crate::encoder::{fingerprint_tensor, init_rng, DrugEmbedder, EncoderConfig, EncoderError, PatientEncoder};
use crate::heads::{HeadError, Heads};
use crate::survival::{risk_score, IntervalGrid, SurvivalError};
use crate::tensor::{Element, Graph, Mode, ParamStore, Tensor, TensorError, Var};
use crate::tokenizer::{
    collate, tokenize, Batch, GeneVocab, MutationProfile, MutationVocab, TokenizedSample, TokenizerError,
    TokenizerOptions,
};

pub const DEFAULT_INTERVALS: usize = 10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no usable mutations: the profile is empty")]
    NoUsableMutations,
    #[error("model has no survival interval grid")]
    NoGrid,
    #[error("interval grid has {grid} intervals but the survival head emits {head}")]
    GridMismatch { grid: usize, head: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Survival intervals `K` (the MTLR head width).
    pub intervals: usize,
    pub tokenizer: TokenizerOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            intervals: DEFAULT_INTERVALS,
            tokenizer: TokenizerOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub gene_vocab: GeneVocab,
    pub mutation_vocab: MutationVocab,
    pub grid: Option<IntervalGrid>,
    pub store: ParamStore<T>,
    pub encoder: PatientEncoder,
    pub drug: DrugEmbedder,
    pub heads: Heads,
}

/// Records paired with drugs, ready for a forward pass. Fingerprints are
/// deduplicated so each distinct drug is embedded once.
pub struct PairBatch<'a> {
    pub batch: Batch,
    pub drugs: Vec<&'a Fingerprint>,
    pub drug_rows: Vec<usize>,
}

impl<'a> PairBatch<'a> {
    pub fn new(samples: &[&TokenizedSample], fingerprints: &[&'a Fingerprint]) -> Result<Self, ModelError> {
        if samples.len() != fingerprints.len() {
            return Err(ModelError::Invalid(format!(
                "{} samples for {} fingerprints",
                samples.len(),
                fingerprints.len()
            )));
        }
        let batch = collate(samples, 0)?;
        let mut drugs: Vec<&Fingerprint> = Vec::new();
        let mut seen: HashMap<&Fingerprint, usize> = HashMap::new();
        let drug_rows = fingerprints
            .iter()
            .map(|fp| {
                *seen.entry(fp).or_insert_with(|| {
                    drugs.push(fp);
                    drugs.len() - 1
                })
            })
            .collect();
        Ok(Self {
            batch,
            drugs,
            drug_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.drug_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drug_rows.is_empty()
    }
}

impl<T: Element> Model<T> {
    pub fn new(
        config: ModelConfig,
        gene_vocab: GeneVocab,
        mutation_vocab: MutationVocab,
        grid: Option<IntervalGrid>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if let Some(g) = &grid {
            if g.k() != config.intervals {
                return Err(ModelError::GridMismatch {
                    grid: g.k(),
                    head: config.intervals,
                });
            }
        }
        if config.intervals == 0 {
            return Err(ModelError::Invalid("intervals must be positive".into()));
        }
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        let encoder = PatientEncoder::new(
            &mut store,
            &mut rng,
            &config.encoder,
            gene_vocab.len(),
            mutation_vocab.table_size(),
        )?;
        let drug = DrugEmbedder::new(&mut store, &mut rng, config.encoder.d, config.encoder.dropout);
        let heads = Heads::new(
            &mut store,
            &mut rng,
            config.encoder.d,
            config.intervals,
            config.encoder.dropout,
        );
        Ok(Self {
            config,
            gene_vocab,
            mutation_vocab,
            grid,
            store,
            encoder,
            drug,
            heads,
        })
    }

    pub fn tokenize(&self, profile: &MutationProfile) -> Result<TokenizedSample, ModelError> {
        Ok(tokenize(
            profile,
            &self.gene_vocab,
            &self.mutation_vocab,
            self.config.tokenizer,
        )?)
    }

    /// `[N, 2d]` concatenated patient and drug embeddings.
    pub fn features(&self, g: &mut Graph<T>, pairs: &PairBatch<'_>) -> Result<Var, ModelError> {
        let patients = self.encoder.encode(g, &self.store, &pairs.batch)?;
        let fps = g.constant(fingerprint_tensor(&pairs.drugs));
        let drugs = self.drug.forward(g, &self.store, fps)?;
        let drugs = g.gather(drugs, &pairs.drug_rows)?;
        Ok(g.concat(&[patients, drugs])?)
    }

    fn eval_pairs(&self, items: &[(&MutationProfile, &Fingerprint)]) -> Result<(Graph<T>, Var), ModelError> {
        if items.iter().any(|(p, _)| p.is_empty()) {
            return Err(ModelError::NoUsableMutations);
        }
        let samples = items
            .iter()
            .map(|(p, _)| self.tokenize(p))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&TokenizedSample> = samples.iter().collect();
        let fps: Vec<&Fingerprint> = items.iter().map(|(_, f)| *f).collect();
        let pairs = PairBatch::new(&refs, &fps)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let features = self.features(&mut g, &pairs)?;
        Ok((g, features))
    }

    /// Good-response probabilities for `(profile, drug)` pairs.
    pub fn predict_recist(&self, items: &[(&MutationProfile, &Fingerprint)]) -> Result<Vec<f64>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let (mut g, features) = self.eval_pairs(items)?;
        let p = self.heads.predict_recist(&mut g, &self.store, features)?;
        Ok(g.value(p).to_f64_vec())
    }

    pub fn predict_audrc(&self, items: &[(&MutationProfile, &Fingerprint)]) -> Result<Vec<f64>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let (mut g, features) = self.eval_pairs(items)?;
        let p = self.heads.predict_audrc(&mut g, &self.store, features)?;
        Ok(g.value(p).to_f64_vec())
    }

    /// Interval logits, one row per pair.
    pub fn survival_logits(&self, items: &[(&MutationProfile, &Fingerprint)]) -> Result<Vec<Vec<f64>>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let (mut g, features) = self.eval_pairs(items)?;
        let logits = self.heads.mtlr_logits(&mut g, &self.store, features)?;
        let k = self.config.intervals;
        Ok(g.value(logits).to_f64_vec().chunks(k).map(|c| c.to_vec()).collect())
    }

    /// `1 − F(τ_mid)` per pair.
    pub fn risk_scores(&self, items: &[(&MutationProfile, &Fingerprint)]) -> Result<Vec<f64>, ModelError> {
        let grid = self.grid.as_ref().ok_or(ModelError::NoGrid)?;
        Ok(self
            .survival_logits(items)?
            .iter()
            .map(|phi| risk_score(phi, grid))
            .collect())
    }

    /// Scores one profile against many drugs, encoding the profile once.
    pub fn score_drugs(&self, profile: &MutationProfile, drugs: &[&Fingerprint]) -> Result<Vec<f64>, ModelError> {
        if profile.is_empty() {
            return Err(ModelError::NoUsableMutations);
        }
        if drugs.is_empty() {
            return Ok(Vec::new());
        }
        let sample = self.tokenize(profile)?;
        let batch = collate(&[&sample], 0)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let patient = self.encoder.encode(&mut g, &self.store, &batch)?;
        let patient = g.gather(patient, &vec![0; drugs.len()])?;
        let fps = g.constant(fingerprint_tensor(drugs));
        let drug = self.drug.forward(&mut g, &self.store, fps)?;
        let features = g.concat(&[patient, drug])?;
        let p = self.heads.predict_recist(&mut g, &self.store, features)?;
        Ok(g.value(p).to_f64_vec())
    }

    /// Same architecture and vocabularies with a different element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for (_, name, t) in self.store.iter() {
            store.register(name, t.cast::<U>());
        }
        Model {
            config: self.config.clone(),
            gene_vocab: self.gene_vocab.clone(),
            mutation_vocab: self.mutation_vocab.clone(),
            grid: self.grid.clone(),
            store,
            encoder: self.encoder.clone(),
            drug: self.drug.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Overwrites every parameter with `value`.
    pub fn fill_params(&mut self, value: f64) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let t = self.store.get_mut(id);
            let v = T::from_f64_lossy(value);
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    /// Replaces a named parameter, checking its shape.
    pub fn set_param(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), ModelError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| ModelError::Invalid(format!("unknown parameter {name}")))?;
        if self.store.get(id).shape() != tensor.shape() {
            return Err(ModelError::Invalid(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.store.get(id).shape(),
                tensor.shape()
            )));
        }
        *self.store.get_mut(id) = tensor;
        Ok(())
    }
}
