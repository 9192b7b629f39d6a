//! Transformer-based drug response prediction with survival pretraining.
//!
//! The crate covers the whole pipeline: dual gene/mutation tokenization,
//! a transformer patient encoder with a fingerprint drug embedder, an MTLR
//! survival head, RECIST and AUDRC response heads trained jointly, metrics,
//! and a treatment-recommendation layer with an HTTP front end.

pub mod checkpoint;
pub mod dataio;
pub mod encoder;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod recommender;
pub mod service;
pub mod stats;
pub mod survival;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use tensor::{Element, Graph, Mode, Optimizer, OptimizerKind, ParamStore, Tensor, TensorError, Var};
