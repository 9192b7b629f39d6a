//! Two-stage training.
//!
//! Stage 1 fits the encoder, drug embedder and MTLR head on survival data.
//! Stage 2 starts from that checkpoint (or from scratch when pretraining is
//! ablated) and minimizes `w_S·ℒ_S + w_R·ℒ_R + w_C·ℒ_C`. Each optimizer step
//! draws one batch from every active dataset; the number of steps per epoch
//! is the largest batch count, and smaller datasets cycle.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{model_hash, Checkpoint, TrainingMetadata};
use crate::dataio::{CellLineRecord, DrugCatalog, Fingerprint, RecistRecord, Record, SurvivalRecord};
use crate::heads::{focal_loss_graph, mse_loss_graph, FocalParams, HeadError};
use crate::metrics::{auprc, auroc, concordance_index, MetricError};
use crate::model::{Model, ModelConfig, ModelError, PairBatch};
use crate::survival::{discretize, encode_target, mtlr_loss_graph, IntervalGrid, SurvivalError, SurvivalTarget};
use crate::tensor::{Graph, Mode, Optimizer, OptimizerKind, TensorError, Var};
use crate::tokenizer::{GeneVocab, MutationVocab, TokenizedSample};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no {0} records to train on")]
    EmptyData(&'static str),
    #[error("every survival record is censored; the interval grid is undefined")]
    AllCensored,
    #[error("record references unknown drug id {0:?}")]
    UnknownDrug(String),
    #[error("pretraining is enabled but no pretrained checkpoint was supplied")]
    MissingPretrained,
    #[error("pretrained checkpoint does not match this configuration: {0}")]
    DimensionMismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which stage-2 components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub pretrain: bool,
    pub cellline: bool,
    pub survival: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            pretrain: true,
            cellline: true,
            survival: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub survival: f64,
    pub recist: f64,
    pub cellline: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            survival: 1.0,
            recist: 1.0,
            cellline: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub focal: FocalParams,
    pub ablations: Ablations,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Stop as soon as the validation metric reaches this value.
    pub target_metric: Option<f64>,
    /// Keep every `encoder.*` parameter fixed.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
            ablations: Ablations::default(),
            patience: None,
            target_metric: None,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    /// Rejects unusable values and returns warnings for values outside the
    /// recommended ranges (lr 1e-4..0.05, 100..500 epochs, batch 128/256/512).
    pub fn check(&self) -> Result<Vec<String>, TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        self.focal.validate()?;
        let mut warnings = Vec::new();
        if !(1e-4..=0.05).contains(&self.lr) {
            warnings.push(format!(
                "lr {} is outside the recommended range [0.0001, 0.05]",
                self.lr
            ));
        }
        if !(100..=500).contains(&self.epochs) {
            warnings.push(format!(
                "epochs {} is outside the recommended range [100, 500]",
                self.epochs
            ));
        }
        if ![128, 256, 512].contains(&self.batch_size) {
            warnings.push(format!("batch size {} is not one of 128, 256, 512", self.batch_size));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(warnings)
    }
}

/// Vocabularies and drug catalog shared by both stages.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub gene_vocab: &'a GeneVocab,
    pub mutation_vocab: &'a MutationVocab,
    pub catalog: &'a DrugCatalog,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    /// Mean loss per active component plus `total`. Epoch 0 holds the
    /// inference-mode loss of the initial parameters.
    pub loss: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub val: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        writeln!(f, "{}", serde_json::to_string(entry)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(TrainError::from))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TaskKind {
    Survival,
    Recist,
    Cellline,
}

impl TaskKind {
    fn name(self) -> &'static str {
        match self {
            TaskKind::Survival => "survival",
            TaskKind::Recist => "recist",
            TaskKind::Cellline => "cellline",
        }
    }
}

/// A tokenized dataset bound to one loss.
struct Task<'a> {
    kind: TaskKind,
    weight: f64,
    samples: Vec<TokenizedSample>,
    fps: Vec<&'a Fingerprint>,
    targets: Vec<SurvivalTarget>,
    labels: Vec<bool>,
    audrc: Vec<f64>,
}

fn prepare<'a, R: Record>(
    model: &Model<f32>,
    catalog: &'a DrugCatalog,
    records: &[&R],
) -> Result<(Vec<TokenizedSample>, Vec<&'a Fingerprint>), TrainError> {
    let mut samples = Vec::with_capacity(records.len());
    let mut fps = Vec::with_capacity(records.len());
    for r in records {
        samples.push(model.tokenize(r.profile())?);
        let drug = catalog
            .get(r.drug_id())
            .ok_or_else(|| TrainError::UnknownDrug(r.drug_id().to_string()))?;
        fps.push(&drug.fingerprint);
    }
    Ok((samples, fps))
}

impl<'a> Task<'a> {
    fn survival(
        model: &Model<f32>,
        catalog: &'a DrugCatalog,
        records: &[&SurvivalRecord],
        grid: &IntervalGrid,
        weight: f64,
    ) -> Result<Self, TrainError> {
        let (samples, fps) = prepare(model, catalog, records)?;
        let targets = records
            .iter()
            .map(|r| encode_target(r.pfs_days, r.event_observed, grid))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            kind: TaskKind::Survival,
            weight,
            samples,
            fps,
            targets,
            labels: Vec::new(),
            audrc: Vec::new(),
        })
    }

    fn recist(
        model: &Model<f32>,
        catalog: &'a DrugCatalog,
        records: &[RecistRecord],
        weight: f64,
    ) -> Result<Self, TrainError> {
        let refs: Vec<&RecistRecord> = records.iter().collect();
        let (samples, fps) = prepare(model, catalog, &refs)?;
        Ok(Self {
            kind: TaskKind::Recist,
            weight,
            samples,
            fps,
            targets: Vec::new(),
            labels: records.iter().map(|r| r.label).collect(),
            audrc: Vec::new(),
        })
    }

    fn cellline(
        model: &Model<f32>,
        catalog: &'a DrugCatalog,
        records: &[CellLineRecord],
        weight: f64,
    ) -> Result<Self, TrainError> {
        let refs: Vec<&CellLineRecord> = records.iter().collect();
        let (samples, fps) = prepare(model, catalog, &refs)?;
        Ok(Self {
            kind: TaskKind::Cellline,
            weight,
            samples,
            fps,
            targets: Vec::new(),
            labels: Vec::new(),
            audrc: records.iter().map(|r| r.audrc).collect(),
        })
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn loss(
        &self,
        model: &Model<f32>,
        g: &mut Graph<f32>,
        idx: &[usize],
        focal: FocalParams,
    ) -> Result<Var, TrainError> {
        let samples: Vec<&TokenizedSample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let fps: Vec<&Fingerprint> = idx.iter().map(|&i| self.fps[i]).collect();
        let pairs = PairBatch::new(&samples, &fps)?;
        let features = model.features(g, &pairs)?;
        Ok(match self.kind {
            TaskKind::Survival => {
                let logits = model.heads.mtlr_logits(g, &model.store, features)?;
                let targets: Vec<SurvivalTarget> = idx.iter().map(|&i| self.targets[i].clone()).collect();
                mtlr_loss_graph(g, logits, &targets)?
            }
            TaskKind::Recist => {
                let p = model.heads.predict_recist(g, &model.store, features)?;
                let labels: Vec<bool> = idx.iter().map(|&i| self.labels[i]).collect();
                focal_loss_graph(g, p, &labels, focal)?
            }
            TaskKind::Cellline => {
                let r = model.heads.predict_audrc(g, &model.store, features)?;
                let t: Vec<f64> = idx.iter().map(|&i| self.audrc[i]).collect();
                mse_loss_graph(g, r, &t)?
            }
        })
    }

    /// Inference-mode mean loss over the whole dataset.
    fn eval_loss(&self, model: &Model<f32>, focal: FocalParams) -> Result<f64, TrainError> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut total = 0.0;
        for chunk in all.chunks(EVAL_CHUNK) {
            let mut g = Graph::new(Mode::Eval, 0);
            let l = self.loss(model, &mut g, chunk, focal)?;
            total += g.value(l).item() as f64 * chunk.len() as f64;
        }
        Ok(total / self.len() as f64)
    }
}

/// Validation signal used for model selection.
enum Validation<'a> {
    None,
    Survival(&'a [SurvivalRecord]),
    Recist(&'a [RecistRecord]),
}

fn fingerprints<'a, R: Record>(catalog: &'a DrugCatalog, records: &[R]) -> Result<Vec<&'a Fingerprint>, TrainError> {
    records
        .iter()
        .map(|r| {
            catalog
                .get(r.drug_id())
                .map(|d| &d.fingerprint)
                .ok_or_else(|| TrainError::UnknownDrug(r.drug_id().to_string()))
        })
        .collect()
}

/// Concordance of `1 − F(τ_mid)` risks with observed times.
pub fn evaluate_survival(
    model: &Model<f32>,
    catalog: &DrugCatalog,
    records: &[SurvivalRecord],
) -> Result<f64, TrainError> {
    let risks = predict_records(catalog, records, |items| Ok(model.risk_scores(items)?))?;
    let times: Vec<f64> = records.iter().map(|r| r.pfs_days).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event_observed).collect();
    Ok(concordance_index(&times, &events, &risks)?)
}

/// Good-response probabilities for RECIST records, in input order.
pub fn predict_recist_records(
    model: &Model<f32>,
    catalog: &DrugCatalog,
    records: &[RecistRecord],
) -> Result<Vec<f64>, TrainError> {
    predict_records(catalog, records, |items| Ok(model.predict_recist(items)?))
}

pub fn predict_cellline_records(
    model: &Model<f32>,
    catalog: &DrugCatalog,
    records: &[CellLineRecord],
) -> Result<Vec<f64>, TrainError> {
    predict_records(catalog, records, |items| Ok(model.predict_audrc(items)?))
}

pub fn predict_survival_risks(
    model: &Model<f32>,
    catalog: &DrugCatalog,
    records: &[SurvivalRecord],
) -> Result<Vec<f64>, TrainError> {
    predict_records(catalog, records, |items| Ok(model.risk_scores(items)?))
}

fn predict_records<R: Record>(
    catalog: &DrugCatalog,
    records: &[R],
    mut f: impl FnMut(&[(&crate::tokenizer::MutationProfile, &Fingerprint)]) -> Result<Vec<f64>, TrainError>,
) -> Result<Vec<f64>, TrainError> {
    let fps = fingerprints(catalog, records)?;
    let mut out = Vec::with_capacity(records.len());
    let items: Vec<_> = records.iter().zip(fps).map(|(r, fp)| (r.profile(), fp)).collect();
    for chunk in items.chunks(EVAL_CHUNK) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

/// AUROC and AUPRC of RECIST predictions.
pub fn evaluate_recist(
    model: &Model<f32>,
    catalog: &DrugCatalog,
    records: &[RecistRecord],
) -> Result<(f64, f64), TrainError> {
    let scores = predict_recist_records(model, catalog, records)?;
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    Ok((auroc(&labels, &scores)?, auprc(&labels, &scores)?))
}

fn validate(
    model: &Model<f32>,
    catalog: &DrugCatalog,
    v: &Validation<'_>,
) -> Result<BTreeMap<String, f64>, TrainError> {
    let mut out = BTreeMap::new();
    match v {
        Validation::None => {}
        Validation::Survival(records) => {
            out.insert("ci".to_string(), evaluate_survival(model, catalog, records)?);
        }
        Validation::Recist(records) => {
            let (a, p) = evaluate_recist(model, catalog, records)?;
            out.insert("auroc".to_string(), a);
            out.insert("auprc".to_string(), p);
        }
    }
    Ok(out)
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.min(n).max(1)).map(|c| c.to_vec()).collect()
}

fn run(
    stage: &str,
    cfg: &TrainConfig,
    mut model: Model<f32>,
    tasks: &[Task<'_>],
    catalog: &DrugCatalog,
    validation: Validation<'_>,
) -> Result<TrainOutcome, TrainError> {
    let metric_name = match validation {
        Validation::None => None,
        Validation::Survival(_) => Some("ci"),
        Validation::Recist(_) => Some("auroc"),
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &model.store);
    let frozen: Vec<bool> = model
        .store
        .iter()
        .map(|(_, name, _)| cfg.freeze_encoder && name.starts_with("encoder."))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_0000_0001);
    let mut log = Vec::with_capacity(cfg.epochs + 1);

    let start = Instant::now();
    let mut initial = BTreeMap::new();
    let mut total = 0.0;
    for t in tasks {
        let l = t.eval_loss(&model, cfg.focal)?;
        initial.insert(t.kind.name().to_string(), l);
        total += t.weight * l;
    }
    initial.insert("total".to_string(), total);
    let val = validate(&model, catalog, &validation)?;
    let mut best_metric = metric_name.and_then(|m| val.get(m).copied());
    let mut best_epoch = 0;
    let mut best_store = model.store.clone();
    log.push(EpochLog {
        stage: stage.to_string(),
        epoch: 0,
        loss: initial,
        val,
        seconds: start.elapsed().as_secs_f64(),
    });

    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let plans: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .map(|t| batches(t.len(), cfg.batch_size, &mut rng))
            .collect();
        let steps = plans.iter().map(|p| p.len()).max().unwrap_or(0);
        let mut sums = vec![0.0; tasks.len()];
        let mut total_sum = 0.0;
        for s in 0..steps {
            step += 1;
            let mut g = Graph::new(
                Mode::Train,
                cfg.seed.wrapping_add(step.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            );
            let mut weighted = Vec::with_capacity(tasks.len());
            for (ti, task) in tasks.iter().enumerate() {
                let plan = &plans[ti];
                let l = task.loss(&model, &mut g, &plan[s % plan.len()], cfg.focal)?;
                sums[ti] += g.value(l).item() as f64;
                weighted.push(g.scale(l, task.weight as f32));
            }
            let mut loss = weighted[0];
            for &w in &weighted[1..] {
                loss = g.add(loss, w)?;
            }
            total_sum += g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            drop(g);
            optimizer.step(&mut model.store, &grads, |id| !frozen[id.index()])?;
        }
        let mut losses = BTreeMap::new();
        for (t, s) in tasks.iter().zip(&sums) {
            losses.insert(t.kind.name().to_string(), s / steps as f64);
        }
        losses.insert("total".to_string(), total_sum / steps as f64);
        let val = validate(&model, catalog, &validation)?;
        let current = metric_name.and_then(|m| val.get(m).copied());
        log::info!(
            "{stage} epoch {epoch}: loss {:.5} val {:?}",
            total_sum / steps as f64,
            val
        );
        log.push(EpochLog {
            stage: stage.to_string(),
            epoch,
            loss: losses,
            val,
            seconds: start.elapsed().as_secs_f64(),
        });
        if !total_sum.is_finite() {
            return Err(TrainError::Config(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        match (current, best_metric) {
            (Some(c), Some(b)) if c <= b => {}
            (Some(c), _) => {
                best_metric = Some(c);
                best_epoch = epoch;
                best_store = model.store.clone();
            }
            (None, _) => best_epoch = epoch,
        }
        if let (Some(target), Some(c)) = (cfg.target_metric, current) {
            if c >= target {
                break;
            }
        }
        if let Some(p) = cfg.patience {
            if metric_name.is_some() && epoch - best_epoch >= p {
                break;
            }
        }
    }
    if metric_name.is_some() {
        model.store = best_store;
    }

    let last = log.last().expect("epoch 0 is always logged");
    let metadata = TrainingMetadata {
        stage: stage.to_string(),
        seed: cfg.seed,
        epochs: last.epoch,
        losses: last.loss.clone(),
        extra: BTreeMap::from([
            ("best_epoch".to_string(), serde_json::json!(best_epoch)),
            ("best_metric".to_string(), serde_json::json!(best_metric)),
            ("train_config".to_string(), serde_json::to_value(cfg)?),
        ]),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, metadata },
        log,
        best_epoch,
        best_metric,
    })
}

/// Stage 1: survival pretraining over one or more survival cohorts.
pub fn pretrain_survival(
    cfg: &TrainConfig,
    res: Resources<'_>,
    train: &[&[SurvivalRecord]],
    val: Option<&[SurvivalRecord]>,
) -> Result<TrainOutcome, TrainError> {
    cfg.check()?;
    let records: Vec<&SurvivalRecord> = train.iter().flat_map(|d| d.iter()).collect();
    if records.is_empty() {
        return Err(TrainError::EmptyData("survival"));
    }
    let events: Vec<f64> = records
        .iter()
        .filter(|r| r.event_observed)
        .map(|r| r.pfs_days)
        .collect();
    if events.is_empty() {
        return Err(TrainError::AllCensored);
    }
    let grid = discretize(&events, cfg.model.intervals)?;
    let model = Model::new(
        cfg.model.clone(),
        res.gene_vocab.clone(),
        res.mutation_vocab.clone(),
        Some(grid.clone()),
        cfg.seed,
    )?;
    let task = Task::survival(&model, res.catalog, &records, &grid, 1.0)?;
    let validation = match val {
        Some(v) if !v.is_empty() => Validation::Survival(v),
        _ => Validation::None,
    };
    run("pretrain", cfg, model, &[task], res.catalog, validation)
}

/// Datasets for stage 2.
#[derive(Clone, Copy, Default)]
pub struct JointData<'a> {
    pub survival: &'a [SurvivalRecord],
    pub recist: &'a [RecistRecord],
    pub cellline: &'a [CellLineRecord],
    pub val_recist: Option<&'a [RecistRecord]>,
}

fn check_compatible(pre: &Model<f32>, cfg: &ModelConfig, res: &Resources<'_>) -> Result<(), TrainError> {
    if pre.config.encoder != cfg.encoder {
        return Err(TrainError::DimensionMismatch(format!(
            "encoder config {:?} vs {:?}",
            pre.config.encoder, cfg.encoder
        )));
    }
    if pre.config.intervals != cfg.intervals {
        return Err(TrainError::DimensionMismatch(format!(
            "{} survival intervals vs {}",
            pre.config.intervals, cfg.intervals
        )));
    }
    if &pre.gene_vocab != res.gene_vocab || &pre.mutation_vocab != res.mutation_vocab {
        return Err(TrainError::DimensionMismatch("vocabularies differ".into()));
    }
    Ok(())
}

/// Stage 2: joint RECIST / AUDRC / survival training.
pub fn train_joint(
    cfg: &TrainConfig,
    res: Resources<'_>,
    data: JointData<'_>,
    pretrained: Option<&Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    cfg.check()?;
    if data.recist.is_empty() {
        return Err(TrainError::EmptyData("RECIST"));
    }
    let ab = cfg.ablations;
    if ab.survival && data.survival.is_empty() {
        return Err(TrainError::EmptyData("survival"));
    }
    if ab.cellline && data.cellline.is_empty() {
        return Err(TrainError::EmptyData("cell-line"));
    }
    let model = if ab.pretrain {
        let pre = pretrained.ok_or(TrainError::MissingPretrained)?;
        check_compatible(&pre.model, &cfg.model, &res)?;
        pre.model.clone()
    } else {
        let grid = if ab.survival {
            let events: Vec<f64> = data
                .survival
                .iter()
                .filter(|r| r.event_observed)
                .map(|r| r.pfs_days)
                .collect();
            if events.is_empty() {
                return Err(TrainError::AllCensored);
            }
            Some(discretize(&events, cfg.model.intervals)?)
        } else {
            None
        };
        Model::new(
            cfg.model.clone(),
            res.gene_vocab.clone(),
            res.mutation_vocab.clone(),
            grid,
            cfg.seed,
        )?
    };

    let w = cfg.loss_weights;
    let mut tasks = Vec::with_capacity(3);
    if ab.survival {
        let grid = model.grid.clone().ok_or(ModelError::NoGrid)?;
        let refs: Vec<&SurvivalRecord> = data.survival.iter().collect();
        tasks.push(Task::survival(&model, res.catalog, &refs, &grid, w.survival)?);
    }
    tasks.push(Task::recist(&model, res.catalog, data.recist, w.recist)?);
    if ab.cellline {
        tasks.push(Task::cellline(&model, res.catalog, data.cellline, w.cellline)?);
    }
    let validation = match data.val_recist {
        Some(v) if !v.is_empty() => Validation::Recist(v),
        _ => Validation::None,
    };
    let mut out = run("joint", cfg, model, &tasks, res.catalog, validation)?;
    out.checkpoint
        .metadata
        .extra
        .insert("ablations".to_string(), serde_json::to_value(ab)?);
    if let (true, Some(pre)) = (ab.pretrain, pretrained) {
        out.checkpoint
            .metadata
            .extra
            .insert("pretrained_hash".to_string(), serde_json::json!(model_hash(&pre.model)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{generate_synthetic, SyntheticConfig};
    use crate::tokenizer::build_vocabularies;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    d: 8,
                    heads: 2,
                    ffn_dim: 16,
                    layers: 1,
                    ..Default::default()
                },
                intervals: 3,
                ..Default::default()
            },
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn pretrain_smoke_and_determinism() {
        let d = generate_synthetic(&SyntheticConfig {
            n_survival_crc: 40,
            n_survival_nsclc: 0,
            n_recist: 0,
            n_cellline: 0,
            panel_size: 6,
            n_drugs: 3,
            ..Default::default()
        })
        .unwrap();
        let (gv, mv) = build_vocabularies(&d.panel, &d.known_pairs).unwrap();
        let res = Resources {
            gene_vocab: &gv,
            mutation_vocab: &mv,
            catalog: &d.catalog,
        };
        let a = pretrain_survival(&tiny_cfg(), res, &[&d.survival_crc], None).unwrap();
        let b = pretrain_survival(&tiny_cfg(), res, &[&d.survival_crc], None).unwrap();
        assert!(a.log.last().unwrap().loss["total"].is_finite());
        assert_eq!(a.checkpoint.hash(), b.checkpoint.hash());
        assert_eq!(a.log.len(), 3);

        let mut censored = d.survival_crc.clone();
        censored.iter_mut().for_each(|r| r.event_observed = false);
        assert!(matches!(
            pretrain_survival(&tiny_cfg(), res, &[&censored], None),
            Err(TrainError::AllCensored)
        ));
    }
}
