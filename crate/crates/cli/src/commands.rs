use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::ValueEnum;
use drp_core::checkpoint::{Checkpoint, CheckpointError};
use drp_core::dataio::{
    load_cellline, load_recist, load_survival, split, DataError, DrugCatalog, Record, Split, DEFAULT_RATIOS,
};
use drp_core::heads::mse_loss;
use drp_core::metrics::{auprc, auroc, concordance_index};
use drp_core::recommender::{DispersionOptions, EvidenceOptions, LinkTable, ReferenceCohort};
use drp_core::service::{self, parse_profile_input, ProfileFormat, RecommendResponse, Snapshot, StartupError};
use drp_core::synth::{files, generate_synthetic, SyntheticConfig};
use drp_core::tokenizer::{build_vocabularies, read_known_pairs, read_panel, GeneVocab, MutationVocab};
use drp_core::trainer::{
    self, pretrain_survival, train_joint, write_log, JointData, Resources, TrainConfig, TrainError, TrainOutcome,
};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{
    EvalArgs, EvalDataset, InspectArgs, PretrainArgs, RecommendArgs, ServeArgs, SplitName, SurvivalCohort, SynthArgs,
    TrainArgs, TrainCommon, EXIT_RUNTIME, EXIT_VALIDATION,
};

pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

pub type CmdResult = Result<(), Failure>;

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_VALIDATION,
            error: e.into(),
        })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        })
    }
}

fn train_failure(e: TrainError) -> Failure {
    let code = match e {
        TrainError::EmptyData(_)
        | TrainError::AllCensored
        | TrainError::UnknownDrug(_)
        | TrainError::MissingPretrained
        | TrainError::DimensionMismatch(_)
        | TrainError::Config(_)
        | TrainError::Head(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    };
    Failure { code, error: e.into() }
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    let code = match e {
        CheckpointError::Io(_) => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    };
    Failure { code, error: e.into() }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(checkpoint_failure).map_err(|f| Failure {
        code: f.code,
        error: f.error.context(format!("loading checkpoint {}", path.display())),
    })
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .invalid()?;
    toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .invalid()
}

fn write_manifest(m: &RunManifest, path: &Path) -> CmdResult {
    m.write(path).runtime()?;
    log::info!("wrote manifest {}", path.display());
    Ok(())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.signal {
        cfg.signal_strength = v;
    }
    if let Some(v) = a.panel_size {
        cfg.panel_size = v;
    }
    if let Some(v) = a.pairs_per_gene {
        cfg.pairs_per_gene = v;
    }
    if let Some(v) = a.drugs {
        cfg.n_drugs = v;
    }
    if let Some(v) = a.recist {
        cfg.n_recist = v;
    }
    if let Some(v) = a.cellline {
        cfg.n_cellline = v;
    }
    if let Some(v) = a.survival {
        cfg.n_survival_crc = v;
        cfg.n_survival_nsclc = v;
    }
    if let Some(v) = a.cohort_size {
        cfg.n_cohort = v;
    }
    let data = generate_synthetic(&cfg).invalid()?;
    data.write_dir(&a.out).runtime()?;
    let s = &data.summary;
    println!(
        "wrote {} RECIST, {}+{} survival, {} cell-line records and {} drugs to {}",
        data.recist.len(),
        data.survival_crc.len(),
        data.survival_nsclc.len(),
        data.cellline.len(),
        s.n_drugs,
        a.out.display()
    );
    let mut m = RunManifest::new("synth", Some(cfg.seed), serde_json::to_value(&cfg).runtime()?);
    if let Some(p) = &a.config {
        m.input(p).runtime()?;
    }
    for f in [
        files::PANEL,
        files::KNOWN_PAIRS,
        files::CATALOG,
        files::SURVIVAL_CRC,
        files::SURVIVAL_NSCLC,
        files::RECIST,
        files::CELLLINE,
        files::COHORT,
        files::SUMMARY,
    ] {
        m.output(&a.out.join(f)).runtime()?;
    }
    write_manifest(&m, &a.manifest.unwrap_or_else(|| a.out.join("run.json")))
}

struct DataDir {
    root: PathBuf,
    gene_vocab: GeneVocab,
    mutation_vocab: MutationVocab,
    catalog: DrugCatalog,
}

impl DataDir {
    fn open(root: &Path) -> Result<Self, Failure> {
        let panel = read_panel(&root.join(files::PANEL))
            .with_context(|| format!("reading panel in {}", root.display()))
            .invalid()?;
        let pairs = read_known_pairs(&root.join(files::KNOWN_PAIRS))
            .with_context(|| format!("reading known pairs in {}", root.display()))
            .invalid()?;
        let (gene_vocab, mutation_vocab) = build_vocabularies(&panel, &pairs).invalid()?;
        let catalog = DrugCatalog::load(&root.join(files::CATALOG))
            .with_context(|| format!("reading catalog in {}", root.display()))
            .invalid()?;
        Ok(Self {
            root: root.to_path_buf(),
            gene_vocab,
            mutation_vocab,
            catalog,
        })
    }

    fn resources(&self) -> Resources<'_> {
        Resources {
            gene_vocab: &self.gene_vocab,
            mutation_vocab: &self.mutation_vocab,
            catalog: &self.catalog,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn load<R>(&self, name: &str, f: fn(&Path, &DrugCatalog) -> Result<Vec<R>, DataError>) -> Result<Vec<R>, Failure> {
        let p = self.path(name);
        f(&p, &self.catalog)
            .with_context(|| format!("loading {}", p.display()))
            .invalid()
    }

    fn record_inputs(&self, m: &mut RunManifest, names: &[&str]) -> CmdResult {
        for n in [files::PANEL, files::KNOWN_PAIRS, files::CATALOG].iter().chain(names) {
            m.input(&self.path(n)).runtime()?;
        }
        Ok(())
    }
}

fn split_records<R: Record + Clone>(records: &[R], seed: u64) -> Result<Split<R>, Failure> {
    split(records, DEFAULT_RATIOS, seed).invalid()
}

fn train_config(c: &TrainCommon) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = match &c.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.lr {
        cfg.lr = v;
    }
    if let Some(v) = c.batch_size {
        cfg.batch_size = v;
    }
    if c.patience.is_some() {
        cfg.patience = c.patience;
    }
    if c.target_metric.is_some() {
        cfg.target_metric = c.target_metric;
    }
    let e = &mut cfg.model.encoder;
    if let Some(v) = c.dim {
        e.d = v;
    }
    if let Some(v) = c.heads {
        e.heads = v;
    }
    if let Some(v) = c.layers {
        e.layers = v;
    }
    if let Some(v) = c.ffn_dim {
        e.ffn_dim = v;
    }
    Ok(cfg)
}

fn finish_training(out: &TrainOutcome, common: &TrainCommon, mut m: RunManifest) -> CmdResult {
    out.checkpoint.save(&common.out).map_err(checkpoint_failure)?;
    let log_path = common.out.join("log.jsonl");
    write_log(&log_path, &out.log).map_err(train_failure)?;
    println!(
        "{} finished after {} epochs; best epoch {} ({}); checkpoint {} hash {}",
        out.checkpoint.metadata.stage,
        out.log.len().saturating_sub(1),
        out.best_epoch,
        out.best_metric
            .map_or("no validation".to_string(), |v| format!("{v:.4}")),
        common.out.display(),
        out.checkpoint.hash()
    );
    for f in [
        drp_core::checkpoint::MANIFEST_FILE,
        drp_core::checkpoint::WEIGHTS_FILE,
        "log.jsonl",
    ] {
        m.output(&common.out.join(f)).runtime()?;
    }
    write_manifest(
        &m,
        &common.manifest.clone().unwrap_or_else(|| common.out.join("run.json")),
    )
}

pub fn pretrain(a: PretrainArgs) -> CmdResult {
    let cfg = train_config(&a.common)?;
    let data = DataDir::open(&a.common.data)?;
    let names: &[&str] = match a.cohort {
        SurvivalCohort::Crc => &[files::SURVIVAL_CRC],
        SurvivalCohort::Nsclc => &[files::SURVIVAL_NSCLC],
        SurvivalCohort::Both => &[files::SURVIVAL_CRC, files::SURVIVAL_NSCLC],
    };
    let mut splits = Vec::new();
    for n in names {
        splits.push(split_records(&data.load(n, load_survival)?, a.common.split_seed)?);
    }
    let train: Vec<&[_]> = splits.iter().map(|s| s.train.as_slice()).collect();
    let val: Vec<_> = splits.iter().flat_map(|s| s.val.iter().cloned()).collect();
    let out = pretrain_survival(&cfg, data.resources(), &train, Some(&val)).map_err(train_failure)?;
    let mut m = RunManifest::new(
        "pretrain",
        Some(cfg.seed),
        json!({ "train": cfg, "cohort": format!("{:?}", a.cohort), "split_seed": a.common.split_seed }),
    );
    data.record_inputs(&mut m, names)?;
    if let Some(p) = &a.common.config {
        m.input(p).runtime()?;
    }
    finish_training(&out, &a.common, m)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = train_config(&a.common)?;
    cfg.ablations.pretrain = !a.no_pretrain;
    cfg.ablations.cellline = !a.no_cellline;
    cfg.ablations.survival = !a.no_survival;
    cfg.freeze_encoder |= a.freeze_encoder;
    let pretrained = match (&a.pretrained, a.no_pretrain) {
        (Some(p), false) => {
            let ck = load_checkpoint(p)?;
            if a.common.config.is_none() && a.common.dim.is_none() {
                cfg.model = ck.model.config.clone();
            }
            Some(ck)
        }
        (Some(_), true) => {
            log::warn!("--pretrained is ignored with --no-pretrain");
            None
        }
        (None, _) => None,
    };
    let data = DataDir::open(&a.common.data)?;
    let seed = a.common.split_seed;
    let recist = split_records(&data.load(files::RECIST, load_recist)?, seed)?;
    let survival = if cfg.ablations.survival {
        split_records(&data.load(files::SURVIVAL_NSCLC, load_survival)?, seed)?.train
    } else {
        Vec::new()
    };
    let cellline = if cfg.ablations.cellline {
        split_records(&data.load(files::CELLLINE, load_cellline)?, seed)?.train
    } else {
        Vec::new()
    };
    let joint = JointData {
        survival: &survival,
        recist: &recist.train,
        cellline: &cellline,
        val_recist: Some(&recist.val),
    };
    let out = train_joint(&cfg, data.resources(), joint, pretrained.as_ref()).map_err(train_failure)?;
    let mut m = RunManifest::new("train", Some(cfg.seed), json!({ "train": cfg, "split_seed": seed }));
    let mut names = vec![files::RECIST];
    if cfg.ablations.survival {
        names.push(files::SURVIVAL_NSCLC);
    }
    if cfg.ablations.cellline {
        names.push(files::CELLLINE);
    }
    data.record_inputs(&mut m, &names)?;
    if let (Some(p), Some(_)) = (&a.pretrained, &pretrained) {
        m.input(&p.join(drp_core::checkpoint::MANIFEST_FILE)).runtime()?;
        m.input(&p.join(drp_core::checkpoint::WEIGHTS_FILE)).runtime()?;
    }
    if let Some(p) = &a.common.config {
        m.input(p).runtime()?;
    }
    finish_training(&out, &a.common, m)
}

fn pick<R: Clone>(s: Split<R>, which: SplitName) -> Vec<R> {
    match which {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
        SplitName::All => s.train.into_iter().chain(s.val).chain(s.test).collect(),
    }
}

fn value_name<V: ValueEnum>(v: V) -> String {
    v.to_possible_value()
        .map(|p| p.get_name().to_string())
        .unwrap_or_default()
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = DataDir::open(&a.data)?;
    let model = &ck.model;
    let (file, metrics): (&str, Vec<(&str, f64)>) = match a.dataset {
        EvalDataset::Recist => {
            let recs = pick(
                split_records(&data.load(files::RECIST, load_recist)?, a.split_seed)?,
                a.split,
            );
            let p = trainer::predict_recist_records(model, &data.catalog, &recs).map_err(train_failure)?;
            let y: Vec<bool> = recs.iter().map(|r| r.label).collect();
            let roc = auroc(&y, &p).invalid()?;
            let pr = auprc(&y, &p).invalid()?;
            (
                files::RECIST,
                vec![("n", recs.len() as f64), ("auroc", roc), ("auprc", pr)],
            )
        }
        EvalDataset::SurvivalCrc | EvalDataset::SurvivalNsclc => {
            let f = if a.dataset == EvalDataset::SurvivalCrc {
                files::SURVIVAL_CRC
            } else {
                files::SURVIVAL_NSCLC
            };
            let recs = pick(split_records(&data.load(f, load_survival)?, a.split_seed)?, a.split);
            let risk = trainer::predict_survival_risks(model, &data.catalog, &recs).map_err(train_failure)?;
            let t: Vec<f64> = recs.iter().map(|r| r.pfs_days).collect();
            let e: Vec<bool> = recs.iter().map(|r| r.event_observed).collect();
            let ci = concordance_index(&t, &e, &risk).invalid()?;
            (f, vec![("n", recs.len() as f64), ("ci", ci)])
        }
        EvalDataset::Cellline => {
            let recs = pick(
                split_records(&data.load(files::CELLLINE, load_cellline)?, a.split_seed)?,
                a.split,
            );
            let p = trainer::predict_cellline_records(model, &data.catalog, &recs).map_err(train_failure)?;
            let t: Vec<f64> = recs.iter().map(|r| r.audrc).collect();
            (
                files::CELLLINE,
                vec![("n", recs.len() as f64), ("mse", mse_loss(&p, &t).invalid()?)],
            )
        }
    };
    let dataset = value_name(a.dataset);
    let split = value_name(a.split);
    if a.json {
        let mut obj = serde_json::Map::new();
        obj.insert("dataset".into(), json!(dataset));
        obj.insert("split".into(), json!(split));
        obj.insert("checkpoint_hash".into(), json!(ck.hash()));
        for (k, v) in &metrics {
            obj.insert(k.to_string(), if *k == "n" { json!(*v as usize) } else { json!(v) });
        }
        println!("{}", serde_json::Value::Object(obj));
    } else {
        println!("{:<16} {:<6} {:<8} {:>10}", "dataset", "split", "metric", "value");
        for (k, v) in &metrics {
            let shown = if *k == "n" {
                format!("{}", *v as usize)
            } else {
                format!("{v:.6}")
            };
            println!("{dataset:<16} {split:<6} {k:<8} {shown:>10}");
        }
    }
    let mut m = RunManifest::new(
        "eval",
        None,
        json!({ "dataset": dataset, "split": split, "split_seed": a.split_seed, "checkpoint_hash": ck.hash() }),
    );
    data.record_inputs(&mut m, &[file])?;
    m.input(&a.checkpoint.join(drp_core::checkpoint::WEIGHTS_FILE))
        .runtime()?;
    write_manifest(
        &m,
        &a.manifest.unwrap_or_else(|| PathBuf::from("drp-eval.manifest.json")),
    )
}

fn api_failure(e: service::ApiError) -> Failure {
    let code = if e.status.is_client_error() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    };
    let field = e.field.map(|f| format!(" ({f})")).unwrap_or_default();
    Failure {
        code,
        error: anyhow!("{}{field}", e.message),
    }
}

fn print_recommendations(r: &RecommendResponse) {
    println!(
        "{:>4}  {:<8} {:<20} {:>8} {:>8}  flags",
        "rank", "drug", "name", "score", "z"
    );
    for rec in &r.evidence.recommendations {
        let z = rec.z.map_or("-".to_string(), |z| format!("{z:.2}"));
        let mut flags = Vec::new();
        if rec.flags.degenerate_iqr {
            flags.push("degenerate-iqr");
        }
        if rec.flags.low_patient_dispersion {
            flags.push("low-dispersion");
        }
        println!(
            "{:>4}  {:<8} {:<20} {:>8.4} {:>8}  {}",
            rec.rank,
            rec.drug_id,
            rec.drug_name,
            rec.score,
            z,
            flags.join(",")
        );
    }
    if let Some(d) = &r.evidence.dispersion {
        println!(
            "patient score IQR across {} drugs: {:.4} (threshold {}){}",
            d.drugs.len(),
            d.iqr,
            d.threshold,
            if d.low_confidence { " low confidence" } else { "" }
        );
    }
    for f in &r.evidence.flags {
        println!("note: {f}");
    }
    if !r.unknown_genes.is_empty() {
        println!("genes outside the panel: {}", r.unknown_genes.join(", "));
    }
}

pub fn recommend(a: RecommendArgs) -> CmdResult {
    if a.top_k == 0 || a.top_k > drp_core::recommender::DEFAULT_TOP_K {
        return Err(anyhow::anyhow!(
            "--top-k must lie in 1..={}",
            drp_core::recommender::DEFAULT_TOP_K
        ))
        .invalid();
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let catalog = DrugCatalog::load(&a.catalog)
        .with_context(|| format!("loading catalog {}", a.catalog.display()))
        .invalid()?;
    let doc = std::fs::read_to_string(&a.profile)
        .with_context(|| format!("reading profile {}", a.profile.display()))
        .invalid()?;
    let mut input = parse_profile_input(&doc, ProfileFormat::from_path(&a.profile))
        .with_context(|| format!("parsing profile {}", a.profile.display()))
        .invalid()?;
    if a.cancer_type.is_some() {
        input.cancer_type = a.cancer_type.clone();
    }
    let mut cohorts = Vec::new();
    if let Some(p) = &a.cohort {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("cohort").to_string();
        let cancer = input.cancer_type.clone().unwrap_or_else(|| id.clone());
        cohorts.push(ReferenceCohort::load(p, id.clone(), cancer).invalid()?);
        input.cohort = Some(id);
    }
    let options = EvidenceOptions {
        top_k: a.top_k,
        dispersion: DispersionOptions {
            iqr_threshold: a.dispersion_threshold,
            ..Default::default()
        },
    };
    let snap = Snapshot::new(ck, catalog, cohorts, LinkTable::bundled(), options).map_err(|e| match e {
        StartupError::Recommend(_) | StartupError::Data(_) => Failure {
            code: EXIT_VALIDATION,
            error: e.into(),
        },
        other => Failure {
            code: EXIT_RUNTIME,
            error: other.into(),
        },
    })?;
    let response = snap.recommend(&input).map_err(api_failure)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&response).runtime()?);
    } else {
        print_recommendations(&response);
    }
    let mut m = RunManifest::new(
        "recommend",
        None,
        json!({ "top_k": a.top_k, "dispersion_threshold": a.dispersion_threshold, "cancer_type": input.cancer_type, "checkpoint_hash": snap.hash }),
    );
    m.input(&a.profile).runtime()?;
    m.input(&a.catalog).runtime()?;
    m.input(&a.checkpoint.join(drp_core::checkpoint::WEIGHTS_FILE))
        .runtime()?;
    if let Some(p) = &a.cohort {
        m.input(p).runtime()?;
    }
    if let Some(p) = &a.plot_data {
        std::fs::write(p, serde_json::to_string_pretty(&response).runtime()? + "\n")
            .with_context(|| format!("writing {}", p.display()))
            .runtime()?;
        m.output(p).runtime()?;
    }
    write_manifest(
        &m,
        &a.manifest
            .unwrap_or_else(|| PathBuf::from("drp-recommend.manifest.json")),
    )
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let mut cfg = service::load_config(&a.config).invalid()?;
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if std::env::var_os("RUST_LOG").is_none() {
        log::set_max_level(cfg.log_level.parse().unwrap_or(log::LevelFilter::Info));
    }
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::new("serve", None, serde_json::to_value(&cfg).runtime()?);
        m.input(&a.config).runtime()?;
        m.input(&cfg.catalog).runtime()?;
        m.input(&cfg.panel).runtime()?;
        m.input(&cfg.checkpoint.join(drp_core::checkpoint::WEIGHTS_FILE))
            .runtime()?;
        for p in cfg.cohorts.values() {
            m.input(p).runtime()?;
        }
        write_manifest(&m, path)?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .runtime()?;
    rt.block_on(service::serve(cfg)).map_err(|e| match e {
        StartupError::Bind { .. } | StartupError::Io(_) => Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        },
        other => Failure {
            code: EXIT_VALIDATION,
            error: other.into(),
        },
    })
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = &ck.model;
    let hash = ck.hash();
    let params = model.store.num_scalars();
    if a.json {
        let v = json!({
            "hash": hash,
            "format_version": drp_core::checkpoint::FORMAT_VERSION,
            "config": model.config,
            "grid": model.grid,
            "metadata": ck.metadata,
            "arrays": model.store.len(),
            "parameters": params,
            "genes": model.gene_vocab.genes().len(),
            "known_pairs": model.mutation_vocab.num_pairs(),
        });
        println!("{}", serde_json::to_string_pretty(&v).runtime()?);
        return Ok(());
    }
    let e = &model.config.encoder;
    println!("checkpoint  {}", a.checkpoint.display());
    println!("hash        {hash}");
    println!(
        "stage       {} (seed {}, {} epochs)",
        ck.metadata.stage, ck.metadata.seed, ck.metadata.epochs
    );
    println!(
        "encoder     d={} heads={} layers={} ffn={} dropout={} pooling={:?} positional={}",
        e.d, e.heads, e.layers, e.ffn_dim, e.dropout, e.pooling, e.positional
    );
    println!(
        "vocabulary  {} gene tokens, {} known pairs",
        model.gene_vocab.len(),
        model.mutation_vocab.num_pairs()
    );
    match &model.grid {
        Some(g) => println!("intervals   {} boundaries {:?}", g.k(), g.boundaries()),
        None => println!("intervals   none"),
    }
    println!(
        "parameters  {params} in {} arrays (checksums verified)",
        model.store.len()
    );
    for (k, v) in &ck.metadata.losses {
        println!("loss        {k} = {v:.6}");
    }
    for (k, v) in &ck.metadata.extra {
        println!("extra       {k} = {v}");
    }
    Ok(())
}
