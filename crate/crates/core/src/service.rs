//! HTTP front end for recommendations.
//!
//! Requests are validated, tokenized and scored against an immutable
//! [`Snapshot`] of checkpoint, catalog and reference cohorts. Handlers share
//! the snapshot behind an `Arc`; [`Service::swap`] replaces it atomically.
//!
//! | method | path                | body                          |
//! |--------|---------------------|-------------------------------|
//! | POST   | `/api/v1/recommend` | profile JSON or TSV           |
//! | GET    | `/api/v1/drugs`     |                               |
//! | GET    | `/api/v1/health`    |                               |
//! | GET    | `/api/v1/model`     |                               |
//!
//! Environment overrides: `DRP_LISTEN`, `DRP_PORT`, `DRP_CHECKPOINT`,
//! `DRP_CATALOG`, `DRP_PANEL`, `DRP_LINKS`, `DRP_MAX_BODY_BYTES`,
//! `DRP_MAX_MUTATIONS`, `DRP_LOG_LEVEL`, `DRP_TOP_K`,
//! `DRP_DISPERSION_THRESHOLD` and `DRP_COHORT_<CANCER_TYPE>=<path>`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, TrainingMetadata, FORMAT_VERSION, MANIFEST_FILE};
use crate::dataio::{DataError, DrugCatalog};
use crate::model::{Model, ModelError};
use crate::recommender::{
    assemble_evidence, score_catalog, DispersionOptions, Evidence, EvidenceOptions, LinkTable, RecommendError,
    ReferenceCohort,
};
use crate::tokenizer::{
    parse_annotation_bits, read_panel, validate_annotation, MutationEntry, MutationProfile, TokenizerError,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const REQUEST_ID_HEADER: &str = "x-request-id";
const ENV_PREFIX: &str = "DRP_";
const LOG_LEVELS: [&str; 5] = ["error", "warn", "info", "debug", "trace"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
    #[error("{what} not found at {path}")]
    Missing { what: String, path: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub port: u16,
    /// Checkpoint directory.
    pub checkpoint: PathBuf,
    pub catalog: PathBuf,
    pub panel: PathBuf,
    /// Reference cohort profile files keyed by cancer type.
    pub cohorts: BTreeMap<String, PathBuf>,
    /// Link table replacing the bundled one.
    pub links: Option<PathBuf>,
    pub max_body_bytes: usize,
    pub max_mutations: usize,
    pub log_level: String,
    pub top_k: usize,
    pub dispersion_threshold: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1".into(),
            port: 8080,
            checkpoint: PathBuf::new(),
            catalog: PathBuf::new(),
            panel: PathBuf::new(),
            cohorts: BTreeMap::new(),
            links: None,
            max_body_bytes: 1 << 20,
            max_mutations: 2000,
            log_level: "info".into(),
            top_k: crate::recommender::DEFAULT_TOP_K,
            dispersion_threshold: crate::recommender::DEFAULT_DISPERSION_THRESHOLD,
        }
    }
}

fn env_parse<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Env {
        var: var.to_string(),
        message: e.to_string(),
    })
}

impl ServiceConfig {
    /// Applies `DRP_*` overrides from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let (var, value) = (k.as_ref(), v.as_ref());
            let Some(key) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            match key {
                "LISTEN" => self.listen = value.to_string(),
                "PORT" => self.port = env_parse(var, value)?,
                "CHECKPOINT" => self.checkpoint = value.into(),
                "CATALOG" => self.catalog = value.into(),
                "PANEL" => self.panel = value.into(),
                "LINKS" => self.links = Some(value.into()),
                "MAX_BODY_BYTES" => self.max_body_bytes = env_parse(var, value)?,
                "MAX_MUTATIONS" => self.max_mutations = env_parse(var, value)?,
                "LOG_LEVEL" => self.log_level = value.to_string(),
                "TOP_K" => self.top_k = env_parse(var, value)?,
                "DISPERSION_THRESHOLD" => self.dispersion_threshold = env_parse(var, value)?,
                _ => {
                    if let Some(cancer) = key.strip_prefix("COHORT_") {
                        if cancer.is_empty() {
                            return Err(ConfigError::Env {
                                var: var.to_string(),
                                message: "missing cancer type".into(),
                            });
                        }
                        self.cohorts.insert(cancer.to_string(), value.into());
                    }
                }
            }
        }
        Ok(())
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.checkpoint);
        fix(&mut self.catalog);
        fix(&mut self.panel);
        if let Some(l) = &mut self.links {
            fix(l);
        }
        for p in self.cohorts.values_mut() {
            fix(p);
        }
    }

    /// Checks every referenced file exists and every limit is sensible.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let need = |what: &str, p: &Path| -> Result<(), ConfigError> {
            if p.as_os_str().is_empty() || !p.exists() {
                Err(ConfigError::Missing {
                    what: what.to_string(),
                    path: p.display().to_string(),
                })
            } else {
                Ok(())
            }
        };
        need("checkpoint", &self.checkpoint.join(MANIFEST_FILE))?;
        need("catalog", &self.catalog)?;
        need("panel", &self.panel)?;
        if let Some(l) = &self.links {
            need("link table", l)?;
        }
        for (cancer, p) in &self.cohorts {
            need(&format!("cohort {cancer}"), p)?;
        }
        if self.max_body_bytes == 0 || self.max_mutations == 0 || self.top_k == 0 {
            return Err(ConfigError::Invalid(
                "max_body_bytes, max_mutations and top_k must be positive".into(),
            ));
        }
        if self.top_k > crate::recommender::DEFAULT_TOP_K {
            return Err(ConfigError::Invalid(format!(
                "top_k is capped at {}, got {}",
                crate::recommender::DEFAULT_TOP_K,
                self.top_k
            )));
        }
        if !(self.dispersion_threshold >= 0.0 && self.dispersion_threshold.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "dispersion_threshold must be a non-negative number, got {}",
                self.dispersion_threshold
            )));
        }
        if !LOG_LEVELS.contains(&self.log_level.as_str()) {
            return Err(ConfigError::Invalid(format!("unknown log level {:?}", self.log_level)));
        }
        self.listen
            .parse::<std::net::IpAddr>()
            .map_err(|_| ConfigError::Invalid(format!("listen address {:?} is not an IP address", self.listen)))?;
        Ok(())
    }

    pub fn bind_addr(&self) -> String {
        format!("{}:{}", self.listen, self.port)
    }
}

/// Reads a TOML config, applies `vars` as overrides and validates.
/// Relative paths in the file resolve against the file's directory.
pub fn load_config_with<I, K, V>(path: &Path, vars: I) -> Result<ServiceConfig, ConfigError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let mut cfg: ServiceConfig = toml::from_str(&text)?;
    cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
    cfg.apply_env(vars)?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`load_config_with`] over the process environment.
pub fn load_config(path: &Path) -> Result<ServiceConfig, ConfigError> {
    load_config_with(path, std::env::vars())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputErrorKind {
    /// Not parseable as the declared format.
    Malformed,
    /// Parseable but violating the schema.
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct InputError {
    pub kind: InputErrorKind,
    pub field: String,
    pub message: String,
}

impl InputError {
    fn malformed(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: InputErrorKind::Malformed,
            field: field.into(),
            message: message.into(),
        }
    }

    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: InputErrorKind::Invalid,
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileFormat {
    Json,
    Tsv,
}

impl ProfileFormat {
    pub fn from_content_type(ct: Option<&str>) -> Self {
        match ct.map(|c| c.split(';').next().unwrap_or("").trim().to_ascii_lowercase()) {
            Some(c) if c == "text/tab-separated-values" || c == "text/tsv" => Self::Tsv,
            _ => Self::Json,
        }
    }

    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => Self::Tsv,
            _ => Self::Json,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProfileInput {
    pub profile: MutationProfile,
    pub cancer_type: Option<String>,
    pub cohort: Option<String>,
}

fn annotation_error(field: &str, e: TokenizerError) -> InputError {
    match e {
        TokenizerError::AnnotationLength(n) => InputError::invalid(field, format!("expected 23 values, found {n}")),
        TokenizerError::AnnotationValue(v) => InputError::invalid(field, format!("values must be 0 or 1, found {v}")),
        TokenizerError::Parse { message, .. } => InputError::invalid(field, message),
        other => InputError::invalid(field, other.to_string()),
    }
}

fn required_str<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, path: &str) -> Result<&'a str, InputError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(InputError::invalid(format!("{path}.{key}"), "missing field")),
        Some(Value::String(s)) if s.trim().is_empty() => {
            Err(InputError::invalid(format!("{path}.{key}"), "must not be empty"))
        }
        Some(Value::String(s)) => Ok(s.trim()),
        Some(_) => Err(InputError::invalid(format!("{path}.{key}"), "must be a string")),
    }
}

fn optional_str(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<String>, InputError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(InputError::invalid(key, "must be a string")),
    }
}

fn parse_json(doc: &str) -> Result<ProfileInput, InputError> {
    let value: Value = serde_json::from_str(doc).map_err(|e| InputError::malformed("$", e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(InputError::malformed("$", "expected a JSON object"));
    };
    for key in obj.keys() {
        if !matches!(key.as_str(), "mutations" | "cancer_type" | "cohort") {
            return Err(InputError::invalid(key.as_str(), "unknown field"));
        }
    }
    let list = match obj.get("mutations") {
        None => return Err(InputError::invalid("mutations", "missing field")),
        Some(Value::Array(a)) => a,
        Some(_) => return Err(InputError::invalid("mutations", "must be an array")),
    };
    let mut entries = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let path = format!("mutations[{i}]");
        let Value::Object(m) = item else {
            return Err(InputError::invalid(path, "must be an object"));
        };
        for key in m.keys() {
            if !matches!(key.as_str(), "gene" | "mutation" | "annotations") {
                return Err(InputError::invalid(format!("{path}.{key}"), "unknown field"));
            }
        }
        let gene = required_str(m, "gene", &path)?;
        let mutation = required_str(m, "mutation", &path)?;
        let mut entry = MutationEntry::new(gene, mutation);
        let field = format!("{path}.annotations");
        match m.get("annotations") {
            None | Some(Value::Null) => {}
            Some(Value::Array(vals)) => {
                let nums = vals
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v.as_f64()
                            .ok_or_else(|| InputError::invalid(format!("{field}[{j}]"), "must be a number"))
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                entry = entry.with_annotation(validate_annotation(&nums).map_err(|e| annotation_error(&field, e))?);
            }
            Some(_) => return Err(InputError::invalid(field, "must be an array of 23 numbers")),
        }
        entries.push(entry);
    }
    Ok(ProfileInput {
        profile: MutationProfile::new(entries),
        cancer_type: optional_str(&obj, "cancer_type")?,
        cohort: optional_str(&obj, "cohort")?,
    })
}

/// Header `gene  mutation  [annotations]`; annotations are 23 `0`/`1`
/// characters or empty. Blank lines and `#` comments are skipped.
fn parse_tsv(doc: &str) -> Result<ProfileInput, InputError> {
    let mut lines = doc
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let Some((_, header)) = lines.next() else {
        return Err(InputError::malformed("$", "missing header line"));
    };
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let with_ann = match cols.as_slice() {
        ["gene", "mutation"] => false,
        ["gene", "mutation", "annotations"] => true,
        _ => {
            return Err(InputError::malformed(
                "$",
                "header must be gene, mutation[, annotations]",
            ))
        }
    };
    let mut entries = Vec::new();
    for (i, (lineno, line)) in lines.enumerate() {
        let path = format!("mutations[{i}]");
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() < 2 || f.len() > 2 + usize::from(with_ann) {
            return Err(InputError::malformed(
                path,
                format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    2 + usize::from(with_ann),
                    f.len()
                ),
            ));
        }
        if f[0].is_empty() {
            return Err(InputError::invalid(format!("{path}.gene"), "missing field"));
        }
        if f[1].is_empty() {
            return Err(InputError::invalid(format!("{path}.mutation"), "missing field"));
        }
        let mut entry = MutationEntry::new(f[0], f[1]);
        if let Some(bits) = f.get(2).filter(|b| !b.is_empty()) {
            let field = format!("{path}.annotations");
            entry = entry.with_annotation(parse_annotation_bits(bits).map_err(|e| annotation_error(&field, e))?);
        }
        entries.push(entry);
    }
    Ok(ProfileInput {
        profile: MutationProfile::new(entries),
        ..Default::default()
    })
}

/// Parses a structured profile document. An empty mutation list is a
/// valid (empty) profile; scoring it fails later with "no usable mutations".
pub fn parse_profile_input(doc: &str, format: ProfileFormat) -> Result<ProfileInput, InputError> {
    match format {
        ProfileFormat::Json => parse_json(doc),
        ProfileFormat::Tsv => parse_tsv(doc),
    }
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("catalog: {0}")]
    Data(#[from] DataError),
    #[error("panel: {0}")]
    Panel(#[from] TokenizerError),
    #[error("{0}")]
    Recommend(#[from] RecommendError),
    #[error("panel does not match the checkpoint vocabulary: {0}")]
    PanelMismatch(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub hash: String,
    pub format_version: u32,
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub schema_version: u32,
    pub model: ModelInfo,
    pub cancer_type: Option<String>,
    /// Input genes outside the panel, scored through the unknown-gene token.
    pub unknown_genes: Vec<String>,
    #[serde(flatten)]
    pub evidence: Evidence,
}

/// Service-level failure with its HTTP mapping.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn internal(detail: impl std::fmt::Display) -> Self {
        log::error!("internal error: {detail}");
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: "internal error".into(),
            field: None,
        }
    }

    fn body(&self) -> Value {
        let mut e = json!({ "code": self.code, "message": self.message });
        if let Some(f) = &self.field {
            e["field"] = json!(f);
        }
        json!({ "error": e })
    }
}

impl From<InputError> for ApiError {
    fn from(e: InputError) -> Self {
        let (status, code) = match e.kind {
            InputErrorKind::Malformed => (StatusCode::BAD_REQUEST, "malformed"),
            InputErrorKind::Invalid => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
        };
        Self {
            status,
            code,
            message: e.message,
            field: Some(e.field),
        }
    }
}

impl From<RecommendError> for ApiError {
    fn from(e: RecommendError) -> Self {
        match e {
            RecommendError::Profile {
                source: ModelError::NoUsableMutations,
                ..
            } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "no_usable_mutations",
                message: "no usable mutations".into(),
                field: Some("mutations".into()),
            },
            RecommendError::Profile {
                source: ModelError::Tokenizer(t),
                ..
            } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "invalid",
                message: t.to_string(),
                field: Some("mutations".into()),
            },
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, &self.body())
    }
}

fn json_response<S: Serialize>(status: StatusCode, body: &S) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (
            status,
            [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
            bytes,
        )
            .into_response(),
        Err(e) => ApiError::internal(e).into_response(),
    }
}

/// Immutable serving state.
#[derive(Debug)]
pub struct Snapshot {
    pub model: Model<f32>,
    pub hash: String,
    pub metadata: TrainingMetadata,
    pub catalog: DrugCatalog,
    /// Keyed by cancer type.
    pub cohorts: BTreeMap<String, ReferenceCohort>,
    pub links: LinkTable,
    pub options: EvidenceOptions,
    pub max_mutations: usize,
    panel: HashSet<String>,
}

impl Snapshot {
    /// Scores every cohort against the checkpoint up front.
    pub fn new(
        checkpoint: Checkpoint,
        catalog: DrugCatalog,
        cohorts: Vec<ReferenceCohort>,
        links: LinkTable,
        options: EvidenceOptions,
    ) -> Result<Self, StartupError> {
        if catalog.is_empty() {
            return Err(RecommendError::EmptyCatalog.into());
        }
        let hash = checkpoint.hash();
        let mut by_type = BTreeMap::new();
        for mut c in cohorts {
            c.refresh(&checkpoint.model, &hash, &catalog)?;
            by_type.insert(c.cancer_type.clone(), c);
        }
        let panel = checkpoint.model.gene_vocab.genes().iter().cloned().collect();
        Ok(Self {
            model: checkpoint.model,
            hash,
            metadata: checkpoint.metadata,
            catalog,
            cohorts: by_type,
            links,
            options,
            max_mutations: usize::MAX,
            panel,
        })
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, StartupError> {
        cfg.validate()?;
        let ckpt = Checkpoint::load(&cfg.checkpoint)?;
        let catalog = DrugCatalog::load(&cfg.catalog)?;
        let panel = read_panel(&cfg.panel)?;
        if panel.as_slice() != ckpt.model.gene_vocab.genes() {
            return Err(StartupError::PanelMismatch(format!(
                "{} genes in panel file, {} in checkpoint",
                panel.len(),
                ckpt.model.gene_vocab.genes().len()
            )));
        }
        let links = match &cfg.links {
            Some(p) => LinkTable::parse(&std::fs::read_to_string(p)?)?,
            None => LinkTable::bundled(),
        };
        let mut cohorts = Vec::new();
        for (cancer, path) in &cfg.cohorts {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or(cancer).to_string();
            cohorts.push(ReferenceCohort::load(path, id, cancer.clone())?);
        }
        let options = EvidenceOptions {
            top_k: cfg.top_k,
            dispersion: DispersionOptions {
                iqr_threshold: cfg.dispersion_threshold,
                ..Default::default()
            },
        };
        let mut snap = Self::new(ckpt, catalog, cohorts, links, options)?;
        snap.max_mutations = cfg.max_mutations;
        Ok(snap)
    }

    pub fn cohort_ids(&self) -> Vec<String> {
        self.cohorts.values().map(|c| c.id.clone()).collect()
    }

    fn cohort_for(&self, input: &ProfileInput) -> Result<Option<&ReferenceCohort>, ApiError> {
        if let Some(id) = &input.cohort {
            return self
                .cohorts
                .values()
                .find(|c| &c.id == id)
                .map(Some)
                .ok_or_else(|| ApiError::from(InputError::invalid("cohort", format!("unknown cohort {id:?}"))));
        }
        Ok(input.cancer_type.as_ref().and_then(|t| self.cohorts.get(t)))
    }

    /// Scores the catalog and assembles evidence for one parsed profile.
    pub fn recommend(&self, input: &ProfileInput) -> Result<RecommendResponse, ApiError> {
        if input.profile.len() > self.max_mutations {
            return Err(InputError::invalid(
                "mutations",
                format!(
                    "at most {} mutations are accepted, got {}",
                    self.max_mutations,
                    input.profile.len()
                ),
            )
            .into());
        }
        let cohort = self.cohort_for(input)?;
        let scores = score_catalog(&self.model, &input.profile, &self.catalog)?;
        let evidence = assemble_evidence(
            &scores,
            &self.catalog,
            cohort.map(|c| (c, self.hash.as_str())),
            &self.links,
            self.options,
        )?;
        let mut unknown: Vec<String> = input
            .profile
            .entries
            .iter()
            .filter(|e| !self.panel.contains(&e.gene))
            .map(|e| e.gene.clone())
            .collect();
        unknown.sort();
        unknown.dedup();
        Ok(RecommendResponse {
            schema_version: SCHEMA_VERSION,
            model: self.model_info(),
            cancer_type: input.cancer_type.clone(),
            unknown_genes: unknown,
            evidence,
        })
    }

    pub fn model_info(&self) -> ModelInfo {
        ModelInfo {
            hash: self.hash.clone(),
            format_version: FORMAT_VERSION,
            stage: self.metadata.stage.clone(),
        }
    }
}

/// Shared handler state.
#[derive(Debug)]
pub struct Service {
    snapshot: RwLock<Arc<Snapshot>>,
    requests: AtomicU64,
    max_body_bytes: usize,
}

impl Service {
    pub fn new(snapshot: Snapshot, max_body_bytes: usize) -> Arc<Self> {
        Arc::new(Self {
            snapshot: RwLock::new(Arc::new(snapshot)),
            requests: AtomicU64::new(0),
            max_body_bytes,
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Replaces the snapshot; in-flight requests keep the old one.
    pub fn swap(&self, snapshot: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(snapshot);
    }
}

pub fn router(service: Arc<Service>) -> Router {
    let limit = service.max_body_bytes;
    Router::new()
        .route("/api/v1/recommend", post(recommend))
        .route("/api/v1/drugs", get(drugs))
        .route("/api/v1/health", get(health))
        .route("/api/v1/model", get(model))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(service)
}

#[derive(Debug, Default, Deserialize)]
struct RecommendQuery {
    cancer_type: Option<String>,
    cohort: Option<String>,
}

async fn recommend(
    State(svc): State<Arc<Service>>,
    Query(q): Query<RecommendQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let id = svc.requests.fetch_add(1, Ordering::Relaxed) + 1;
    let started = Instant::now();
    let format = ProfileFormat::from_content_type(headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()));
    let snap = svc.snapshot();
    let result = async {
        let doc = std::str::from_utf8(&body).map_err(|_| InputError::malformed("$", "body is not UTF-8"))?;
        let mut input = parse_profile_input(doc, format)?;
        if q.cancer_type.is_some() {
            input.cancer_type = q.cancer_type;
        }
        if q.cohort.is_some() {
            input.cohort = q.cohort;
        }
        tokio::task::spawn_blocking(move || snap.recommend(&input))
            .await
            .map_err(ApiError::internal)?
    }
    .await;
    let mut response = match result {
        Ok(r) => json_response(StatusCode::OK, &r),
        Err(e) => e.into_response(),
    };
    log::info!(
        "request {id} POST /api/v1/recommend -> {} in {:.1} ms",
        response.status().as_u16(),
        started.elapsed().as_secs_f64() * 1e3
    );
    response.headers_mut().insert(REQUEST_ID_HEADER, HeaderValue::from(id));
    response
}

async fn drugs(State(svc): State<Arc<Service>>) -> Response {
    let snap = svc.snapshot();
    let list: Vec<Value> = snap
        .catalog
        .drugs()
        .iter()
        .map(|d| json!({ "id": d.id, "name": d.name }))
        .collect();
    json_response(StatusCode::OK, &json!({ "drugs": list }))
}

async fn health(State(svc): State<Arc<Service>>) -> Response {
    let snap = svc.snapshot();
    json_response(
        StatusCode::OK,
        &json!({ "status": "ok", "model_hash": snap.hash, "cohorts": snap.cohort_ids() }),
    )
}

async fn model(State(svc): State<Arc<Service>>) -> Response {
    let snap = svc.snapshot();
    json_response(
        StatusCode::OK,
        &json!({
            "hash": snap.hash,
            "format_version": FORMAT_VERSION,
            "config": snap.model.config,
            "grid": snap.model.grid,
            "metadata": snap.metadata,
            "genes": snap.model.gene_vocab.genes().len(),
            "known_pairs": snap.model.mutation_vocab.num_pairs(),
            "drugs": snap.catalog.len(),
        }),
    )
}

/// Loads everything named by `cfg` and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<(), StartupError> {
    let snapshot = Snapshot::from_config(&cfg)?;
    log::info!(
        "model {} with {} drugs and cohorts {:?}",
        snapshot.hash,
        snapshot.catalog.len(),
        snapshot.cohort_ids()
    );
    let app = router(Service::new(snapshot, cfg.max_body_bytes));
    let addr = cfg.bind_addr();
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| StartupError::Bind {
            addr: addr.clone(),
            source,
        })?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
