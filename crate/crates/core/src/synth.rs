//! Seeded synthetic cohorts with a planted, recoverable signal.
//!
//! Every record gets a standardized planted score
//! `z = (Σ w_pair + Σ u_bit − μ) / σ` built from a hidden subset of
//! gene–mutation pairs and a hidden subset of fingerprint bits. With
//! signal strength `s`:
//!
//! * RECIST: `label ~ Bernoulli(sigmoid(s·z + b))`, `b` set from the target
//!   positive rate;
//! * survival: `pfs = 365 · E · exp(s·z / 2)` with `E ~ Exp(1)`; a configured
//!   fraction is censored at a uniform point of the true time;
//! * cell lines: `audrc = sigmoid(−s·z / 2 + ε)`, `ε ~ N(0, 0.5²)`.
//!
//! At `s = 0` every label is independent of the features.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    write_cellline, write_profiles, write_recist, write_survival, CellLineRecord, DataError, Drug, DrugCatalog,
    Fingerprint, ProfileRecord, RecistRecord, SurvivalRecord, FINGERPRINT_BITS,
};
use crate::tokenizer::{
    write_known_pairs, write_panel, Annotation, KnownPair, MutationEntry, MutationProfile, TokenizerError,
    ANNOTATION_DIM,
};

const LEAD_GENES: [&str; 24] = [
    "TP53", "KRAS", "APC", "PIK3CA", "BRAF", "EGFR", "SMAD4", "FBXW7", "NRAS", "ALK", "STK11", "KEAP1", "PTEN",
    "ERBB2", "MET", "ROS1", "RET", "CDKN2A", "ARID1A", "ATM", "BRCA2", "NF1", "CTNNB1", "SOX9",
];

const LEAD_DRUGS: [&str; 20] = [
    "Oxaliplatin",
    "Irinotecan",
    "Fluorouracil",
    "Capecitabine",
    "Bevacizumab",
    "Cetuximab",
    "Panitumumab",
    "Regorafenib",
    "Erlotinib",
    "Gefitinib",
    "Osimertinib",
    "Cisplatin",
    "Carboplatin",
    "Pemetrexed",
    "Docetaxel",
    "Paclitaxel",
    "Gemcitabine",
    "Trametinib",
    "Dabrafenib",
    "Sorafenib",
];

const AMINO_ACIDS: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Survival records of the colorectal-role cohort (stage 1 only).
    pub n_survival_crc: usize,
    /// Survival records of the lung-role cohort (stages 1 and 2).
    pub n_survival_nsclc: usize,
    pub n_recist: usize,
    pub n_cellline: usize,
    /// Unlabeled reference-cohort profiles.
    pub n_cohort: usize,
    pub panel_size: usize,
    pub n_drugs: usize,
    pub pairs_per_gene: usize,
    pub max_mutations: usize,
    pub max_records_per_patient: usize,
    pub signal_strength: f64,
    pub recist_positive_rate: f64,
    pub censor_fraction: f64,
    /// Probability that a mutation is not in the known-pairs vocabulary.
    pub novel_mutation_rate: f64,
    /// Fraction of known pairs carrying a nonzero planted weight.
    pub active_pair_fraction: f64,
    pub active_bits: usize,
    pub fingerprint_density: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_survival_crc: 200,
            n_survival_nsclc: 200,
            n_recist: 2000,
            n_cellline: 1000,
            n_cohort: 50,
            panel_size: 40,
            n_drugs: 12,
            pairs_per_gene: 4,
            max_mutations: 6,
            max_records_per_patient: 2,
            signal_strength: 2.5,
            recist_positive_rate: 0.5,
            censor_fraction: 0.3,
            novel_mutation_rate: 0.05,
            active_pair_fraction: 0.4,
            active_bits: 128,
            fingerprint_density: 0.04,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let total = self.n_survival_crc + self.n_survival_nsclc + self.n_recist + self.n_cellline;
        if total == 0 {
            return bad("at least one record count must be positive");
        }
        if self.panel_size == 0 || self.n_drugs == 0 || self.pairs_per_gene == 0 {
            return bad("panel_size, n_drugs and pairs_per_gene must be positive");
        }
        if self.max_mutations == 0 || self.max_records_per_patient == 0 {
            return bad("max_mutations and max_records_per_patient must be positive");
        }
        if self.pairs_per_gene > 400 {
            return bad("pairs_per_gene must be at most 400");
        }
        for (name, p) in [
            ("recist_positive_rate", self.recist_positive_rate),
            ("censor_fraction", self.censor_fraction),
            ("novel_mutation_rate", self.novel_mutation_rate),
            ("active_pair_fraction", self.active_pair_fraction),
            ("fingerprint_density", self.fingerprint_density),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.recist_positive_rate > 0.0 && self.recist_positive_rate < 1.0) {
            return bad("recist_positive_rate must lie strictly inside (0, 1)");
        }
        if !self.signal_strength.is_finite() || self.signal_strength < 0.0 {
            return bad("signal_strength must be a non-negative number");
        }
        if self.active_bits > FINGERPRINT_BITS {
            return bad("active_bits exceeds the fingerprint width");
        }
        Ok(())
    }
}

/// The hidden generating rule.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRule {
    pair_weights: HashMap<(String, String), f64>,
    bit_weights: Vec<(usize, f64)>,
    mean: f64,
    sd: f64,
}

impl PlantedRule {
    fn raw(&self, profile: &MutationProfile, fp: &Fingerprint) -> f64 {
        let patient: f64 = profile
            .entries
            .iter()
            .filter_map(|e| self.pair_weights.get(&(e.gene.clone(), e.mutation.clone())))
            .sum();
        let drug: f64 = self
            .bit_weights
            .iter()
            .filter(|(b, _)| fp.get(*b))
            .map(|(_, w)| w)
            .sum();
        patient + drug
    }

    /// Standardized planted score; higher means better expected response.
    pub fn score(&self, profile: &MutationProfile, fp: &Fingerprint) -> f64 {
        (self.raw(profile, fp) - self.mean) / self.sd
    }
}

/// Planted scores aligned with each generated dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantedScores {
    pub survival_crc: Vec<f64>,
    pub survival_nsclc: Vec<f64>,
    pub recist: Vec<f64>,
    pub cellline: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub seed: u64,
    pub signal_strength: f64,
    pub recist_positive_rate: f64,
    pub survival_censored_fraction: f64,
    pub mean_audrc: f64,
    pub n_known_pairs: usize,
    pub n_drugs: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub panel: Vec<String>,
    pub known_pairs: Vec<KnownPair>,
    pub catalog: DrugCatalog,
    pub survival_crc: Vec<SurvivalRecord>,
    pub survival_nsclc: Vec<SurvivalRecord>,
    pub recist: Vec<RecistRecord>,
    pub cellline: Vec<CellLineRecord>,
    pub cohort: Vec<ProfileRecord>,
    pub rule: PlantedRule,
    pub planted: PlantedScores,
    pub summary: SyntheticSummary,
}

pub fn panel_genes(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match LEAD_GENES.get(i) {
            Some(g) => g.to_string(),
            None => format!("GENE{:03}", i + 1),
        })
        .collect()
}

fn drug_name(i: usize) -> String {
    match LEAD_DRUGS.get(i) {
        Some(n) => n.to_string(),
        None => format!("Compound-{:02}", i + 1 - LEAD_DRUGS.len()),
    }
}

fn random_annotation(rng: &mut ChaCha8Rng) -> Annotation {
    let mut a = [0f32; ANNOTATION_DIM];
    for v in a.iter_mut() {
        *v = if rng.random_bool(0.3) { 1.0 } else { 0.0 };
    }
    a
}

fn mutation_name(rng: &mut ChaCha8Rng) -> String {
    let from = AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())] as char;
    let to = AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())] as char;
    format!("{from}{}{to}", rng.random_range(1..1000))
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
    panel: Vec<String>,
    by_gene: Vec<Vec<KnownPair>>,
    novel_counter: usize,
}

impl Generator<'_> {
    fn profile(&mut self) -> MutationProfile {
        let n = self.rng.random_range(1..=self.cfg.max_mutations);
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let g = self.rng.random_range(0..self.panel.len());
            if self.rng.random_bool(self.cfg.novel_mutation_rate) {
                self.novel_counter += 1;
                let name = format!("X{}", self.novel_counter);
                let ann = random_annotation(&mut self.rng);
                entries.push(MutationEntry::new(self.panel[g].clone(), name).with_annotation(ann));
            } else {
                let pair = self.by_gene[g]
                    .choose(&mut self.rng)
                    .expect("pairs_per_gene > 0")
                    .clone();
                if entries
                    .iter()
                    .any(|e: &MutationEntry| e.gene == pair.gene && e.mutation == pair.mutation)
                {
                    continue;
                }
                entries.push(MutationEntry::new(pair.gene, pair.mutation).with_annotation(pair.annotation));
            }
        }
        MutationProfile::new(entries)
    }

    /// `(group id, profile, drug index)` triples, grouped per patient.
    fn cohort(&mut self, prefix: &str, n: usize) -> Vec<(String, MutationProfile, usize)> {
        let mut out = Vec::with_capacity(n);
        let mut patient = 0;
        while out.len() < n {
            patient += 1;
            let id = format!("{prefix}{patient:05}");
            let profile = self.profile();
            let k = self
                .rng
                .random_range(1..=self.cfg.max_records_per_patient)
                .min(n - out.len())
                .min(self.cfg.n_drugs);
            let drugs = rand::seq::index::sample(&mut self.rng, self.cfg.n_drugs, k);
            for d in drugs.iter() {
                out.push((id.clone(), profile.clone(), d));
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let panel = panel_genes(cfg.panel_size);

    let mut by_gene = Vec::with_capacity(panel.len());
    for gene in &panel {
        let mut names: Vec<String> = Vec::with_capacity(cfg.pairs_per_gene);
        while names.len() < cfg.pairs_per_gene {
            let m = mutation_name(&mut rng);
            if !names.contains(&m) {
                names.push(m);
            }
        }
        by_gene.push(
            names
                .into_iter()
                .map(|m| KnownPair {
                    gene: gene.clone(),
                    mutation: m,
                    annotation: random_annotation(&mut rng),
                })
                .collect::<Vec<_>>(),
        );
    }
    let known_pairs: Vec<KnownPair> = by_gene.iter().flatten().cloned().collect();

    let drugs: Vec<Drug> = (0..cfg.n_drugs)
        .map(|i| {
            let mut fp = Fingerprint::default();
            for b in 0..FINGERPRINT_BITS {
                if rng.random_bool(cfg.fingerprint_density) {
                    fp.set(b);
                }
            }
            Drug {
                id: format!("D{:03}", i + 1),
                name: drug_name(i),
                fingerprint: fp,
            }
        })
        .collect();
    let catalog = DrugCatalog::new(drugs)?;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pair_weights = HashMap::new();
    for p in &known_pairs {
        if rng.random_bool(cfg.active_pair_fraction) {
            pair_weights.insert((p.gene.clone(), p.mutation.clone()), normal.sample(&mut rng));
        }
    }
    let bit_weights: Vec<(usize, f64)> = rand::seq::index::sample(&mut rng, FINGERPRINT_BITS, cfg.active_bits)
        .into_vec()
        .into_iter()
        .map(|b| (b, 0.5 * normal.sample(&mut rng)))
        .collect();
    let mut rule = PlantedRule {
        pair_weights,
        bit_weights,
        mean: 0.0,
        sd: 1.0,
    };

    let mut gen = Generator {
        cfg,
        rng,
        panel: panel.clone(),
        by_gene,
        novel_counter: 0,
    };
    let crc = gen.cohort("CRC", cfg.n_survival_crc);
    let nsclc = gen.cohort("LUNG", cfg.n_survival_nsclc);
    let recist_rows = gen.cohort("PT", cfg.n_recist);
    let cell_rows = gen.cohort("CL", cfg.n_cellline);
    let cohort: Vec<ProfileRecord> = (0..cfg.n_cohort)
        .map(|i| ProfileRecord {
            patient_id: format!("REF{:04}", i + 1),
            profile: gen.profile(),
        })
        .collect();
    let mut rng = gen.rng;

    let fp = |d: usize| &catalog.drugs()[d].fingerprint;
    let all_raw: Vec<f64> = [&crc, &nsclc, &recist_rows, &cell_rows]
        .iter()
        .flat_map(|rows| rows.iter().map(|(_, p, d)| rule.raw(p, fp(*d))))
        .collect();
    let n = all_raw.len() as f64;
    let mean = all_raw.iter().sum::<f64>() / n;
    let var = all_raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    rule.mean = mean;
    rule.sd = if var > 1e-12 { var.sqrt() } else { 1.0 };

    let s = cfg.signal_strength;
    let offset = (cfg.recist_positive_rate / (1.0 - cfg.recist_positive_rate)).ln();
    let mut planted = PlantedScores::default();

    let survival = |rows: &[(String, MutationProfile, usize)], out_z: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        rows.iter()
            .map(|(id, p, d)| {
                let z = rule.score(p, fp(*d));
                out_z.push(z);
                let e: f64 = Exp1.sample(rng);
                let t = 365.0 * e * (s * z / 2.0).exp();
                let censored = rng.random_bool(cfg.censor_fraction);
                let pfs = if censored { rng.random::<f64>() * t } else { t };
                SurvivalRecord {
                    patient_id: id.clone(),
                    profile: p.clone(),
                    drug_id: catalog.drugs()[*d].id.clone(),
                    pfs_days: (pfs * 100.0).round() / 100.0,
                    event_observed: !censored,
                }
            })
            .collect::<Vec<_>>()
    };
    let survival_crc = survival(&crc, &mut planted.survival_crc, &mut rng);
    let survival_nsclc = survival(&nsclc, &mut planted.survival_nsclc, &mut rng);

    let recist: Vec<RecistRecord> = recist_rows
        .iter()
        .map(|(id, p, d)| {
            let z = rule.score(p, fp(*d));
            planted.recist.push(z);
            RecistRecord {
                patient_id: id.clone(),
                profile: p.clone(),
                drug_id: catalog.drugs()[*d].id.clone(),
                label: rng.random_bool(sigmoid(s * z + offset)),
            }
        })
        .collect();

    let noise = Normal::new(0.0, 0.5).expect("noise sd");
    let cellline: Vec<CellLineRecord> = cell_rows
        .iter()
        .map(|(id, p, d)| {
            let z = rule.score(p, fp(*d));
            planted.cellline.push(z);
            let a = sigmoid(-s * z / 2.0 + noise.sample(&mut rng));
            CellLineRecord {
                cell_line_id: id.clone(),
                profile: p.clone(),
                drug_id: catalog.drugs()[*d].id.clone(),
                audrc: (a * 1e4).round() / 1e4,
            }
        })
        .collect();

    let all_survival = survival_crc.iter().chain(&survival_nsclc);
    let n_surv = survival_crc.len() + survival_nsclc.len();
    let summary = SyntheticSummary {
        seed: cfg.seed,
        signal_strength: s,
        recist_positive_rate: ratio(recist.iter().filter(|r| r.label).count(), recist.len()),
        survival_censored_fraction: ratio(all_survival.filter(|r| !r.event_observed).count(), n_surv),
        mean_audrc: if cellline.is_empty() {
            0.0
        } else {
            cellline.iter().map(|r| r.audrc).sum::<f64>() / cellline.len() as f64
        },
        n_known_pairs: known_pairs.len(),
        n_drugs: catalog.len(),
    };

    Ok(SyntheticData {
        config: cfg.clone(),
        panel,
        known_pairs,
        catalog,
        survival_crc,
        survival_nsclc,
        recist,
        cellline,
        cohort,
        rule,
        planted,
        summary,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// File names written by [`SyntheticData::write_dir`].
pub mod files {
    pub const PANEL: &str = "panel.txt";
    pub const KNOWN_PAIRS: &str = "known_pairs.tsv";
    pub const CATALOG: &str = "catalog.tsv";
    pub const SURVIVAL_CRC: &str = "survival_crc.tsv";
    pub const SURVIVAL_NSCLC: &str = "survival_nsclc.tsv";
    pub const RECIST: &str = "recist.tsv";
    pub const CELLLINE: &str = "cellline.tsv";
    pub const COHORT: &str = "cohort.tsv";
    pub const SUMMARY: &str = "summary.json";
}

impl SyntheticData {
    pub fn write_dir(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        write_panel(&dir.join(files::PANEL), &self.panel)?;
        write_known_pairs(&dir.join(files::KNOWN_PAIRS), &self.known_pairs)?;
        self.catalog.save(&dir.join(files::CATALOG))?;
        write_survival(&dir.join(files::SURVIVAL_CRC), &self.survival_crc)?;
        write_survival(&dir.join(files::SURVIVAL_NSCLC), &self.survival_nsclc)?;
        write_recist(&dir.join(files::RECIST), &self.recist)?;
        write_cellline(&dir.join(files::CELLLINE), &self.cellline)?;
        write_profiles(&dir.join(files::COHORT), &self.cohort)?;
        let summary = serde_json::json!({ "config": self.config, "summary": self.summary });
        std::fs::write(dir.join(files::SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auroc;

    fn small(seed: u64, s: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_survival_crc: 50,
            n_survival_nsclc: 50,
            n_recist: 2000,
            n_cellline: 50,
            signal_strength: s,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(3, 2.0)).unwrap();
        let b = generate_synthetic(&small(3, 2.0)).unwrap();
        assert_eq!(a.recist, b.recist);
        assert_eq!(a.survival_crc, b.survival_crc);
        assert_eq!(a.cellline, b.cellline);
        assert_eq!(a.catalog, b.catalog);
        let c = generate_synthetic(&small(4, 2.0)).unwrap();
        assert_ne!(a.recist, c.recist);
    }

    #[test]
    fn zero_signal_is_uninformative() {
        let d = generate_synthetic(&small(1, 0.0)).unwrap();
        let labels: Vec<bool> = d.recist.iter().map(|r| r.label).collect();
        let a = auroc(&labels, &d.planted.recist).unwrap();
        assert!((a - 0.5).abs() < 0.05, "auroc {a}");
    }

    #[test]
    fn strong_signal_is_recoverable() {
        let d = generate_synthetic(&small(1, 4.0)).unwrap();
        let labels: Vec<bool> = d.recist.iter().map(|r| r.label).collect();
        let a = auroc(&labels, &d.planted.recist).unwrap();
        assert!(a > 0.9, "auroc {a}");
    }

    #[test]
    fn counts_and_invariants() {
        let d = generate_synthetic(&small(2, 1.0)).unwrap();
        assert_eq!(d.recist.len(), 2000);
        assert_eq!(d.survival_crc.len(), 50);
        assert_eq!(d.known_pairs.len(), 40 * 4);
        assert!(d.cellline.iter().all(|r| (0.0..=1.0).contains(&r.audrc)));
        assert!(d.survival_nsclc.iter().all(|r| r.pfs_days >= 0.0));
        assert!(generate_synthetic(&SyntheticConfig {
            n_drugs: 0,
            ..small(0, 1.0)
        })
        .is_err());
    }
}
