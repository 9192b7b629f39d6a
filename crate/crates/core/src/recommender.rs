//! Catalog scoring, top-k ranking and the two kinds of supporting evidence:
//! drug-level robust z-scores against an unlabeled reference cohort, and
//! patient-level dispersion of scores across the whole catalog.
//!
//! Cohort z-scores are computed on raw probabilities, not logits. A patient
//! who also appears in the cohort is not removed from it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{load_profiles, DataError, DrugCatalog, Fingerprint, ProfileRecord};
use crate::model::{Model, ModelError};
use crate::stats::{quantile_sorted, sorted_copy, FiveNumberSummary};

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_DISPERSION_THRESHOLD: f64 = 0.02;
pub const DEFAULT_OUTLIER_Z: f64 = 2.0;
pub const NO_REFERENCE_COHORT: &str = "no reference cohort";

/// Links shipped with the crate, keyed by drug name.
pub const BUNDLED_LINKS: &str = include_str!("../data/drug_links.tsv");

/// Drug id → predicted probability of good response.
pub type ScoreMap = BTreeMap<String, f64>;

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("the drug catalog is empty")]
    EmptyCatalog,
    #[error("reference cohort is empty")]
    EmptyCohort,
    #[error("patient dispersion needs at least 2 drugs, got {0}")]
    TooFewDrugs(usize),
    #[error("cohort {cohort} was scored with checkpoint {cached:?}, current checkpoint is {current}")]
    StaleCache {
        cohort: String,
        cached: Option<String>,
        current: String,
    },
    #[error("cohort {cohort} has no cached scores for drug {drug}")]
    MissingDrug { cohort: String, drug: String },
    #[error("{context}: {source}")]
    Profile {
        context: String,
        #[source]
        source: ModelError,
    },
    #[error("malformed link table line {line}: {message}")]
    Links { line: usize, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Scores every catalog drug for one profile. The profile is encoded once.
pub fn score_catalog<T: crate::Element>(
    model: &Model<T>,
    profile: &crate::tokenizer::MutationProfile,
    catalog: &DrugCatalog,
) -> Result<ScoreMap, RecommendError> {
    if catalog.is_empty() {
        return Err(RecommendError::EmptyCatalog);
    }
    let fps: Vec<&Fingerprint> = catalog.drugs().iter().map(|d| &d.fingerprint).collect();
    let scores = model
        .score_drugs(profile, &fps)
        .map_err(|source| RecommendError::Profile {
            context: "scoring input profile".into(),
            source,
        })?;
    Ok(catalog.drugs().iter().map(|d| d.id.clone()).zip(scores).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDrug {
    pub drug_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Descending by score, ties by drug id; at most `k` entries.
pub fn rank_top_k(scores: &ScoreMap, k: usize) -> Vec<RankedDrug> {
    let mut items: Vec<(&String, f64)> = scores.iter().map(|(id, &s)| (id, s)).collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, score))| RankedDrug {
            drug_id: id.clone(),
            score,
            rank: i + 1,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RobustZ {
    Z(f64),
    /// The cohort IQR is zero.
    Degenerate,
}

impl RobustZ {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Z(z) => Some(z),
            Self::Degenerate => None,
        }
    }
}

/// `(patient − median) / IQR` with linearly interpolated quartiles.
pub fn robust_z(patient: f64, cohort: &[f64]) -> Result<RobustZ, RecommendError> {
    if cohort.is_empty() {
        return Err(RecommendError::EmptyCohort);
    }
    let s = sorted_copy(cohort);
    Ok(z_from_sorted(patient, &s))
}

fn z_from_sorted(patient: f64, sorted: &[f64]) -> RobustZ {
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    if iqr > 0.0 {
        RobustZ::Z((patient - quantile_sorted(sorted, 0.5)) / iqr)
    } else {
        RobustZ::Degenerate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispersionOptions {
    /// Across-drug IQR below this marks the patient low-confidence.
    pub iqr_threshold: f64,
    /// Within-patient z above this marks a drug as standing out.
    pub outlier_z: f64,
}

impl Default for DispersionOptions {
    fn default() -> Self {
        Self {
            iqr_threshold: DEFAULT_DISPERSION_THRESHOLD,
            outlier_z: DEFAULT_OUTLIER_Z,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrugDispersion {
    pub drug_id: String,
    pub score: f64,
    /// Absent when the patient's IQR is zero.
    pub z: Option<f64>,
    pub high: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub median: f64,
    pub iqr: f64,
    pub threshold: f64,
    pub low_confidence: bool,
    pub drugs: Vec<DrugDispersion>,
}

/// Spread of one patient's scores across all drugs.
///
/// With a zero IQR no z is reported, and any drug away from the median
/// counts as high.
pub fn patient_dispersion(scores: &ScoreMap, opts: DispersionOptions) -> Result<DispersionReport, RecommendError> {
    if scores.len() < 2 {
        return Err(RecommendError::TooFewDrugs(scores.len()));
    }
    let values: Vec<f64> = scores.values().copied().collect();
    let s = sorted_copy(&values);
    let median = quantile_sorted(&s, 0.5);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let drugs = scores
        .iter()
        .map(|(id, &score)| {
            let z = z_from_sorted(score, &s).value();
            let high = match z {
                Some(z) => z > opts.outlier_z,
                None => score > median,
            };
            DrugDispersion {
                drug_id: id.clone(),
                score,
                z,
                high,
            }
        })
        .collect();
    Ok(DispersionReport {
        median,
        iqr,
        threshold: opts.iqr_threshold,
        low_confidence: iqr < opts.iqr_threshold || s[0] == s[s.len() - 1],
        drugs,
    })
}

/// Per-drug scores of a reference cohort under one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortScores {
    pub checkpoint_hash: String,
    pub scores: BTreeMap<String, Vec<f64>>,
    pub summaries: BTreeMap<String, FiveNumberSummary>,
}

/// Unlabeled patients used as the baseline for drug-level z-scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCohort {
    pub id: String,
    pub cancer_type: String,
    pub profiles: Vec<ProfileRecord>,
    cache: Option<CohortScores>,
}

impl ReferenceCohort {
    pub fn new(
        id: impl Into<String>,
        cancer_type: impl Into<String>,
        profiles: Vec<ProfileRecord>,
    ) -> Result<Self, RecommendError> {
        if profiles.is_empty() {
            return Err(RecommendError::EmptyCohort);
        }
        Ok(Self {
            id: id.into(),
            cancer_type: cancer_type.into(),
            profiles,
            cache: None,
        })
    }

    pub fn load(path: &Path, id: impl Into<String>, cancer_type: impl Into<String>) -> Result<Self, RecommendError> {
        Self::new(id, cancer_type, load_profiles(path)?)
    }

    /// Scores every profile against every catalog drug and stores the
    /// result under `checkpoint_hash`.
    pub fn refresh<T: crate::Element>(
        &mut self,
        model: &Model<T>,
        checkpoint_hash: &str,
        catalog: &DrugCatalog,
    ) -> Result<(), RecommendError> {
        if catalog.is_empty() {
            return Err(RecommendError::EmptyCatalog);
        }
        let fps: Vec<&Fingerprint> = catalog.drugs().iter().map(|d| &d.fingerprint).collect();
        let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(self.profiles.len()); catalog.len()];
        for rec in &self.profiles {
            let row = model
                .score_drugs(&rec.profile, &fps)
                .map_err(|source| RecommendError::Profile {
                    context: format!("cohort {} patient {}", self.id, rec.patient_id),
                    source,
                })?;
            for (col, v) in columns.iter_mut().zip(row) {
                col.push(v);
            }
        }
        let mut scores = BTreeMap::new();
        let mut summaries = BTreeMap::new();
        for (drug, col) in catalog.drugs().iter().zip(columns) {
            summaries.insert(drug.id.clone(), FiveNumberSummary::of(&col).expect("non-empty cohort"));
            scores.insert(drug.id.clone(), col);
        }
        self.cache = Some(CohortScores {
            checkpoint_hash: checkpoint_hash.to_string(),
            scores,
            summaries,
        });
        Ok(())
    }

    pub fn cached(&self) -> Option<&CohortScores> {
        self.cache.as_ref()
    }

    /// Cached scores, provided they were produced by `checkpoint_hash`.
    pub fn scores_for(&self, checkpoint_hash: &str) -> Result<&CohortScores, RecommendError> {
        match &self.cache {
            Some(c) if c.checkpoint_hash == checkpoint_hash => Ok(c),
            other => Err(RecommendError::StaleCache {
                cohort: self.id.clone(),
                cached: other.as_ref().map(|c| c.checkpoint_hash.clone()),
                current: checkpoint_hash.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugLink {
    pub source: String,
    pub url: String,
}

/// Static auxiliary-database links keyed by drug name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkTable(BTreeMap<String, Vec<DrugLink>>);

impl LinkTable {
    /// TSV with header `drug_name  source  url`.
    pub fn parse(text: &str) -> Result<Self, RecommendError> {
        let mut map: BTreeMap<String, Vec<DrugLink>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(RecommendError::Links {
                    line: i + 1,
                    message: format!("expected 3 columns, found {}", cols.len()),
                });
            }
            map.entry(cols[0].to_string()).or_default().push(DrugLink {
                source: cols[1].to_string(),
                url: cols[2].to_string(),
            });
        }
        Ok(Self(map))
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LINKS).expect("bundled link table is well formed")
    }

    pub fn get(&self, drug_name: &str) -> &[DrugLink] {
        self.0.get(drug_name).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecommendationFlags {
    pub degenerate_iqr: bool,
    pub low_patient_dispersion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub drug_id: String,
    pub drug_name: String,
    pub score: f64,
    /// Robust z against the reference cohort; absent without a cohort or
    /// when the cohort IQR is zero.
    pub z: Option<f64>,
    pub cohort_summary: Option<FiveNumberSummary>,
    pub flags: RecommendationFlags,
    pub links: Vec<DrugLink>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwarmPoint {
    pub drug_id: String,
    pub drug_name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub recommendations: Vec<Recommendation>,
    pub dispersion: Option<DispersionReport>,
    /// Every catalog drug, ordered by drug id.
    pub swarm: Vec<SwarmPoint>,
    pub cohort_id: Option<String>,
    pub flags: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvidenceOptions {
    pub top_k: usize,
    pub dispersion: DispersionOptions,
}

impl Default for EvidenceOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            dispersion: DispersionOptions::default(),
        }
    }
}

/// Builds the top-k list with cohort z-scores and summaries, the
/// dispersion report and the swarm payload from precomputed scores.
pub fn assemble_evidence(
    scores: &ScoreMap,
    catalog: &DrugCatalog,
    cohort: Option<(&ReferenceCohort, &str)>,
    links: &LinkTable,
    opts: EvidenceOptions,
) -> Result<Evidence, RecommendError> {
    if scores.is_empty() {
        return Err(RecommendError::EmptyCatalog);
    }
    let cached = match cohort {
        Some((c, hash)) => Some((c, c.scores_for(hash)?)),
        None => None,
    };
    let dispersion = if scores.len() >= 2 {
        Some(patient_dispersion(scores, opts.dispersion)?)
    } else {
        None
    };
    let low = dispersion.as_ref().is_some_and(|d| d.low_confidence);
    let name_of = |id: &str| catalog.get(id).map(|d| d.name.clone()).unwrap_or_default();

    let mut recommendations = Vec::new();
    for r in rank_top_k(scores, opts.top_k) {
        let (z, summary, degenerate) = match &cached {
            Some((c, cs)) => {
                let col = cs.scores.get(&r.drug_id).ok_or_else(|| RecommendError::MissingDrug {
                    cohort: c.id.clone(),
                    drug: r.drug_id.clone(),
                })?;
                let z = robust_z(r.score, col)?;
                (
                    z.value(),
                    cs.summaries.get(&r.drug_id).copied(),
                    z == RobustZ::Degenerate,
                )
            }
            None => (None, None, false),
        };
        let name = name_of(&r.drug_id);
        recommendations.push(Recommendation {
            rank: r.rank,
            links: links.get(&name).to_vec(),
            drug_name: name,
            drug_id: r.drug_id,
            score: r.score,
            z,
            cohort_summary: summary,
            flags: RecommendationFlags {
                degenerate_iqr: degenerate,
                low_patient_dispersion: low,
            },
        });
    }
    let swarm = scores
        .iter()
        .map(|(id, &score)| SwarmPoint {
            drug_id: id.clone(),
            drug_name: name_of(id),
            score,
        })
        .collect();
    let mut flags = Vec::new();
    if cached.is_none() {
        flags.push(NO_REFERENCE_COHORT.to_string());
    }
    if low {
        flags.push("low patient dispersion".to_string());
    }
    Ok(Evidence {
        recommendations,
        dispersion,
        swarm,
        cohort_id: cached.map(|(c, _)| c.id.clone()),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map(pairs: &[(&str, f64)]) -> ScoreMap {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn robust_z_examples() {
        let z = robust_z(0.9, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap().value().unwrap();
        assert_abs_diff_eq!(z, 3.0, epsilon = 1e-12);
        assert_eq!(robust_z(0.3, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(), RobustZ::Z(0.0));
        assert_eq!(robust_z(0.9, &[0.4; 6]).unwrap(), RobustZ::Degenerate);
        assert!(matches!(robust_z(0.9, &[]), Err(RecommendError::EmptyCohort)));
    }

    #[test]
    fn ranking_caps_and_breaks_ties_by_id() {
        let s = map(&[("b", 0.5), ("a", 0.5), ("c", 0.9)]);
        let r = rank_top_k(&s, 10);
        let ids: Vec<_> = r.iter().map(|x| x.drug_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(rank_top_k(&s, 1).len(), 1);
    }

    #[test]
    fn dispersion_flags() {
        let flat = patient_dispersion(
            &map(&[("a", 0.4), ("b", 0.4), ("c", 0.4)]),
            DispersionOptions::default(),
        )
        .unwrap();
        assert!(flat.low_confidence);
        assert_eq!(flat.iqr, 0.0);

        let spread: Vec<(String, f64)> = (0..10).map(|i| (format!("d{i}"), 0.40 + 0.01 * i as f64)).collect();
        let mut s: ScoreMap = spread.into_iter().collect();
        s.insert("x".into(), 0.95);
        let rep = patient_dispersion(&s, DispersionOptions::default()).unwrap();
        let highs: Vec<_> = rep
            .drugs
            .iter()
            .filter(|d| d.high)
            .map(|d| d.drug_id.as_str())
            .collect();
        assert_eq!(highs, ["x"]);

        let zero = DispersionOptions {
            iqr_threshold: 0.0,
            ..Default::default()
        };
        assert!(
            !patient_dispersion(&map(&[("a", 0.1), ("b", 0.1000001)]), zero)
                .unwrap()
                .low_confidence
        );
        assert!(matches!(
            patient_dispersion(&map(&[("a", 0.1)]), zero),
            Err(RecommendError::TooFewDrugs(1))
        ));
    }

    #[test]
    fn bundled_links_parse() {
        let t = LinkTable::bundled();
        assert!(!t.get("Cetuximab").is_empty());
        assert!(t.get("Compound-01").is_empty());
        assert!(LinkTable::parse("h\nonly\ttwo\n").is_err());
    }
}
