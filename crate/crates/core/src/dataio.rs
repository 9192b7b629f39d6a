//! Dataset records, TSV readers/writers, the drug catalog and
//! patient-grouped splitting.
//!
//! All tables are tab-separated UTF-8 with a header row. A `mutations`
//! field holds `gene:mutation[:bits]` entries joined by `;`, where `bits`
//! is a 23-character 0/1 annotation string.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{format_annotation_bits, parse_annotation_bits, MutationEntry, MutationProfile};

pub const FINGERPRINT_BITS: usize = 2048;
const FINGERPRINT_WORDS: usize = FINGERPRINT_BITS / 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: {message}")]
    Row { path: String, line: u64, message: String },
    #[error("fingerprint must have 2048 bits (512 hex chars), got {0} hex chars")]
    FingerprintLength(usize),
    #[error("invalid fingerprint hex: {0}")]
    FingerprintHex(String),
    #[error("duplicate drug id {0}")]
    DuplicateDrug(String),
    #[error("split ratios must sum to 100, got {0:?}")]
    Ratios([u32; 3]),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// 2048-bit Morgan fingerprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint([u64; FINGERPRINT_WORDS]);

impl Default for Fingerprint {
    fn default() -> Self {
        Self([0; FINGERPRINT_WORDS])
    }
}

impl Fingerprint {
    pub fn from_bits(bits: &[bool]) -> Result<Self, DataError> {
        if bits.len() != FINGERPRINT_BITS {
            return Err(DataError::FingerprintLength(bits.len() / 4));
        }
        let mut fp = Self::default();
        for (i, &b) in bits.iter().enumerate() {
            if b {
                fp.set(i);
            }
        }
        Ok(fp)
    }

    pub fn set(&mut self, bit: usize) {
        self.0[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.0[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    /// Bits as 0/1 floats, bit 0 first.
    pub fn to_f32(&self) -> Vec<f32> {
        (0..FINGERPRINT_BITS)
            .map(|i| if self.get(i) { 1.0 } else { 0.0 })
            .collect()
    }

    /// 512 hex chars; the first char's high bit is bit 0.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = (0..FINGERPRINT_BITS / 8)
            .map(|byte| (0..8).fold(0u8, |acc, j| acc | (u8::from(self.get(byte * 8 + j)) << (7 - j))))
            .collect();
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, DataError> {
        let s = s.trim();
        if s.len() != FINGERPRINT_BITS / 4 {
            return Err(DataError::FingerprintLength(s.len()));
        }
        let bytes = hex::decode(s).map_err(|e| DataError::FingerprintHex(e.to_string()))?;
        let mut fp = Self::default();
        for (byte, v) in bytes.iter().enumerate() {
            for j in 0..8 {
                if v >> (7 - j) & 1 == 1 {
                    fp.set(byte * 8 + j);
                }
            }
        }
        Ok(fp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Drug {
    pub id: String,
    pub name: String,
    pub fingerprint: Fingerprint,
}

/// Approved-drug catalog, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DrugCatalog {
    drugs: Vec<Drug>,
    index: HashMap<String, usize>,
}

impl DrugCatalog {
    pub fn new(drugs: Vec<Drug>) -> Result<Self, DataError> {
        let mut index = HashMap::new();
        for (i, d) in drugs.iter().enumerate() {
            if index.insert(d.id.clone(), i).is_some() {
                return Err(DataError::DuplicateDrug(d.id.clone()));
            }
        }
        Ok(Self { drugs, index })
    }

    pub fn len(&self) -> usize {
        self.drugs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drugs.is_empty()
    }

    pub fn drugs(&self) -> &[Drug] {
        &self.drugs
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Drug> {
        self.position(id).map(|i| &self.drugs[i])
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut rdr = tsv_reader(path)?;
        let mut drugs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row_err = row_error(path, &rec);
            if rec.len() != 3 {
                return Err(row_err(format!("expected 3 columns, got {}", rec.len())));
            }
            let fingerprint = Fingerprint::from_hex(&rec[2]).map_err(|e| row_err(e.to_string()))?;
            drugs.push(Drug {
                id: rec[0].to_string(),
                name: rec[1].to_string(),
                fingerprint,
            });
        }
        Self::new(drugs)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = tsv_writer(path)?;
        w.write_record(["drug_id", "name", "fingerprint"])?;
        for d in &self.drugs {
            w.write_record([d.id.as_str(), d.name.as_str(), &d.fingerprint.to_hex()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub profile: MutationProfile,
    pub drug_id: String,
    pub pfs_days: f64,
    pub event_observed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecistRecord {
    pub patient_id: String,
    pub profile: MutationProfile,
    pub drug_id: String,
    /// `true` = good response.
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellLineRecord {
    pub cell_line_id: String,
    pub profile: MutationProfile,
    pub drug_id: String,
    /// Area under the dose response curve in `[0, 1]`; lower is better.
    pub audrc: f64,
}

/// An unlabeled profile, as found in reference cohorts.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRecord {
    pub patient_id: String,
    pub profile: MutationProfile,
}

/// Common access used by splitting and batching.
pub trait Record {
    fn group_id(&self) -> &str;
    fn profile(&self) -> &MutationProfile;
    fn drug_id(&self) -> &str;
}

macro_rules! impl_record {
    ($t:ty, $group:ident) => {
        impl Record for $t {
            fn group_id(&self) -> &str {
                &self.$group
            }
            fn profile(&self) -> &MutationProfile {
                &self.profile
            }
            fn drug_id(&self) -> &str {
                &self.drug_id
            }
        }
    };
}

impl_record!(SurvivalRecord, patient_id);
impl_record!(RecistRecord, patient_id);
impl_record!(CellLineRecord, cell_line_id);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Survival,
    Recist,
    Cellline,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Survival(Vec<SurvivalRecord>),
    Recist(Vec<RecistRecord>),
    Cellline(Vec<CellLineRecord>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Survival(r) => r.len(),
            Dataset::Recist(r) => r.len(),
            Dataset::Cellline(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn format_mutations(profile: &MutationProfile) -> String {
    profile
        .entries
        .iter()
        .map(|e| match &e.annotation {
            Some(a) => format!("{}:{}:{}", e.gene, e.mutation, format_annotation_bits(a)),
            None => format!("{}:{}", e.gene, e.mutation),
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_mutations(field: &str) -> Result<MutationProfile, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(MutationProfile::default());
    }
    let mut entries = Vec::new();
    for (i, item) in field.split(';').enumerate() {
        let parts: Vec<&str> = item.trim().split(':').collect();
        let (gene, mutation, bits) = match parts.as_slice() {
            [g, m] => (*g, *m, None),
            [g, m, b] => (*g, *m, Some(*b)),
            _ => return Err(format!("mutation {i}: expected gene:mutation[:bits], got {item:?}")),
        };
        if gene.is_empty() {
            return Err(format!("mutation {i}: empty gene name"));
        }
        let mut entry = MutationEntry::new(gene, mutation);
        if let Some(bits) = bits {
            entry.annotation = Some(parse_annotation_bits(bits).map_err(|e| format!("mutation {i}: {e}"))?);
        }
        entries.push(entry);
    }
    Ok(MutationProfile::new(entries))
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_path(path)?)
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, DataError> {
    Ok(csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)?)
}

fn row_error<'a>(path: &'a Path, rec: &csv::StringRecord) -> impl Fn(String) -> DataError + 'a {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    move |message| DataError::Row {
        path: path.display().to_string(),
        line,
        message,
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "1" | "true" | "True" | "TRUE" => Ok(true),
        "0" | "false" | "False" | "FALSE" => Ok(false),
        other => Err(format!("expected 0/1, got {other:?}")),
    }
}

fn read_rows<R>(
    path: &Path,
    columns: usize,
    catalog: Option<&DrugCatalog>,
    mut parse: impl FnMut(&csv::StringRecord) -> Result<R, String>,
) -> Result<Vec<R>, DataError> {
    let mut rdr = tsv_reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row_err = row_error(path, &rec);
        if rec.len() != columns {
            return Err(row_err(format!("expected {columns} columns, got {}", rec.len())));
        }
        if let Some(cat) = catalog {
            if cat.position(&rec[1]).is_none() {
                return Err(row_err(format!("unknown drug id {:?}", &rec[1])));
            }
        }
        out.push(parse(&rec).map_err(row_err)?);
    }
    Ok(out)
}

pub fn load_survival(path: &Path, catalog: &DrugCatalog) -> Result<Vec<SurvivalRecord>, DataError> {
    read_rows(path, 5, Some(catalog), |rec| {
        let pfs_days: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|e| format!("pfs_days {:?}: {e}", &rec[2]))?;
        if !(pfs_days.is_finite() && pfs_days >= 0.0) {
            return Err(format!("pfs_days must be non-negative, got {pfs_days}"));
        }
        Ok(SurvivalRecord {
            patient_id: rec[0].to_string(),
            drug_id: rec[1].to_string(),
            pfs_days,
            event_observed: parse_bool(&rec[3])?,
            profile: parse_mutations(&rec[4])?,
        })
    })
}

pub fn load_recist(path: &Path, catalog: &DrugCatalog) -> Result<Vec<RecistRecord>, DataError> {
    read_rows(path, 4, Some(catalog), |rec| {
        Ok(RecistRecord {
            patient_id: rec[0].to_string(),
            drug_id: rec[1].to_string(),
            label: parse_bool(&rec[2])?,
            profile: parse_mutations(&rec[3])?,
        })
    })
}

pub fn load_cellline(path: &Path, catalog: &DrugCatalog) -> Result<Vec<CellLineRecord>, DataError> {
    read_rows(path, 4, Some(catalog), |rec| {
        let audrc: f64 = rec[2].trim().parse().map_err(|e| format!("audrc {:?}: {e}", &rec[2]))?;
        if !(0.0..=1.0).contains(&audrc) {
            return Err(format!("audrc must lie in [0, 1], got {audrc}"));
        }
        Ok(CellLineRecord {
            cell_line_id: rec[0].to_string(),
            drug_id: rec[1].to_string(),
            audrc,
            profile: parse_mutations(&rec[3])?,
        })
    })
}

/// Unlabeled profile table (`patient_id`, `mutations`), used for reference
/// cohorts.
pub fn load_profiles(path: &Path) -> Result<Vec<ProfileRecord>, DataError> {
    read_rows(path, 2, None, |rec| {
        Ok(ProfileRecord {
            patient_id: rec[0].to_string(),
            profile: parse_mutations(&rec[1])?,
        })
    })
}

pub fn load_dataset(path: &Path, kind: DatasetKind, catalog: &DrugCatalog) -> Result<Dataset, DataError> {
    Ok(match kind {
        DatasetKind::Survival => Dataset::Survival(load_survival(path, catalog)?),
        DatasetKind::Recist => Dataset::Recist(load_recist(path, catalog)?),
        DatasetKind::Cellline => Dataset::Cellline(load_cellline(path, catalog)?),
    })
}

pub fn write_survival(path: &Path, records: &[SurvivalRecord]) -> Result<(), DataError> {
    let mut w = tsv_writer(path)?;
    w.write_record(["patient_id", "drug_id", "pfs_days", "event_observed", "mutations"])?;
    for r in records {
        w.write_record([
            r.patient_id.as_str(),
            &r.drug_id,
            &format!("{}", r.pfs_days),
            if r.event_observed { "1" } else { "0" },
            &format_mutations(&r.profile),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_recist(path: &Path, records: &[RecistRecord]) -> Result<(), DataError> {
    let mut w = tsv_writer(path)?;
    w.write_record(["patient_id", "drug_id", "label", "mutations"])?;
    for r in records {
        w.write_record([
            r.patient_id.as_str(),
            &r.drug_id,
            if r.label { "1" } else { "0" },
            &format_mutations(&r.profile),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cellline(path: &Path, records: &[CellLineRecord]) -> Result<(), DataError> {
    let mut w = tsv_writer(path)?;
    w.write_record(["cell_line_id", "drug_id", "audrc", "mutations"])?;
    for r in records {
        w.write_record([
            r.cell_line_id.as_str(),
            &r.drug_id,
            &format!("{}", r.audrc),
            &format_mutations(&r.profile),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_profiles(path: &Path, records: &[ProfileRecord]) -> Result<(), DataError> {
    let mut w = tsv_writer(path)?;
    w.write_record(["patient_id", "mutations"])?;
    for r in records {
        w.write_record([r.patient_id.as_str(), &format_mutations(&r.profile)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<R> {
    pub train: Vec<R>,
    pub val: Vec<R>,
    pub test: Vec<R>,
}

/// Default train/validation/test proportions.
pub const DEFAULT_RATIOS: [u32; 3] = [64, 16, 20];

/// Shuffles patient groups with `seed` and fills train, then validation,
/// then test up to their target record counts. All records of a group land
/// in the same split; record order inside each split follows input order.
pub fn split<R: Record + Clone>(records: &[R], ratios: [u32; 3], seed: u64) -> Result<Split<R>, DataError> {
    if ratios.iter().sum::<u32>() != 100 {
        return Err(DataError::Ratios(ratios));
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.group_id()).or_default().push(i);
    }
    let mut keys: Vec<&str> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = records.len() as f64;
    let train_target = (n * ratios[0] as f64 / 100.0).round() as usize;
    let val_target = (n * ratios[1] as f64 / 100.0).round() as usize;
    let mut assignment = vec![2u8; records.len()];
    let (mut n_train, mut n_val) = (0usize, 0usize);
    for key in keys {
        let members = &groups[key];
        let dest = if n_train < train_target {
            n_train += members.len();
            0
        } else if n_val < val_target {
            n_val += members.len();
            1
        } else {
            2
        };
        for &i in members {
            assignment[i] = dest;
        }
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (r, a) in records.iter().zip(assignment) {
        match a {
            0 => out.train.push(r.clone()),
            1 => out.val.push(r.clone()),
            _ => out.test.push(r.clone()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recist(n: usize) -> Vec<RecistRecord> {
        (0..n)
            .map(|i| RecistRecord {
                patient_id: format!("P{i}"),
                profile: MutationProfile::default(),
                drug_id: "D1".into(),
                label: i % 2 == 0,
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let r = recist(100);
        let s = split(&r, DEFAULT_RATIOS, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 16, 20));
        assert_eq!(s, split(&r, DEFAULT_RATIOS, 7).unwrap());
        assert!(matches!(
            split::<RecistRecord>(&[], DEFAULT_RATIOS, 0),
            Err(DataError::EmptyDataset)
        ));
        assert!(matches!(split(&r, [50, 20, 20], 0), Err(DataError::Ratios(_))));
    }

    #[test]
    fn fingerprint_hex_round_trip() {
        let mut fp = Fingerprint::default();
        for b in [0, 7, 8, 100, 2047] {
            fp.set(b);
        }
        let hex = fp.to_hex();
        assert_eq!(hex.len(), 512);
        assert!(hex.starts_with("81"));
        assert_eq!(Fingerprint::from_hex(&hex).unwrap(), fp);
        assert!(matches!(
            Fingerprint::from_hex("ff"),
            Err(DataError::FingerprintLength(2))
        ));
    }

    #[test]
    fn mutation_field_parsing() {
        let p = parse_mutations("TP53:R306;KRAS:G12V:10000000000000000000001").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.entries[1].annotation.unwrap()[22], 1.0);
        assert_eq!(format_mutations(&p), "TP53:R306;KRAS:G12V:10000000000000000000001");
        assert!(parse_mutations("TP53").is_err());
        assert!(parse_mutations("TP53:R1:0101").is_err());
        assert!(parse_mutations("").unwrap().is_empty());
    }
}
