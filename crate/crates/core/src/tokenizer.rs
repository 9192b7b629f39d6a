//! Dual gene / mutation tokenization.
//!
//! A profile becomes two aligned index tracks. The gene track reads
//!
//! ```text
//! <s> G1 <mutsep> <mut> <mut> <gensep> G2 <mutsep> <mut> </s>
//! ```
//!
//! and the mutation track carries, at each `<mut>` position, the index of
//! the gene–mutation pair (1..=M, or M+1 = `<namut>` when the pair is not in
//! the vocabulary), with the null index 0 everywhere else. Each position also
//! carries a 23-dim annotation row (zeros off `<mut>` positions, all ones
//! for `<namut>`).

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ANNOTATION_DIM: usize = 23;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const GENSEP: &str = "<gensep>";
pub const MUTSEP: &str = "<mutsep>";
pub const MUT: &str = "<mut>";
pub const NAMUT: &str = "<namut>";

const SPECIAL_TOKENS: [&str; 7] = [PAD, BOS, EOS, UNK, GENSEP, MUTSEP, MUT];

/// Mutation-track index at every non-`<mut>` position.
pub const NULL_MUTATION: usize = 0;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("duplicate gene {0:?} in panel")]
    DuplicateGene(String),
    #[error("gene name collides with special token {0:?}")]
    ReservedName(String),
    #[error("empty gene name at profile entry {0}")]
    EmptyGene(usize),
    #[error("duplicate gene–mutation pair {0}:{1}")]
    DuplicatePair(String, String),
    #[error("annotation vector has {0} entries, expected 23")]
    AnnotationLength(usize),
    #[error("annotation values must be 0 or 1, got {0}")]
    AnnotationValue(f64),
    #[error("cannot collate an empty list of samples")]
    EmptyBatch,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// 23 binary annotation features of one mutation.
pub type Annotation = [f32; ANNOTATION_DIM];

pub fn validate_annotation(values: &[f64]) -> Result<Annotation, TokenizerError> {
    if values.len() != ANNOTATION_DIM {
        return Err(TokenizerError::AnnotationLength(values.len()));
    }
    let mut out = [0f32; ANNOTATION_DIM];
    for (o, &v) in out.iter_mut().zip(values) {
        if v != 0.0 && v != 1.0 {
            return Err(TokenizerError::AnnotationValue(v));
        }
        *o = v as f32;
    }
    Ok(out)
}

/// Parses a 23-character string of `0`/`1`.
pub fn parse_annotation_bits(bits: &str) -> Result<Annotation, TokenizerError> {
    let values: Vec<f64> = bits
        .chars()
        .map(|c| match c {
            '0' => Ok(0.0),
            '1' => Ok(1.0),
            other => Err(TokenizerError::Parse {
                line: 0,
                message: format!("annotation bit {other:?} is not 0 or 1"),
            }),
        })
        .collect::<Result<_, _>>()?;
    validate_annotation(&values)
}

pub fn format_annotation_bits(a: &Annotation) -> String {
    a.iter().map(|&v| if v > 0.5 { '1' } else { '0' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationEntry {
    pub gene: String,
    pub mutation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

impl MutationEntry {
    pub fn new(gene: impl Into<String>, mutation: impl Into<String>) -> Self {
        Self {
            gene: gene.into(),
            mutation: mutation.into(),
            annotation: None,
        }
    }

    pub fn with_annotation(mut self, a: Annotation) -> Self {
        self.annotation = Some(a);
        self
    }
}

/// A patient's (or cell line's) list of mutations, in report order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MutationProfile {
    pub entries: Vec<MutationEntry>,
}

impl MutationProfile {
    pub fn new(entries: Vec<MutationEntry>) -> Self {
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Genes in order of first appearance, each with its mutations in order.
    pub fn grouped(&self) -> Vec<(&str, Vec<&MutationEntry>)> {
        let mut groups: Vec<(&str, Vec<&MutationEntry>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for e in &self.entries {
            match slot.get(e.gene.as_str()) {
                Some(&i) => groups[i].1.push(e),
                None => {
                    slot.insert(e.gene.as_str(), groups.len());
                    groups.push((e.gene.as_str(), vec![e]));
                }
            }
        }
        groups
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct GeneVocab {
    genes: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<GeneVocab> for Vec<String> {
    fn from(v: GeneVocab) -> Self {
        v.genes
    }
}

impl TryFrom<Vec<String>> for GeneVocab {
    type Error = TokenizerError;
    fn try_from(genes: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(genes)
    }
}

impl GeneVocab {
    pub fn new(genes: Vec<String>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(genes.len() + SPECIAL_TOKENS.len());
        for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
            index.insert((*t).to_string(), i);
        }
        for (i, g) in genes.iter().enumerate() {
            if SPECIAL_TOKENS.contains(&g.as_str()) {
                return Err(TokenizerError::ReservedName(g.clone()));
            }
            if index.insert(g.clone(), SPECIAL_TOKENS.len() + i).is_some() {
                return Err(TokenizerError::DuplicateGene(g.clone()));
            }
        }
        Ok(Self { genes, index })
    }

    pub fn len(&self) -> usize {
        self.genes.len() + SPECIAL_TOKENS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        if index < SPECIAL_TOKENS.len() {
            Some(SPECIAL_TOKENS[index])
        } else {
            self.genes.get(index - SPECIAL_TOKENS.len()).map(|s| s.as_str())
        }
    }

    /// Gene token index, or `<unk>` for genes outside the panel.
    pub fn gene_or_unk(&self, gene: &str) -> usize {
        self.index_of(gene).filter(|&i| i >= SPECIAL_TOKENS.len()).unwrap_or(3)
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn bos(&self) -> usize {
        1
    }
    pub fn eos(&self) -> usize {
        2
    }
    pub fn unk(&self) -> usize {
        3
    }
    pub fn gensep(&self) -> usize {
        4
    }
    pub fn mutsep(&self) -> usize {
        5
    }
    pub fn mut_token(&self) -> usize {
        6
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownPair {
    pub gene: String,
    pub mutation: String,
    pub annotation: Annotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<KnownPair>", try_from = "Vec<KnownPair>")]
pub struct MutationVocab {
    pairs: Vec<KnownPair>,
    index: HashMap<(String, String), usize>,
}

impl From<MutationVocab> for Vec<KnownPair> {
    fn from(v: MutationVocab) -> Self {
        v.pairs
    }
}

impl TryFrom<Vec<KnownPair>> for MutationVocab {
    type Error = TokenizerError;
    fn try_from(pairs: Vec<KnownPair>) -> Result<Self, Self::Error> {
        Self::new(pairs)
    }
}

impl MutationVocab {
    pub fn new(pairs: Vec<KnownPair>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if index.insert((p.gene.clone(), p.mutation.clone()), i + 1).is_some() {
                return Err(TokenizerError::DuplicatePair(p.gene.clone(), p.mutation.clone()));
            }
        }
        Ok(Self { pairs, index })
    }

    /// Number of known pairs, `M`.
    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Index of `<namut>`, `M + 1`.
    pub fn namut(&self) -> usize {
        self.pairs.len() + 1
    }

    /// Size of the mutation-track index space (null, pairs, `<namut>`).
    pub fn table_size(&self) -> usize {
        self.pairs.len() + 2
    }

    pub fn pairs(&self) -> &[KnownPair] {
        &self.pairs
    }

    pub fn index_of(&self, gene: &str, mutation: &str) -> Option<usize> {
        self.index.get(&(gene.to_string(), mutation.to_string())).copied()
    }

    pub fn annotation(&self, index: usize) -> Option<&Annotation> {
        index
            .checked_sub(1)
            .and_then(|i| self.pairs.get(i))
            .map(|p| &p.annotation)
    }
}

/// Builds both vocabularies; index assignment follows input order.
pub fn build_vocabularies(
    panel_genes: &[String],
    known_pairs: &[KnownPair],
) -> Result<(GeneVocab, MutationVocab), TokenizerError> {
    Ok((
        GeneVocab::new(panel_genes.to_vec())?,
        MutationVocab::new(known_pairs.to_vec())?,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerOptions {
    /// Emit genes (and mutations within a gene) sorted by name instead of
    /// report order.
    pub sort_genes: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSample {
    pub gene_ids: Vec<usize>,
    pub mutation_ids: Vec<usize>,
    /// `L × 23`, row-major.
    pub annotations: Vec<f32>,
    /// `true` at `<pad>` positions.
    pub pad_mask: Vec<bool>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gene_ids.is_empty()
    }
}

pub fn tokenize(
    profile: &MutationProfile,
    gv: &GeneVocab,
    mv: &MutationVocab,
    opts: TokenizerOptions,
) -> Result<TokenizedSample, TokenizerError> {
    if let Some(i) = profile.entries.iter().position(|e| e.gene.trim().is_empty()) {
        return Err(TokenizerError::EmptyGene(i));
    }
    let mut groups = profile.grouped();
    if opts.sort_genes {
        groups.sort_by(|a, b| a.0.cmp(b.0));
        for g in &mut groups {
            g.1.sort_by(|a, b| a.mutation.cmp(&b.mutation));
        }
    }

    let mut out = TokenizedSample {
        gene_ids: Vec::new(),
        mutation_ids: Vec::new(),
        annotations: Vec::new(),
        pad_mask: Vec::new(),
    };
    let zeros = [0f32; ANNOTATION_DIM];
    let mut push = |gene: usize, mutation: usize, ann: &[f32]| {
        out.gene_ids.push(gene);
        out.mutation_ids.push(mutation);
        out.annotations.extend_from_slice(ann);
        out.pad_mask.push(false);
    };

    push(gv.bos(), NULL_MUTATION, &zeros);
    for (gi, (gene, muts)) in groups.iter().enumerate() {
        if gi > 0 {
            push(gv.gensep(), NULL_MUTATION, &zeros);
        }
        push(gv.gene_or_unk(gene), NULL_MUTATION, &zeros);
        push(gv.mutsep(), NULL_MUTATION, &zeros);
        for m in muts {
            match mv.index_of(gene, &m.mutation) {
                Some(idx) => {
                    let ann = m.annotation.as_ref().or_else(|| mv.annotation(idx)).unwrap_or(&zeros);
                    push(gv.mut_token(), idx, ann);
                }
                None => push(gv.mut_token(), mv.namut(), &[1f32; ANNOTATION_DIM]),
            }
        }
    }
    push(gv.eos(), NULL_MUTATION, &zeros);
    Ok(out)
}

/// Padded batch of tokenized samples, `B × L` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub gene_ids: Vec<usize>,
    pub mutation_ids: Vec<usize>,
    /// `B × L × 23`.
    pub annotations: Vec<f32>,
    /// `true` at padding positions.
    pub pad_mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Per-position `true` where the token takes part in attention/pooling.
    pub fn valid(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|&p| !p).collect()
    }

    /// Sample `i` with its padding stripped.
    pub fn sample(&self, i: usize) -> TokenizedSample {
        let l = self.seq_len;
        let n = self.lengths[i];
        let s = i * l;
        TokenizedSample {
            gene_ids: self.gene_ids[s..s + n].to_vec(),
            mutation_ids: self.mutation_ids[s..s + n].to_vec(),
            annotations: self.annotations[s * ANNOTATION_DIM..(s + n) * ANNOTATION_DIM].to_vec(),
            pad_mask: self.pad_mask[s..s + n].to_vec(),
        }
    }
}

/// Pads every sample to the batch's longest length with `<pad>` / null.
pub fn collate(samples: &[&TokenizedSample], pad_index: usize) -> Result<Batch, TokenizerError> {
    if samples.is_empty() {
        return Err(TokenizerError::EmptyBatch);
    }
    let l = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let b = samples.len();
    let mut batch = Batch {
        batch_size: b,
        seq_len: l,
        gene_ids: Vec::with_capacity(b * l),
        mutation_ids: Vec::with_capacity(b * l),
        annotations: Vec::with_capacity(b * l * ANNOTATION_DIM),
        pad_mask: Vec::with_capacity(b * l),
        lengths: Vec::with_capacity(b),
    };
    for s in samples {
        let pad = l - s.len();
        batch.gene_ids.extend_from_slice(&s.gene_ids);
        batch.gene_ids.extend(std::iter::repeat_n(pad_index, pad));
        batch.mutation_ids.extend_from_slice(&s.mutation_ids);
        batch.mutation_ids.extend(std::iter::repeat_n(NULL_MUTATION, pad));
        batch.annotations.extend_from_slice(&s.annotations);
        batch
            .annotations
            .extend(std::iter::repeat_n(0f32, pad * ANNOTATION_DIM));
        batch.pad_mask.extend_from_slice(&s.pad_mask);
        batch.pad_mask.extend(std::iter::repeat_n(true, pad));
        batch.lengths.push(s.len());
    }
    Ok(batch)
}

/// Reads a panel file: one gene per line; blank lines and `#` comments skipped.
pub fn read_panel(path: &Path) -> Result<Vec<String>, TokenizerError> {
    let file = std::fs::File::open(path)?;
    let mut genes = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let g = line.trim();
        if g.is_empty() || g.starts_with('#') {
            continue;
        }
        genes.push(g.to_string());
    }
    Ok(genes)
}

pub fn write_panel(path: &Path, genes: &[String]) -> Result<(), TokenizerError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in genes {
        writeln!(f, "{g}")?;
    }
    f.flush()?;
    Ok(())
}

fn annotation_header() -> Vec<String> {
    let mut h = vec!["gene".to_string(), "mutation".to_string()];
    h.extend((1..=ANNOTATION_DIM).map(|i| format!("a{i}")));
    h
}

/// Reads the known-pairs TSV: `gene`, `mutation`, then 23 columns of 0/1.
pub fn read_known_pairs(path: &Path) -> Result<Vec<KnownPair>, TokenizerError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_path(path)?;
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| TokenizerError::Parse { line, message };
        if rec.len() != 2 + ANNOTATION_DIM {
            return Err(bad(format!(
                "expected {} columns, got {}",
                2 + ANNOTATION_DIM,
                rec.len()
            )));
        }
        let values: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("annotation {v:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        let annotation = validate_annotation(&values).map_err(|e| bad(e.to_string()))?;
        pairs.push(KnownPair {
            gene: rec[0].to_string(),
            mutation: rec[1].to_string(),
            annotation,
        });
    }
    Ok(pairs)
}

pub fn write_known_pairs(path: &Path, pairs: &[KnownPair]) -> Result<(), TokenizerError> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record(annotation_header())?;
    for p in pairs {
        let mut row = vec![p.gene.clone(), p.mutation.clone()];
        row.extend(p.annotation.iter().map(|v| format!("{}", *v as u8)));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> (GeneVocab, MutationVocab) {
        let genes = vec!["KRAS".to_string(), "TP53".to_string()];
        let mut ann = [0f32; ANNOTATION_DIM];
        ann[0] = 1.0;
        let pairs = vec![
            KnownPair {
                gene: "KRAS".into(),
                mutation: "G12V".into(),
                annotation: ann,
            },
            KnownPair {
                gene: "TP53".into(),
                mutation: "R306".into(),
                annotation: [0.0; 23],
            },
        ];
        build_vocabularies(&genes, &pairs).unwrap()
    }

    #[test]
    fn vocabulary_sizes() {
        let (gv, mv) = vocab();
        assert_eq!(gv.len(), 9);
        assert_eq!(gv.index_of("KRAS"), Some(7));
        assert_eq!(gv.token(8), Some("TP53"));
        assert_eq!(mv.namut(), 3);
        let dup = vec!["A".to_string(), "A".to_string()];
        assert!(matches!(GeneVocab::new(dup), Err(TokenizerError::DuplicateGene(_))));
    }

    #[test]
    fn empty_profile() {
        let (gv, mv) = vocab();
        let s = tokenize(&MutationProfile::default(), &gv, &mv, Default::default()).unwrap();
        assert_eq!(s.gene_ids, vec![gv.bos(), gv.eos()]);
        assert_eq!(s.mutation_ids, vec![NULL_MUTATION, NULL_MUTATION]);
        assert!(s.annotations.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_known_mutation_layout() {
        let (gv, mv) = vocab();
        let p = MutationProfile::new(vec![MutationEntry::new("KRAS", "G12V")]);
        let s = tokenize(&p, &gv, &mv, Default::default()).unwrap();
        assert_eq!(s.gene_ids, vec![gv.bos(), 7, gv.mutsep(), gv.mut_token(), gv.eos()]);
        assert_eq!(s.mutation_ids, vec![0, 0, 0, 1, 0]);
        assert_eq!(s.annotations[3 * ANNOTATION_DIM], 1.0);
    }

    #[test]
    fn unknown_pair_and_gene() {
        let (gv, mv) = vocab();
        let p = MutationProfile::new(vec![
            MutationEntry::new("TP53", "X1"),
            MutationEntry::new("BRAF", "V600E"),
        ]);
        let s = tokenize(&p, &gv, &mv, Default::default()).unwrap();
        assert_eq!(s.mutation_ids[3], mv.namut());
        assert!(s.annotations[3 * 23..4 * 23].iter().all(|&v| v == 1.0));
        assert_eq!(s.gene_ids[4], gv.gensep());
        assert_eq!(s.gene_ids[5], gv.unk());
        assert_eq!(s.len(), 2 + 3 + 3 + 1);
    }

    #[test]
    fn empty_gene_rejected() {
        let (gv, mv) = vocab();
        let p = MutationProfile::new(vec![MutationEntry::new(" ", "G12V")]);
        assert!(matches!(
            tokenize(&p, &gv, &mv, Default::default()),
            Err(TokenizerError::EmptyGene(0))
        ));
    }

    #[test]
    fn collate_pads_and_round_trips() {
        let (gv, mv) = vocab();
        let a = tokenize(&MutationProfile::default(), &gv, &mv, Default::default()).unwrap();
        let b = tokenize(
            &MutationProfile::new(vec![
                MutationEntry::new("KRAS", "G12V"),
                MutationEntry::new("KRAS", "Q61"),
            ]),
            &gv,
            &mv,
            Default::default(),
        )
        .unwrap();
        let batch = collate(&[&a, &b], gv.pad()).unwrap();
        assert_eq!(batch.seq_len, 6);
        assert_eq!(&batch.pad_mask[..6], &[false, false, true, true, true, true]);
        assert_eq!(batch.sample(0), a);
        assert_eq!(batch.sample(1), b);
        let solo = collate(&[&b], gv.pad()).unwrap();
        assert_eq!(solo.sample(0), b);
        assert!(solo.pad_mask.iter().all(|&p| !p));
    }

    #[test]
    fn known_pairs_file_round_trip() {
        let (_, mv) = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        write_known_pairs(&path, mv.pairs()).unwrap();
        assert_eq!(read_known_pairs(&path).unwrap(), mv.pairs());
    }
}
