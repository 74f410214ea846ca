//! Parsing of word2vec-text embedding replicates and TSV terminology files.
//!
//! An embedding file holds one replicate: a header line `<count> <dim>`
//! followed by `count` lines of `<token> <v1> ... <vdim>`. A terminology file
//! is a five-column TSV with no header row:
//! `concept_id, preferred_term, synonyms (pipe separated), semantic_group, definition`.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Group assigned to concepts that the terminology does not classify.
pub const UNKNOWN_GROUP: &str = "Unknown";

/// Fraction of malformed terminology rows above which the whole file is rejected.
const MAX_MALFORMED_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed header: {reason}")]
    HeaderMalformed { line: usize, reason: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate token `{token}`")]
    DuplicateToken { line: usize, token: String },
    #[error("line {line}: non-finite or unparsable value `{value}`")]
    NonFiniteValue { line: usize, value: String },
    #[error("line {line}: all-zero vector for `{token}`")]
    ZeroVector { line: usize, token: String },
    #[error("header declares {declared} vectors, file contains {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("invalid concept id `{0}`")]
    InvalidConceptId(String),
    #[error("line {line}: invalid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("{file}: {source}")]
    InFile {
        file: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error("corpus `{corpus}`: {found} replicate(s) given, at least 2 required")]
    TooFewReplicates { corpus: String, found: usize },
    #[error("corpus `{corpus}`: replicate {index} has dim {found}, replicate 0 has dim {expected}")]
    DimMismatchAcrossReplicates {
        corpus: String,
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("corpus `{corpus}`: replicates share no concepts")]
    EmptySharedVocabulary { corpus: String },
    #[error("invalid corpus id `{0}` (use letters, digits, '.', '_' or '-')")]
    InvalidCorpusId(String),
    #[error("terminology: {malformed} of {total} rows malformed")]
    TerminologyMostlyMalformed { malformed: usize, total: usize },
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// Identifier of a concept: non-empty, free of whitespace, compared bytewise.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(IngestError::InvalidConceptId(id));
        }
        Ok(ConceptId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ConceptId {
    type Error = IngestError;
    fn try_from(value: String) -> Result<Self> {
        ConceptId::new(value)
    }
}

impl From<ConceptId> for String {
    fn from(id: ConceptId) -> String {
        id.0
    }
}

impl Borrow<str> for ConceptId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for ConceptId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Corpus ids double as directory names in snapshots.
pub fn validate_corpus_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(IngestError::InvalidCorpusId(id.to_string()))
    }
}

/// One trained embedding matrix for one corpus.
///
/// Vectors are stored row-major in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingReplicate {
    corpus_id: String,
    replicate_index: usize,
    dim: usize,
    ids: Vec<ConceptId>,
    data: Vec<f32>,
    rows: HashMap<ConceptId, usize>,
}

impl EmbeddingReplicate {
    /// Builds a replicate from explicit `(id, vector)` pairs, enforcing the
    /// same invariants as the parser.
    pub fn from_vectors<I>(dim: usize, vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ConceptId, Vec<f32>)>,
    {
        if dim == 0 {
            return Err(IngestError::HeaderMalformed {
                line: 1,
                reason: "dimension must be positive".into(),
            });
        }
        let mut rep = EmbeddingReplicate::empty(dim);
        for (i, (id, v)) in vectors.into_iter().enumerate() {
            let line = i + 2;
            if v.len() != dim {
                return Err(IngestError::DimensionMismatch {
                    line,
                    expected: dim,
                    found: v.len(),
                });
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(IngestError::NonFiniteValue {
                    line,
                    value: bad.to_string(),
                });
            }
            rep.push(line, id, &v)?;
        }
        Ok(rep)
    }

    fn empty(dim: usize) -> Self {
        EmbeddingReplicate {
            corpus_id: String::new(),
            replicate_index: 0,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            rows: HashMap::new(),
        }
    }

    fn push(&mut self, line: usize, id: ConceptId, v: &[f32]) -> Result<()> {
        if v.iter().all(|&x| x == 0.0) {
            return Err(IngestError::ZeroVector {
                line,
                token: id.0,
            });
        }
        if self.rows.contains_key(&id) {
            return Err(IngestError::DuplicateToken { line, token: id.0 });
        }
        self.rows.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn corpus_id(&self) -> &str {
        &self.corpus_id
    }

    pub fn replicate_index(&self) -> usize {
        self.replicate_index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concept ids in file order.
    pub fn ids(&self) -> &[ConceptId] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.rows
            .get(id)
            .map(|&r| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ConceptId, &[f32])> {
        self.ids.iter().zip(self.data.chunks_exact(self.dim))
    }

    /// Multiplies every component by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= factor);
        out
    }

    pub(crate) fn with_origin(mut self, corpus_id: &str, replicate_index: usize) -> Self {
        self.corpus_id = corpus_id.to_string();
        self.replicate_index = replicate_index;
        self
    }

    /// Writes the replicate in word2vec text format, 6 significant digits.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for (id, v) in self.iter() {
            out.write_all(id.as_str().as_bytes())?;
            for x in v {
                write!(out, " {}", format_sig6(*x))?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ids and numbers are UTF-8")
    }
}

/// Formats with 6 significant digits, trimming redundant zeros.
pub(crate) fn format_sig6(x: f32) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let s = format!("{:.5e}", x);
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..7).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, x);
        trim_zeros(&fixed)
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Parses one word2vec text file.
pub fn parse_embedding_file<R: Read>(
    source: R,
    expected_dim: Option<usize>,
) -> Result<EmbeddingReplicate> {
    let mut lines = BufReader::new(source).split(b'\n');
    let header = match lines.next() {
        Some(l) => l.map_err(|e| io_err("<stream>", e))?,
        None => {
            return Err(IngestError::HeaderMalformed {
                line: 1,
                reason: "empty input".into(),
            })
        }
    };
    let header = utf8_line(header, 1)?;
    let mut fields = header.split_whitespace();
    let parse_field = |f: Option<&str>, what: &str| -> Result<usize> {
        f.and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| IngestError::HeaderMalformed {
                line: 1,
                reason: format!("missing or invalid {what}"),
            })
    };
    let count = parse_field(fields.next(), "count")?;
    let dim = parse_field(fields.next(), "dimension")?;
    if fields.next().is_some() {
        return Err(IngestError::HeaderMalformed {
            line: 1,
            reason: "expected exactly two fields".into(),
        });
    }
    if dim == 0 {
        return Err(IngestError::HeaderMalformed {
            line: 1,
            reason: "dimension must be positive".into(),
        });
    }
    if let Some(exp) = expected_dim {
        if exp != dim {
            return Err(IngestError::DimensionMismatch {
                line: 1,
                expected: exp,
                found: dim,
            });
        }
    }

    let mut rep = EmbeddingReplicate::empty(dim);
    let mut row = Vec::with_capacity(dim);
    let mut found = 0usize;
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        let raw = raw.map_err(|e| io_err("<stream>", e))?;
        let text = utf8_line(raw, line_no)?;
        if text.trim().is_empty() {
            continue;
        }
        found += 1;
        if found > count {
            continue;
        }
        let mut fields = text.split_whitespace();
        let token = fields.next().expect("non-empty line has a first field");
        let id = ConceptId::new(token)?;
        row.clear();
        for f in fields {
            let v: f32 = f.parse().map_err(|_| IngestError::NonFiniteValue {
                line: line_no,
                value: f.to_string(),
            })?;
            if !v.is_finite() {
                return Err(IngestError::NonFiniteValue {
                    line: line_no,
                    value: f.to_string(),
                });
            }
            row.push(v);
        }
        if row.len() != dim {
            return Err(IngestError::DimensionMismatch {
                line: line_no,
                expected: dim,
                found: row.len(),
            });
        }
        rep.push(line_no, id, &row)?;
    }
    if found != count {
        return Err(IngestError::CountMismatch {
            declared: count,
            found,
        });
    }
    Ok(rep)
}

fn utf8_line(mut raw: Vec<u8>, line: usize) -> Result<String> {
    if raw.last() == Some(&b'\r') {
        raw.pop();
    }
    String::from_utf8(raw).map_err(|_| IngestError::InvalidUtf8 { line })
}

fn io_err(path: impl Into<PathBuf>, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.into(),
        source,
    }
}

pub fn parse_embedding_path(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingReplicate> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_embedding_file(file, expected_dim).map_err(|e| match e {
        e @ IngestError::Io { .. } => e,
        other => IngestError::InFile {
            file: path.to_path_buf(),
            source: Box::new(other),
        },
    })
}

/// Per-replicate vocabulary sizes and the size of their intersection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyReport {
    pub replicate_sizes: Vec<usize>,
    pub shared: usize,
}

/// All replicates trained on one corpus.
#[derive(Debug, Clone)]
pub struct ReplicateSet {
    corpus_id: String,
    label: String,
    order_index: i64,
    replicates: Vec<EmbeddingReplicate>,
    shared: Vec<ConceptId>,
    report: VocabularyReport,
}

impl ReplicateSet {
    /// Assembles a set; `replicate_index` follows the order of `replicates`.
    pub fn new(
        corpus_id: impl Into<String>,
        label: impl Into<String>,
        order_index: i64,
        replicates: Vec<EmbeddingReplicate>,
    ) -> Result<Self> {
        let corpus_id = corpus_id.into();
        validate_corpus_id(&corpus_id)?;
        if replicates.len() < 2 {
            return Err(IngestError::TooFewReplicates {
                corpus: corpus_id,
                found: replicates.len(),
            });
        }
        let dim = replicates[0].dim();
        if let Some((index, r)) = replicates.iter().enumerate().find(|(_, r)| r.dim() != dim) {
            return Err(IngestError::DimMismatchAcrossReplicates {
                corpus: corpus_id,
                index,
                expected: dim,
                found: r.dim(),
            });
        }
        let replicates: Vec<_> = replicates
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.with_origin(&corpus_id, i))
            .collect();
        let mut shared: Vec<ConceptId> = replicates[0]
            .ids()
            .iter()
            .filter(|id| replicates[1..].iter().all(|r| r.contains(id.as_str())))
            .cloned()
            .collect();
        if shared.is_empty() {
            return Err(IngestError::EmptySharedVocabulary { corpus: corpus_id });
        }
        shared.sort();
        let report = VocabularyReport {
            replicate_sizes: replicates.iter().map(|r| r.len()).collect(),
            shared: shared.len(),
        };
        Ok(ReplicateSet {
            corpus_id,
            label: label.into(),
            order_index,
            replicates,
            shared,
            report,
        })
    }

    pub fn corpus_id(&self) -> &str {
        &self.corpus_id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn order_index(&self) -> i64 {
        self.order_index
    }

    pub fn replicates(&self) -> &[EmbeddingReplicate] {
        &self.replicates
    }

    pub fn m(&self) -> usize {
        self.replicates.len()
    }

    pub fn dim(&self) -> usize {
        self.replicates[0].dim()
    }

    /// Concepts present in every replicate, ascending by id.
    pub fn shared_vocabulary(&self) -> &[ConceptId] {
        &self.shared
    }

    pub fn is_shared(&self, id: &str) -> bool {
        self.shared
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .is_ok()
    }

    pub fn vocabulary_report(&self) -> &VocabularyReport {
        &self.report
    }

    /// Component-wise mean of a concept's vectors across replicates.
    pub fn mean_vector(&self, id: &str) -> Option<Vec<f64>> {
        let mut acc = vec![0.0f64; self.dim()];
        for r in &self.replicates {
            let v = r.get(id)?;
            acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
        }
        let m = self.m() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
        Some(acc)
    }
}

/// Loads every file in parallel, then assembles the set in path order.
pub fn load_replicate_set<P: AsRef<Path> + Sync>(
    paths: &[P],
    corpus_id: &str,
    label: &str,
    order_index: i64,
) -> Result<ReplicateSet> {
    validate_corpus_id(corpus_id)?;
    if paths.len() < 2 {
        return Err(IngestError::TooFewReplicates {
            corpus: corpus_id.to_string(),
            found: paths.len(),
        });
    }
    let replicates = paths
        .par_iter()
        .map(|p| parse_embedding_path(p.as_ref(), None))
        .collect::<Result<Vec<_>>>()?;
    ReplicateSet::new(corpus_id, label, order_index, replicates)
}

/// Descriptive metadata for one concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMetadata {
    pub id: ConceptId,
    pub preferred_term: String,
    pub synonyms: Vec<String>,
    pub semantic_group: String,
    pub definitions: Vec<String>,
}

impl ConceptMetadata {
    /// Placeholder for a concept the terminology does not describe.
    pub fn synthesized(id: &ConceptId) -> Self {
        ConceptMetadata {
            id: id.clone(),
            preferred_term: id.to_string(),
            synonyms: Vec::new(),
            semantic_group: UNKNOWN_GROUP.to_string(),
            definitions: Vec::new(),
        }
    }

    fn absorb(&mut self, synonyms: Vec<String>, group: &str, definition: Option<String>) {
        for s in synonyms {
            if !self.synonyms.contains(&s) {
                self.synonyms.push(s);
            }
        }
        if self.semantic_group == UNKNOWN_GROUP && !group.is_empty() {
            self.semantic_group = group.to_string();
        }
        if let Some(d) = definition {
            if !self.definitions.contains(&d) {
                self.definitions.push(d);
            }
        }
    }
}

/// A skipped terminology row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedRow {
    pub line: usize,
    pub reason: String,
}

/// Parsed terminology plus the rows that were skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Terminology {
    pub entries: BTreeMap<ConceptId, ConceptMetadata>,
    pub malformed: Vec<MalformedRow>,
}

impl Terminology {
    /// Entry for `id`, or synthesized metadata when the terminology lacks it.
    pub fn metadata_for(&self, id: &ConceptId) -> ConceptMetadata {
        self.entries
            .get(id)
            .cloned()
            .unwrap_or_else(|| ConceptMetadata::synthesized(id))
    }

    /// Folds another terminology into this one with the same merge rules as
    /// repeated rows.
    pub fn merge(&mut self, other: Terminology) {
        for (id, meta) in other.entries {
            match self.entries.get_mut(&id) {
                Some(existing) => {
                    existing.absorb(meta.synonyms, &meta.semantic_group, None);
                    for d in meta.definitions {
                        existing.absorb(Vec::new(), "", Some(d));
                    }
                }
                None => {
                    self.entries.insert(id, meta);
                }
            }
        }
        self.malformed.extend(other.malformed);
    }

    /// Metadata for each id, synthesizing entries the terminology lacks.
    pub fn resolve<'a, I>(&self, ids: I) -> BTreeMap<ConceptId, ConceptMetadata>
    where
        I: IntoIterator<Item = &'a ConceptId>,
    {
        ids.into_iter()
            .map(|id| (id.clone(), self.metadata_for(id)))
            .collect()
    }
}

/// Parses a terminology TSV. Malformed rows are skipped and reported; the
/// parse fails only when more than half of the rows are malformed.
pub fn parse_terminology<R: Read>(source: R) -> Result<Terminology> {
    let mut term = Terminology::default();
    let mut total = 0usize;
    for (i, raw) in BufReader::new(source).split(b'\n').enumerate() {
        let line = i + 1;
        let raw = raw.map_err(|e| io_err("<stream>", e))?;
        let text = match utf8_line(raw, line) {
            Ok(t) => t,
            Err(_) => {
                total += 1;
                term.malformed.push(MalformedRow {
                    line,
                    reason: "invalid UTF-8".into(),
                });
                continue;
            }
        };
        if text.trim().is_empty() {
            continue;
        }
        total += 1;
        if let Err(reason) = parse_terminology_row(&text, &mut term.entries) {
            log::warn!("terminology line {line}: {reason}; row skipped");
            term.malformed.push(MalformedRow { line, reason });
        }
    }
    if total > 0 && term.malformed.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(IngestError::TerminologyMostlyMalformed {
            malformed: term.malformed.len(),
            total,
        });
    }
    Ok(term)
}

fn parse_terminology_row(
    text: &str,
    entries: &mut BTreeMap<ConceptId, ConceptMetadata>,
) -> std::result::Result<(), String> {
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != 5 {
        return Err(format!("expected 5 columns, found {}", cols.len()));
    }
    let id = ConceptId::new(cols[0].trim()).map_err(|e| e.to_string())?;
    let preferred = cols[1].trim();
    if preferred.is_empty() {
        return Err("empty preferred term".into());
    }
    let mut synonyms: Vec<String> = Vec::new();
    for s in cols[2].split('|').map(str::trim).filter(|s| !s.is_empty()) {
        if !synonyms.iter().any(|x| x == s) {
            synonyms.push(s.to_string());
        }
    }
    let group = cols[3].trim();
    let definition = Some(cols[4].trim())
        .filter(|d| !d.is_empty())
        .map(str::to_string);
    let entry = entries
        .entry(id.clone())
        .or_insert_with(|| ConceptMetadata {
            id,
            preferred_term: preferred.to_string(),
            synonyms: Vec::new(),
            semantic_group: UNKNOWN_GROUP.to_string(),
            definitions: Vec::new(),
        });
    entry.absorb(synonyms, group, definition);
    Ok(())
}

pub fn parse_terminology_path(path: &Path) -> Result<Terminology> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_terminology(file).map_err(|e| match e {
        e @ IngestError::Io { .. } => e,
        other => IngestError::InFile {
            file: path.to_path_buf(),
            source: Box::new(other),
        },
    })
}

/// Ids in the union of several id lists, ascending.
pub fn union_ids<'a, I>(lists: I) -> BTreeSet<ConceptId>
where
    I: IntoIterator<Item = &'a [ConceptId]>,
{
    lists.into_iter().flatten().cloned().collect()
}
