//! On-disk snapshot of everything the service needs.
//!
//! ```text
//! <root>/
//!   manifest.json          format version, corpus descriptors, sha256 per file
//!   concepts.json          concept metadata keyed by id
//!   corpora/<id>/
//!     confidence.json      EC@k per shared-vocabulary concept
//!     neighbors.json       aggregate neighbor tables keyed by concept
//!     projection.json      aligned 2-D frame
//!     vectors.idx.json     concept -> per-replicate float offsets
//!     vectors.f32          little-endian f32, replicate-major, then concept, then component
//! ```
//!
//! JSON files have recursively sorted keys and shortest round-trip floats.
//! Writes go to a sibling temporary directory that is renamed into place.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{validate_corpus_id, ConceptId, ConceptMetadata};
use crate::projection::ProjectionFrame;
use crate::similarity::ReplicateVectors;
use crate::stability::{ConfidenceRecord, NeighborRow, NeighborTable};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const CONCEPTS: &str = "concepts.json";
const CORPUS_FILES: [&str; 5] = [
    "confidence.json",
    "neighbors.json",
    "projection.json",
    "vectors.idx.json",
    "vectors.f32",
];

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("snapshot inconsistent: {0}")]
    ConsistencyViolation(String),
    #[error("unsupported snapshot format version {found} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("digest mismatch for {file}")]
    DigestMismatch { file: String },
    #[error("missing snapshot file {0}")]
    MissingFile(String),
    #[error("{file}: {message}")]
    Malformed { file: String, message: String },
}

pub type Result<T, E = SnapshotError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn violation(msg: impl Into<String>) -> SnapshotError {
    SnapshotError::ConsistencyViolation(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneSettings {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDescriptor {
    pub id: String,
    pub label: String,
    pub order_index: i64,
    /// Size of the shared (all-replicate) vocabulary.
    pub vocab_size: usize,
    pub high_conf_count: usize,
    pub m: usize,
    pub dim: usize,
    pub k: usize,
    pub threshold: f64,
    pub n_neighbors: usize,
    pub tsne: TsneSettings,
}

/// Per-replicate vectors for a subset of a corpus's concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredVectors {
    pub corpus_id: String,
    pub m: usize,
    pub dim: usize,
    /// Ascending.
    pub ids: Vec<ConceptId>,
    /// Replicate-major, then concept in `ids` order, then component.
    pub data: Vec<f32>,
}

impl StoredVectors {
    /// Collects vectors of `ids` from every replicate of a corpus.
    pub fn gather<V: ReplicateVectors + ?Sized>(source: &V, dim: usize, ids: &BTreeSet<ConceptId>) -> Self {
        let m = source.replicate_count();
        let ids: Vec<ConceptId> = ids.iter().filter(|id| source.contains(id.as_str())).cloned().collect();
        let mut data = Vec::with_capacity(m * ids.len() * dim);
        for r in 0..m {
            for id in &ids {
                data.extend_from_slice(source.vector(r, id.as_str()).expect("contained"));
            }
        }
        StoredVectors {
            corpus_id: source.corpus_id().to_string(),
            m,
            dim,
            ids,
            data,
        }
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|p| p.as_str().cmp(id)).ok()
    }

    fn offset(&self, replicate: usize, j: usize) -> usize {
        (replicate * self.ids.len() + j) * self.dim
    }
}

impl ReplicateVectors for StoredVectors {
    fn corpus_id(&self) -> &str {
        &self.corpus_id
    }

    fn replicate_count(&self) -> usize {
        self.m
    }

    fn contains(&self, id: &str) -> bool {
        self.position(id).is_some()
    }

    fn vector(&self, replicate: usize, id: &str) -> Option<&[f32]> {
        if replicate >= self.m {
            return None;
        }
        let o = self.offset(replicate, self.position(id)?);
        Some(&self.data[o..o + self.dim])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPayload {
    pub descriptor: CorpusDescriptor,
    /// One record per shared-vocabulary concept, ascending by id.
    pub confidence: Vec<ConfidenceRecord>,
    /// Keyed by target concept.
    pub neighbors: BTreeMap<ConceptId, NeighborTable>,
    pub projection: ProjectionFrame,
    pub vectors: StoredVectors,
}

impl CorpusPayload {
    pub fn high_confidence(&self) -> BTreeSet<ConceptId> {
        self.confidence
            .iter()
            .filter(|r| r.high_confidence)
            .map(|r| r.concept.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub format_version: u32,
    pub concepts: BTreeMap<ConceptId, ConceptMetadata>,
    /// Ordered by `order_index`, then id.
    pub corpora: Vec<CorpusPayload>,
}

impl Default for Snapshot {
    fn default() -> Self {
        Snapshot {
            format_version: FORMAT_VERSION,
            concepts: BTreeMap::new(),
            corpora: Vec::new(),
        }
    }
}

impl Snapshot {
    /// Concepts high-confidence in at least one corpus.
    pub fn selectable(&self) -> BTreeSet<ConceptId> {
        self.corpora.iter().flat_map(|c| c.high_confidence()).collect()
    }

    /// Metadata for `id`, synthesized when the snapshot has none.
    pub fn metadata(&self, id: &ConceptId) -> ConceptMetadata {
        self.concepts
            .get(id)
            .cloned()
            .unwrap_or_else(|| ConceptMetadata::synthesized(id))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(SnapshotError::UnsupportedVersion {
                found: self.format_version,
            });
        }
        for (id, meta) in &self.concepts {
            if &meta.id != id || meta.preferred_term.is_empty() {
                return Err(violation(format!("metadata entry `{id}` is malformed")));
            }
        }
        let mut seen = BTreeSet::new();
        for w in self.corpora.windows(2) {
            let (a, b) = (&w[0].descriptor, &w[1].descriptor);
            if (a.order_index, &a.id) > (b.order_index, &b.id) {
                return Err(violation("corpora are not ordered by order_index"));
            }
        }
        let selectable = self.selectable();
        for c in &self.corpora {
            validate_corpus_id(&c.descriptor.id).map_err(|e| violation(e.to_string()))?;
            if !seen.insert(c.descriptor.id.as_str()) {
                return Err(violation(format!("duplicate corpus `{}`", c.descriptor.id)));
            }
            self.validate_corpus(c, &selectable)?;
        }
        Ok(())
    }

    fn validate_corpus(&self, c: &CorpusPayload, selectable: &BTreeSet<ConceptId>) -> Result<()> {
        let d = &c.descriptor;
        let id = d.id.as_str();
        let vocab: BTreeSet<&ConceptId> = c.confidence.iter().map(|r| &r.concept).collect();
        if vocab.len() != c.confidence.len() || vocab.len() != d.vocab_size {
            return Err(violation(format!(
                "{id}: {} confidence records for vocabulary of {}",
                c.confidence.len(),
                d.vocab_size
            )));
        }
        for r in &c.confidence {
            if r.corpus_id != id || r.k != d.k || !(0.0..=1.0).contains(&r.ec) {
                return Err(violation(format!("{id}: bad confidence record for `{}`", r.concept)));
            }
            if r.high_confidence != (r.ec >= d.threshold) {
                return Err(violation(format!("{id}: flag disagrees with threshold for `{}`", r.concept)));
            }
        }
        let hiconf = c.high_confidence();
        if hiconf.len() != d.high_conf_count {
            return Err(violation(format!(
                "{id}: high_conf_count {} but {} records are high-confidence",
                d.high_conf_count,
                hiconf.len()
            )));
        }
        // Metadata may be synthesized for any concept in this corpus's vocabulary.
        let resolves = |cid: &ConceptId| self.concepts.contains_key(cid) || vocab.contains(cid);
        for (target, table) in &c.neighbors {
            if &table.concept != target || table.corpus_id != id || !resolves(target) {
                return Err(violation(format!("{id}: neighbor table `{target}` does not resolve")));
            }
            for row in &table.rows {
                if !resolves(&row.neighbor) {
                    return Err(violation(format!(
                        "{id}: neighbor `{}` of `{target}` has no metadata",
                        row.neighbor
                    )));
                }
                if !hiconf.contains(&row.neighbor) {
                    return Err(violation(format!(
                        "{id}: neighbor `{}` of `{target}` is not high-confidence",
                        row.neighbor
                    )));
                }
            }
        }
        let projected: BTreeSet<ConceptId> = c.projection.points.keys().cloned().collect();
        if projected != hiconf || c.projection.corpus_id != id {
            return Err(violation(format!("{id}: projection does not cover the high-confidence set")));
        }
        let v = &c.vectors;
        let expected: Vec<&ConceptId> = selectable.iter().filter(|s| vocab.contains(s)).collect();
        if v.ids.iter().collect::<Vec<_>>() != expected {
            return Err(violation(format!(
                "{id}: stored vectors must cover selectable concepts in the vocabulary"
            )));
        }
        if v.corpus_id != id || v.m != d.m || v.dim != d.dim || v.data.len() != v.m * v.ids.len() * v.dim {
            return Err(violation(format!("{id}: vector block shape mismatch")));
        }
        Ok(())
    }
}

/// Recursively key-sorted JSON with a trailing newline.
fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    fn sort(v: Value) -> Value {
        match v {
            Value::Object(map) => {
                let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort(v))).collect();
                let mut out = Map::new();
                for (k, v) in sorted {
                    out.insert(k, v);
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.into_iter().map(sort).collect()),
            other => other,
        }
    }
    let value = serde_json::to_value(value).expect("snapshot types serialize to JSON");
    let mut bytes = serde_json::to_vec_pretty(&sort(value)).expect("JSON values serialize");
    bytes.push(b'\n');
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    created_unix: u64,
    corpora: Vec<CorpusDescriptor>,
    /// Relative path -> sha256 hex.
    files: BTreeMap<String, String>,
    /// sha256 over the canonical `files` map.
    content_digest: String,
}

#[derive(Serialize, Deserialize)]
struct ConfidenceEntry {
    concept: ConceptId,
    ec: f64,
    high_confidence: bool,
}

#[derive(Serialize, Deserialize)]
struct ConfidenceFile {
    corpus_id: String,
    k: usize,
    threshold: f64,
    records: Vec<ConfidenceEntry>,
}

#[derive(Serialize, Deserialize)]
struct NeighborsFile {
    corpus_id: String,
    n: usize,
    tables: BTreeMap<ConceptId, Vec<NeighborRow>>,
}

#[derive(Serialize, Deserialize)]
struct VectorIndexFile {
    corpus_id: String,
    m: usize,
    dim: usize,
    count: usize,
    /// Concept -> float offset of its vector in each replicate.
    offsets: BTreeMap<ConceptId, Vec<usize>>,
}

fn corpus_files(c: &CorpusPayload) -> Vec<(String, Vec<u8>)> {
    let d = &c.descriptor;
    let dir = format!("corpora/{}", d.id);
    let confidence = ConfidenceFile {
        corpus_id: d.id.clone(),
        k: d.k,
        threshold: d.threshold,
        records: c
            .confidence
            .iter()
            .map(|r| ConfidenceEntry {
                concept: r.concept.clone(),
                ec: r.ec,
                high_confidence: r.high_confidence,
            })
            .collect(),
    };
    let neighbors = NeighborsFile {
        corpus_id: d.id.clone(),
        n: d.n_neighbors,
        tables: c
            .neighbors
            .iter()
            .map(|(id, t)| (id.clone(), t.rows.clone()))
            .collect(),
    };
    let v = &c.vectors;
    let index = VectorIndexFile {
        corpus_id: d.id.clone(),
        m: v.m,
        dim: v.dim,
        count: v.ids.len(),
        offsets: v
            .ids
            .iter()
            .enumerate()
            .map(|(j, id)| (id.clone(), (0..v.m).map(|r| v.offset(r, j)).collect()))
            .collect(),
    };
    let mut block = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        block.extend_from_slice(&x.to_le_bytes());
    }
    vec![
        (format!("{dir}/confidence.json"), canonical_json(&confidence)),
        (format!("{dir}/neighbors.json"), canonical_json(&neighbors)),
        (format!("{dir}/projection.json"), canonical_json(&c.projection)),
        (format!("{dir}/vectors.idx.json"), canonical_json(&index)),
        (format!("{dir}/vectors.f32"), block),
    ]
}

/// Digest identifying snapshot content, independent of creation time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestDigest(pub String);

/// Validates `snapshot` and writes it to `root`, replacing any previous
/// snapshot there.
pub fn write_snapshot(root: &Path, snapshot: &Snapshot) -> Result<ManifestDigest> {
    snapshot.validate()?;

    let mut files: Vec<(String, Vec<u8>)> = vec![(CONCEPTS.to_string(), canonical_json(&snapshot.concepts))];
    for c in &snapshot.corpora {
        files.extend(corpus_files(c));
    }
    let digests: BTreeMap<String, String> = files
        .iter()
        .map(|(name, bytes)| (name.clone(), sha256_hex(bytes)))
        .collect();
    let content_digest = sha256_hex(&canonical_json(&digests));
    let manifest = Manifest {
        format_version: snapshot.format_version,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        corpora: snapshot.corpora.iter().map(|c| c.descriptor.clone()).collect(),
        files: digests,
        content_digest: content_digest.clone(),
    };
    files.push((MANIFEST.to_string(), canonical_json(&manifest)));

    let parent = match root.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let name = root
        .file_name()
        .ok_or_else(|| violation(format!("{} has no directory name", root.display())))?
        .to_string_lossy()
        .into_owned();
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let tmp = parent.join(format!(".{name}.tmp-{}-{stamp}", std::process::id()));
    let result = write_tree(&tmp, &files).and_then(|()| swap_into_place(&tmp, root, &parent, &name, stamp));
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result.map(|()| ManifestDigest(content_digest))
}

fn write_tree(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    for (rel, bytes) in files {
        let path = dir.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(io_err(p))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

fn swap_into_place(tmp: &Path, root: &Path, parent: &Path, name: &str, stamp: u128) -> Result<()> {
    if root.exists() {
        let old = parent.join(format!(".{name}.old-{}-{stamp}", std::process::id()));
        fs::rename(root, &old).map_err(io_err(root))?;
        if let Err(e) = fs::rename(tmp, root) {
            let _ = fs::rename(&old, root);
            return Err(io_err(root)(e));
        }
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    } else {
        fs::rename(tmp, root).map_err(io_err(root))?;
    }
    Ok(())
}

struct VerifiedFiles<'a> {
    root: &'a Path,
    digests: &'a BTreeMap<String, String>,
}

impl VerifiedFiles<'_> {
    fn bytes(&self, rel: &str) -> Result<Vec<u8>> {
        let expected = self
            .digests
            .get(rel)
            .ok_or_else(|| SnapshotError::MissingFile(rel.to_string()))?;
        let path = self.root.join(rel);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(SnapshotError::MissingFile(rel.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        if &sha256_hex(&bytes) != expected {
            return Err(SnapshotError::DigestMismatch { file: rel.to_string() });
        }
        Ok(bytes)
    }

    fn json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let bytes = self.bytes(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| SnapshotError::Malformed {
            file: rel.to_string(),
            message: e.to_string(),
        })
    }
}

/// Reads, digest-checks and validates the snapshot at `root`.
pub fn read_snapshot(root: &Path) -> Result<Snapshot> {
    let manifest_path = root.join(MANIFEST);
    let raw = match fs::read(&manifest_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(SnapshotError::MissingFile(manifest_path.display().to_string()))
        }
        Err(e) => return Err(io_err(&manifest_path)(e)),
    };
    let header: Value = serde_json::from_slice(&raw).map_err(|e| SnapshotError::Malformed {
        file: MANIFEST.into(),
        message: e.to_string(),
    })?;
    let version = header.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(SnapshotError::UnsupportedVersion { found: version });
    }
    let manifest: Manifest = serde_json::from_value(header).map_err(|e| SnapshotError::Malformed {
        file: MANIFEST.into(),
        message: e.to_string(),
    })?;
    if sha256_hex(&canonical_json(&manifest.files)) != manifest.content_digest {
        return Err(SnapshotError::DigestMismatch { file: MANIFEST.into() });
    }
    let files = VerifiedFiles {
        root,
        digests: &manifest.files,
    };
    let concepts: BTreeMap<ConceptId, ConceptMetadata> = files.json(CONCEPTS)?;

    let mut corpora = Vec::with_capacity(manifest.corpora.len());
    for d in manifest.corpora {
        let dir = format!("corpora/{}", d.id);
        for f in CORPUS_FILES {
            if !manifest.files.contains_key(&format!("{dir}/{f}")) {
                return Err(SnapshotError::MissingFile(format!("{dir}/{f}")));
            }
        }
        corpora.push(read_corpus(&files, &dir, d)?);
    }
    let snapshot = Snapshot {
        format_version: manifest.format_version,
        concepts,
        corpora,
    };
    snapshot.validate()?;
    Ok(snapshot)
}

fn read_corpus(files: &VerifiedFiles<'_>, dir: &str, d: CorpusDescriptor) -> Result<CorpusPayload> {
    let malformed = |file: &str, message: String| SnapshotError::Malformed {
        file: format!("{dir}/{file}"),
        message,
    };
    let conf: ConfidenceFile = files.json(&format!("{dir}/confidence.json"))?;
    if conf.corpus_id != d.id || conf.k != d.k || conf.threshold != d.threshold {
        return Err(malformed("confidence.json", "header disagrees with manifest".into()));
    }
    let confidence = conf
        .records
        .into_iter()
        .map(|e| ConfidenceRecord {
            corpus_id: d.id.clone(),
            concept: e.concept,
            ec: e.ec,
            k: d.k,
            high_confidence: e.high_confidence,
        })
        .collect();

    let nb: NeighborsFile = files.json(&format!("{dir}/neighbors.json"))?;
    if nb.corpus_id != d.id || nb.n != d.n_neighbors {
        return Err(malformed("neighbors.json", "header disagrees with manifest".into()));
    }
    let neighbors = nb
        .tables
        .into_iter()
        .map(|(concept, rows)| {
            let table = NeighborTable {
                corpus_id: d.id.clone(),
                concept: concept.clone(),
                n: nb.n,
                rows,
            };
            (concept, table)
        })
        .collect();

    let projection: ProjectionFrame = files.json(&format!("{dir}/projection.json"))?;

    let idx: VectorIndexFile = files.json(&format!("{dir}/vectors.idx.json"))?;
    let block = files.bytes(&format!("{dir}/vectors.f32"))?;
    if block.len() % 4 != 0 || block.len() / 4 != idx.m * idx.count * idx.dim || idx.offsets.len() != idx.count {
        return Err(malformed("vectors.f32", "size disagrees with vectors.idx.json".into()));
    }
    let flat: Vec<f32> = block
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let ids: Vec<ConceptId> = idx.offsets.keys().cloned().collect();
    let mut data = Vec::with_capacity(flat.len());
    for r in 0..idx.m {
        for id in &ids {
            let offs = &idx.offsets[id];
            let o = *offs
                .get(r)
                .ok_or_else(|| malformed("vectors.idx.json", format!("`{id}` lacks replicate {r}")))?;
            let row = flat
                .get(o..o + idx.dim)
                .ok_or_else(|| malformed("vectors.idx.json", format!("offset {o} out of range")))?;
            data.extend_from_slice(row);
        }
    }
    let vectors = StoredVectors {
        corpus_id: idx.corpus_id,
        m: idx.m,
        dim: idx.dim,
        ids,
        data,
    };
    Ok(CorpusPayload {
        descriptor: d,
        confidence,
        neighbors,
        projection,
        vectors,
    })
}
