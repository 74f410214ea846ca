//! Workspace registration and the compute pipeline that turns registered
//! corpora into a snapshot.
//!
//! A workspace is a directory holding `workspace.json`, which lists each
//! corpus with the embedding and terminology files it was ingested from.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    load_replicate_set, parse_terminology_path, validate_corpus_id, ConceptId, IngestError, ReplicateSet,
    Terminology, VocabularyReport,
};
use crate::projection::{align_chain, tsne_project, Point2, ProjectionFrame, ProjectionWarning, TsneParams};
use crate::snapshot::{
    write_snapshot, CorpusDescriptor, CorpusPayload, ManifestDigest, Snapshot, SnapshotError, StoredVectors,
    TsneSettings, FORMAT_VERSION,
};
use crate::stability::{HighConfidence, SharedIndex, StabilityError};

pub const WORKSPACE_FILE: &str = "workspace.json";
const WORKSPACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed workspace descriptor: {message}", path.display())]
    WorkspaceMalformed { path: PathBuf, message: String },
    #[error("no corpora registered in {}", .0.display())]
    NoCorpora(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corpus `{corpus}`, {stage}: {source}")]
    Ingest {
        corpus: String,
        stage: Stage,
        #[source]
        source: IngestError,
    },
    #[error("corpus `{corpus}`, {stage}: {message}")]
    Compute {
        corpus: String,
        stage: Stage,
        message: String,
    },
    #[error("writing snapshot: {0}")]
    Snapshot(#[from] SnapshotError),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Internal,
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::InvalidArgument(_) => ErrorClass::Usage,
            PipelineError::Io { .. } => ErrorClass::Internal,
            PipelineError::Snapshot(SnapshotError::Io { .. }) => ErrorClass::Internal,
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Terminology,
    Stability,
    Neighbors,
    Projection,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "ingest",
            Stage::Terminology => "terminology",
            Stage::Stability => "stability",
            Stage::Neighbors => "neighbor tables",
            Stage::Projection => "projection",
        })
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One registered corpus. Paths are stored canonicalized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub label: String,
    pub order_index: i64,
    pub embeddings: Vec<PathBuf>,
    pub terminology: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub format_version: u32,
    /// Ordered by `order_index`, then id.
    pub corpora: Vec<CorpusEntry>,
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            format_version: WORKSPACE_VERSION,
            corpora: Vec::new(),
        }
    }
}

impl Workspace {
    /// Reads the descriptor in `dir`; a missing descriptor is an empty workspace.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(WORKSPACE_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Workspace::default()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let ws: Workspace = serde_json::from_slice(&bytes).map_err(|e| PipelineError::WorkspaceMalformed {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if ws.format_version != WORKSPACE_VERSION {
            return Err(PipelineError::WorkspaceMalformed {
                path,
                message: format!("unsupported version {}", ws.format_version),
            });
        }
        Ok(ws)
    }

    /// Writes the descriptor through a temporary file and rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(WORKSPACE_FILE);
        let tmp = dir.join(format!(".{WORKSPACE_FILE}.tmp-{}", std::process::id()));
        let mut bytes = serde_json::to_vec_pretty(self).expect("workspace serializes");
        bytes.push(b'\n');
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Adds `entry`, replacing any corpus with the same id. Returns true on
    /// replacement.
    pub fn register(&mut self, entry: CorpusEntry) -> bool {
        let before = self.corpora.len();
        self.corpora.retain(|c| c.id != entry.id);
        let replaced = self.corpora.len() != before;
        self.corpora.push(entry);
        self.corpora
            .sort_by(|a, b| (a.order_index, &a.id).cmp(&(b.order_index, &b.id)));
        replaced
    }
}

/// Arguments to [`ingest`].
#[derive(Debug, Clone)]
pub struct IngestRequest {
    pub corpus_id: String,
    pub label: String,
    pub order_index: i64,
    pub embeddings: Vec<PathBuf>,
    pub terminology: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub entry: CorpusEntry,
    pub replaced: bool,
    pub report: VocabularyReport,
    pub m: usize,
    pub dim: usize,
    /// Terminology rows skipped as malformed, with line numbers.
    pub malformed_rows: Vec<(usize, String)>,
}

/// Validates the inputs and registers them in the workspace at `dir`.
pub fn ingest(dir: &Path, req: IngestRequest) -> Result<IngestOutcome> {
    let corpus = req.corpus_id.clone();
    let ingest_err = |stage| {
        let corpus = corpus.clone();
        move |source| PipelineError::Ingest { corpus, stage, source }
    };
    validate_corpus_id(&req.corpus_id).map_err(|e| PipelineError::InvalidArgument(e.to_string()))?;
    let canonical = |p: &PathBuf| fs::canonicalize(p).map_err(io_err(p));
    let embeddings = req.embeddings.iter().map(canonical).collect::<Result<Vec<_>>>()?;
    let terminology = req.terminology.as_ref().map(canonical).transpose()?;

    let set = load_replicate_set(&embeddings, &req.corpus_id, &req.label, req.order_index)
        .map_err(ingest_err(Stage::Ingest))?;
    let malformed_rows = match &terminology {
        Some(p) => parse_terminology_path(p)
            .map_err(ingest_err(Stage::Terminology))?
            .malformed
            .into_iter()
            .map(|r| (r.line, r.reason))
            .collect(),
        None => Vec::new(),
    };

    let entry = CorpusEntry {
        id: req.corpus_id,
        label: req.label,
        order_index: req.order_index,
        embeddings,
        terminology,
    };
    let mut ws = Workspace::load(dir)?;
    let replaced = ws.register(entry.clone());
    ws.save(dir)?;
    Ok(IngestOutcome {
        entry,
        replaced,
        report: set.vocabulary_report().clone(),
        m: set.m(),
        dim: set.dim(),
        malformed_rows,
    })
}

/// Parameters for [`build_snapshot`] and [`compute`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeParams {
    pub k: usize,
    pub threshold: f64,
    pub n_neighbors: usize,
    pub tsne: TsneParams,
}

impl Default for ComputeParams {
    fn default() -> Self {
        ComputeParams {
            k: 5,
            threshold: 0.5,
            n_neighbors: 10,
            tsne: TsneParams::default(),
        }
    }
}

impl ComputeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidArgument(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.n_neighbors == 0 {
            return bad("n_neighbors must be at least 1".into());
        }
        if !(self.tsne.perplexity > 0.0 && self.tsne.perplexity.is_finite()) {
            return bad(format!("perplexity {} must be positive", self.tsne.perplexity));
        }
        if self.tsne.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub id: String,
    pub label: String,
    pub vocab_size: usize,
    pub high_conf_count: usize,
    pub m: usize,
}

#[derive(Debug, Clone)]
pub struct BuiltSnapshot {
    pub snapshot: Snapshot,
    pub summary: Vec<CorpusSummary>,
    pub warnings: Vec<ProjectionWarning>,
}

/// Runs stability, neighbor tables, projection and alignment over `sets`.
pub fn build_snapshot(
    sets: &[ReplicateSet],
    terminology: &Terminology,
    params: &ComputeParams,
) -> Result<BuiltSnapshot> {
    params.validate()?;
    let mut order: Vec<&ReplicateSet> = sets.iter().collect();
    order.sort_by(|a, b| (a.order_index(), a.corpus_id()).cmp(&(b.order_index(), b.corpus_id())));
    for w in order.windows(2) {
        if w[0].corpus_id() == w[1].corpus_id() {
            return Err(PipelineError::InvalidArgument(format!(
                "corpus `{}` given twice",
                w[0].corpus_id()
            )));
        }
    }

    let indexes: Vec<SharedIndex> = order.iter().map(|s| SharedIndex::new(s)).collect();
    let confidence: Vec<HighConfidence> = indexes
        .par_iter()
        .map(|ix| {
            ix.high_confidence_set(params.k, params.threshold)
                .map_err(compute_err(ix.set(), Stage::Stability))
        })
        .collect::<Result<_>>()?;
    let selectable: BTreeSet<ConceptId> = confidence.iter().flat_map(|h| h.concepts.iter().cloned()).collect();

    let neighbors: Vec<BTreeMap<ConceptId, _>> = indexes
        .iter()
        .zip(&confidence)
        .map(|(ix, hc)| {
            let targets: Vec<&ConceptId> = selectable.iter().filter(|c| ix.set().is_shared(c.as_str())).collect();
            targets
                .par_iter()
                .map(|&c| {
                    ix.aggregate_neighbors(c, params.n_neighbors, &hc.concepts)
                        .map(|t| (c.clone(), t))
                        .map_err(compute_err(ix.set(), Stage::Neighbors))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<_>>()?;

    let projected: Vec<(ProjectionFrame, Vec<ProjectionWarning>)> = order
        .par_iter()
        .zip(&confidence)
        .map(|(set, hc)| project_corpus(set, &hc.concepts, &params.tsne))
        .collect::<Result<_>>()?;
    let mut warnings: Vec<ProjectionWarning> = Vec::new();
    let mut frames = Vec::with_capacity(projected.len());
    for (frame, w) in projected {
        frames.push(frame);
        warnings.extend(w);
    }
    let chain = align_chain(frames);
    warnings.extend(chain.warnings);

    let vocabulary: BTreeSet<&ConceptId> = order.iter().flat_map(|s| s.shared_vocabulary()).collect();
    let concepts = terminology.resolve(vocabulary);

    let tsne = TsneSettings {
        perplexity: params.tsne.perplexity,
        iterations: params.tsne.iterations,
        seed: params.tsne.seed,
    };
    let mut corpora = Vec::with_capacity(order.len());
    let mut summary = Vec::with_capacity(order.len());
    for (((set, hc), neighbors), projection) in order.iter().zip(confidence).zip(neighbors).zip(chain.frames) {
        let descriptor = CorpusDescriptor {
            id: set.corpus_id().to_string(),
            label: set.label().to_string(),
            order_index: set.order_index(),
            vocab_size: set.shared_vocabulary().len(),
            high_conf_count: hc.concepts.len(),
            m: set.m(),
            dim: set.dim(),
            k: params.k,
            threshold: params.threshold,
            n_neighbors: params.n_neighbors,
            tsne: tsne.clone(),
        };
        summary.push(CorpusSummary {
            id: descriptor.id.clone(),
            label: descriptor.label.clone(),
            vocab_size: descriptor.vocab_size,
            high_conf_count: descriptor.high_conf_count,
            m: descriptor.m,
        });
        corpora.push(CorpusPayload {
            descriptor,
            confidence: hc.records,
            neighbors,
            projection,
            vectors: StoredVectors::gather(*set, set.dim(), &selectable),
        });
    }
    Ok(BuiltSnapshot {
        snapshot: Snapshot {
            format_version: FORMAT_VERSION,
            concepts,
            corpora,
        },
        summary,
        warnings,
    })
}

fn compute_err(set: &ReplicateSet, stage: Stage) -> impl FnOnce(StabilityError) -> PipelineError + '_ {
    move |e| PipelineError::Compute {
        corpus: set.corpus_id().to_string(),
        stage,
        message: e.to_string(),
    }
}

/// t-SNE over the replicate-mean vectors of the high-confidence concepts.
/// Corpora with fewer than four such concepts get points evenly spaced on
/// the unit circle instead.
fn project_corpus(
    set: &ReplicateSet,
    hiconf: &BTreeSet<ConceptId>,
    params: &TsneParams,
) -> Result<(ProjectionFrame, Vec<ProjectionWarning>)> {
    if hiconf.len() < 4 {
        let n = hiconf.len();
        let points = hiconf
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let a = TAU * i as f64 / n as f64;
                (id.clone(), Point2 { x: a.cos(), y: a.sin() })
            })
            .collect();
        let warning = ProjectionWarning::TooFewPoints {
            corpus: set.corpus_id().to_string(),
            count: n,
        };
        log::warn!("{warning}");
        let frame = ProjectionFrame {
            corpus_id: set.corpus_id().to_string(),
            points,
            aligned: false,
            seed: params.seed,
            perplexity: params.perplexity,
            kl_final: 0.0,
        };
        return Ok((frame, vec![warning]));
    }
    let vectors: BTreeMap<ConceptId, Vec<f64>> = hiconf
        .iter()
        .map(|id| (id.clone(), set.mean_vector(id.as_str()).expect("high-confidence concepts are shared")))
        .collect();
    let outcome = tsne_project(set.corpus_id(), &vectors, params).map_err(|e| PipelineError::Compute {
        corpus: set.corpus_id().to_string(),
        stage: Stage::Projection,
        message: e.to_string(),
    })?;
    Ok((outcome.frame, outcome.warnings))
}

/// Loads every corpus registered in a workspace, with the merged terminology.
pub fn load_workspace(dir: &Path) -> Result<(Vec<ReplicateSet>, Terminology)> {
    let ws = Workspace::load(dir)?;
    if ws.corpora.is_empty() {
        return Err(PipelineError::NoCorpora(dir.to_path_buf()));
    }
    let mut sets = Vec::with_capacity(ws.corpora.len());
    let mut terminology = Terminology::default();
    for c in &ws.corpora {
        let err = |stage| {
            let corpus = c.id.clone();
            move |source| PipelineError::Ingest { corpus, stage, source }
        };
        sets.push(
            load_replicate_set(&c.embeddings, &c.id, &c.label, c.order_index).map_err(err(Stage::Ingest))?,
        );
        if let Some(p) = &c.terminology {
            terminology.merge(parse_terminology_path(p).map_err(err(Stage::Terminology))?);
        }
    }
    Ok((sets, terminology))
}

#[derive(Debug, Clone)]
pub struct ComputeOutcome {
    pub digest: ManifestDigest,
    pub summary: Vec<CorpusSummary>,
    pub warnings: Vec<ProjectionWarning>,
}

/// Computes a snapshot for the workspace at `dir` and writes it to `out`.
pub fn compute(dir: &Path, out: &Path, params: &ComputeParams) -> Result<ComputeOutcome> {
    params.validate()?;
    let (sets, terminology) = load_workspace(dir)?;
    let built = build_snapshot(&sets, &terminology, params)?;
    let digest = write_snapshot(out, &built.snapshot)?;
    Ok(ComputeOutcome {
        digest,
        summary: built.summary,
        warnings: built.warnings,
    })
}

/// Summary table in the shape of entities / high-confidence counts per corpus.
pub fn format_summary(rows: &[CorpusSummary]) -> String {
    let id_w = rows.iter().map(|r| r.id.len()).chain([6]).max().unwrap_or(6);
    let label_w = rows.iter().map(|r| r.label.len()).chain([5]).max().unwrap_or(5);
    let mut s = format!(
        "{:<id_w$}  {:<label_w$}  {:>8}  {:>8}  {:>3}\n",
        "corpus", "label", "entities", "hi-conf", "m"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<id_w$}  {:<label_w$}  {:>8}  {:>8}  {:>3}\n",
            r.id, r.label, r.vocab_size, r.high_conf_count, r.m
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{generate, FixtureSpec};
    use crate::EmbeddingReplicate;

    fn small_spec() -> FixtureSpec {
        FixtureSpec {
            per_cluster: 12,
            dim: 8,
            m: 3,
            ..FixtureSpec::default()
        }
    }

    fn quick_params() -> ComputeParams {
        ComputeParams {
            tsne: TsneParams {
                iterations: 300,
                ..TsneParams::default()
            },
            ..ComputeParams::default()
        }
    }

    #[test]
    fn threshold_outside_unit_interval_rejected() {
        for t in [1.01, -0.1, f64::NAN] {
            let p = ComputeParams {
                threshold: t,
                ..ComputeParams::default()
            };
            assert!(matches!(p.validate(), Err(PipelineError::InvalidArgument(_))));
        }
    }

    #[test]
    fn built_snapshot_is_consistent() {
        let fx = generate(&small_spec()).unwrap();
        let built = build_snapshot(&fx.sets, &Terminology::default(), &quick_params()).unwrap();
        built.snapshot.validate().unwrap();
        assert_eq!(built.snapshot.corpora.len(), 3);
        for (c, s) in built.snapshot.corpora.iter().zip(&built.summary) {
            assert_eq!(c.descriptor.high_conf_count, s.high_conf_count);
            assert!(c.projection.aligned);
        }
    }

    #[test]
    fn tiny_corpus_uses_circle_layout() {
        let rep = |flip: f32| {
            EmbeddingReplicate::from_vectors(
                2,
                vec![
                    (ConceptId::new("a").unwrap(), vec![1.0, 0.0]),
                    (ConceptId::new("b").unwrap(), vec![0.0, flip]),
                ],
            )
            .unwrap()
        };
        let set = ReplicateSet::new("tiny", "Tiny", 0, vec![rep(1.0), rep(1.0)]).unwrap();
        let built = build_snapshot(&[set], &Terminology::default(), &ComputeParams::default()).unwrap();
        let frame = &built.snapshot.corpora[0].projection;
        assert_eq!(frame.points.len(), 2);
        assert!(matches!(
            built.warnings[0],
            ProjectionWarning::TooFewPoints { count: 2, .. }
        ));
        built.snapshot.validate().unwrap();
    }

    #[test]
    fn duplicate_corpus_rejected() {
        let fx = generate(&small_spec()).unwrap();
        let sets = vec![fx.sets[0].clone(), fx.sets[0].clone()];
        assert!(matches!(
            build_snapshot(&sets, &Terminology::default(), &quick_params()),
            Err(PipelineError::InvalidArgument(_))
        ));
    }

    #[test]
    fn register_replaces_same_id() {
        let mut ws = Workspace::default();
        let entry = |id: &str, order| CorpusEntry {
            id: id.into(),
            label: id.into(),
            order_index: order,
            embeddings: vec![],
            terminology: None,
        };
        assert!(!ws.register(entry("b", 1)));
        assert!(!ws.register(entry("a", 2)));
        assert!(ws.register(entry("b", 3)));
        let ids: Vec<_> = ws.corpora.iter().map(|c| (c.id.as_str(), c.order_index)).collect();
        assert_eq!(ids, [("a", 2), ("b", 3)]);
    }

    #[test]
    fn summary_lists_each_corpus() {
        let rows = vec![CorpusSummary {
            id: "c1".into(),
            label: "Corpus 1".into(),
            vocab_size: 102,
            high_conf_count: 90,
            m: 5,
        }];
        let s = format_summary(&rows);
        assert!(s.lines().nth(1).unwrap().contains("102"));
        assert!(s.lines().nth(1).unwrap().contains("90"));
    }
}
