//! Synthetic corpora with planted structure.
//!
//! Every concept has a true position: an orthonormal cluster center plus a
//! concept-specific Gaussian offset. Each replicate adds independent
//! Gaussian noise of standard deviation `noise` per coordinate, so the
//! noise level controls neighborhood stability. Two concepts can be planted:
//!
//! * a *shift* concept that belongs to cluster 0 in the first corpus and to
//!   cluster 1 in all later corpora;
//! * a *drift* concept that starts inside cluster 1 and moves along the
//!   segment towards a reference concept of cluster 0, so its cosine to the
//!   reference increases from corpus to corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{format_sig6, ConceptId, EmbeddingReplicate, IngestError, ReplicateSet};
use crate::stability::cosine;

/// Per-coordinate standard deviation of concept offsets around a center.
pub const CONCEPT_SPREAD: f64 = 0.2;
pub const SHIFT_ID: &str = "C9001";
pub const DRIFT_ID: &str = "C9002";
/// Interpolation weight towards the reference reached in the last corpus.
const MAX_DRIFT: f64 = 0.9;

const GROUPS: [&str; 6] = [
    "Disorders",
    "Chemicals & Drugs",
    "Anatomy",
    "Procedures",
    "Physiology",
    "Living Beings",
];
const SYLLABLES: [&str; 16] = [
    "an", "bro", "cor", "dex", "el", "fi", "gal", "hy", "ix", "lo", "mer", "no", "pra", "ru", "sta", "vi",
];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid drift spec `{0}` (expected comma-separated `shift`, `pair`, or `none`)")]
    InvalidDrift(String),
    #[error("invalid fixture size: {0}")]
    InvalidSize(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Which planted concepts to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub shift: bool,
    pub pair: bool,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            shift: true,
            pair: true,
        }
    }
}

impl FromStr for DriftSpec {
    type Err = FixtureError;

    fn from_str(s: &str) -> Result<Self, FixtureError> {
        let mut spec = DriftSpec {
            shift: false,
            pair: false,
        };
        let mut none = false;
        for item in s.split(',').map(str::trim) {
            match item {
                "shift" => spec.shift = true,
                "pair" => spec.pair = true,
                "none" => none = true,
                _ => return Err(FixtureError::InvalidDrift(s.to_string())),
            }
        }
        if none && (spec.shift || spec.pair) {
            return Err(FixtureError::InvalidDrift(s.to_string()));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub corpora: usize,
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub m: usize,
    pub noise: f64,
    pub drift: DriftSpec,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            corpora: 3,
            clusters: 2,
            per_cluster: 50,
            dim: 20,
            m: 5,
            noise: 0.05,
            drift: DriftSpec::default(),
            seed: 42,
        }
    }
}

impl FixtureSpec {
    fn validate(&self) -> Result<(), FixtureError> {
        let bad = |m: String| Err(FixtureError::InvalidSize(m));
        if self.corpora == 0 {
            return bad("corpora must be at least 1".into());
        }
        if self.clusters == 0 || self.clusters > self.dim {
            return bad(format!("clusters must be in 1..={} (dim)", self.dim));
        }
        if self.per_cluster < 2 {
            return bad("per_cluster must be at least 2".into());
        }
        if self.m < 2 {
            return bad("m must be at least 2".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        if (self.drift.shift || self.drift.pair) && self.clusters < 2 {
            return Err(FixtureError::InvalidDrift(
                "planted concepts need at least 2 clusters".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTruth {
    pub id: ConceptId,
    /// Cluster of the shift concept in each corpus.
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTruth {
    pub reference: ConceptId,
    pub comparison: ConceptId,
    /// Cosine between the true (noise-free) vectors in each corpus.
    pub true_cosines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTruth {
    pub id: String,
    pub label: String,
    pub order_index: i64,
}

/// Ground truth written next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub spec: FixtureSpec,
    pub corpora: Vec<CorpusTruth>,
    /// Cluster of every regular concept.
    pub clusters: BTreeMap<ConceptId, usize>,
    pub shift: Option<ShiftTruth>,
    pub drift: Option<DriftTruth>,
}

pub struct Fixture {
    pub sets: Vec<ReplicateSet>,
    pub terminology_tsv: String,
    pub truth: FixtureTruth,
}

pub fn concept_id(cluster: usize, member: usize, per_cluster: usize) -> ConceptId {
    ConceptId::new(format!("C{:04}", cluster * per_cluster + member)).expect("valid id")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// `count` orthonormal vectors from Gram-Schmidt on Gaussian draws.
fn orthonormal_centers(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for c in &out {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// True positions of `clusters * per_cluster` concepts with their cluster
/// labels, ascending by id.
pub fn planted_clusters(
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    seed: u64,
) -> Vec<(ConceptId, usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = orthonormal_centers(&mut rng, clusters, dim);
    let mut out = Vec::with_capacity(clusters * per_cluster);
    for (k, center) in centers.iter().enumerate() {
        for i in 0..per_cluster {
            let offset = gaussian(&mut rng, dim, CONCEPT_SPREAD);
            out.push((concept_id(k, i, per_cluster), k, add(center, &offset)));
        }
    }
    out
}

/// Rounds to the 6 significant digits used in the text files.
fn round_sig6(x: f64) -> f32 {
    format_sig6(x as f32).parse().expect("formatted float parses")
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    use rand::Rng;
    let n = rng.random_range(2..4);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

/// Builds a fixture in memory.
pub fn generate(spec: &FixtureSpec) -> Result<Fixture, FixtureError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = orthonormal_centers(&mut rng, spec.clusters, spec.dim);

    let mut base: Vec<(ConceptId, usize, Vec<f64>)> = Vec::new();
    for (k, center) in centers.iter().enumerate() {
        for i in 0..spec.per_cluster {
            let offset = gaussian(&mut rng, spec.dim, CONCEPT_SPREAD);
            base.push((concept_id(k, i, spec.per_cluster), k, add(center, &offset)));
        }
    }

    let shift_offset = gaussian(&mut rng, spec.dim, CONCEPT_SPREAD);
    let drift_start = add(&centers[spec.clusters.min(2) - 1], &gaussian(&mut rng, spec.dim, CONCEPT_SPREAD));
    let reference = base[0].clone();

    let drift_weight = |c: usize| {
        if spec.corpora == 1 {
            0.0
        } else {
            MAX_DRIFT * c as f64 / (spec.corpora - 1) as f64
        }
    };
    let shift_cluster = |c: usize| if c == 0 { 0 } else { 1 };

    let mut corpora_truth = Vec::new();
    let mut sets = Vec::new();
    let mut true_cosines = Vec::new();
    for c in 0..spec.corpora {
        let id = format!("c{}", c + 1);
        let label = format!("Corpus {}", c + 1);
        let mut truth_vectors: Vec<(ConceptId, Vec<f64>)> =
            base.iter().map(|(id, _, v)| (id.clone(), v.clone())).collect();
        if spec.drift.shift {
            let center = &centers[shift_cluster(c)];
            truth_vectors.push((ConceptId::new(SHIFT_ID).expect("valid"), add(center, &shift_offset)));
        }
        if spec.drift.pair {
            let t = drift_weight(c);
            let v: Vec<f64> = drift_start
                .iter()
                .zip(&reference.2)
                .map(|(s, r)| (1.0 - t) * s + t * r)
                .collect();
            true_cosines.push(cosine(&reference.2, &v).expect("non-zero vectors"));
            truth_vectors.push((ConceptId::new(DRIFT_ID).expect("valid"), v));
        }
        let mut reps = Vec::with_capacity(spec.m);
        for _ in 0..spec.m {
            let rows = truth_vectors.iter().map(|(id, v)| {
                let noise = gaussian(&mut rng, spec.dim, spec.noise);
                let row: Vec<f32> = v.iter().zip(&noise).map(|(a, b)| round_sig6(a + b)).collect();
                (id.clone(), row)
            });
            reps.push(EmbeddingReplicate::from_vectors(spec.dim, rows)?);
        }
        sets.push(ReplicateSet::new(&id, &label, c as i64, reps)?);
        corpora_truth.push(CorpusTruth {
            id,
            label,
            order_index: c as i64,
        });
    }
    if true_cosines.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FixtureError::InvalidDrift(
            "drift trajectory is not monotone for this seed".into(),
        ));
    }

    let mut tsv = String::new();
    for (id, k, _) in &base {
        let word = pseudo_word(&mut rng);
        let group = GROUPS[k % GROUPS.len()];
        tsv.push_str(&format!(
            "{id}\t{word}\t{} {id}|{word}-{k}\t{group}\tSynthetic concept of cluster {k}.\n",
            word.to_uppercase()
        ));
    }
    if spec.drift.shift {
        tsv.push_str(&format!(
            "{SHIFT_ID}\tanosmia-like shift\tshift concept\t{}\tChanges cluster after the first corpus.\n",
            GROUPS[0]
        ));
    }
    if spec.drift.pair {
        tsv.push_str(&format!(
            "{DRIFT_ID}\tconverging agent\tdrift concept\t{}\tMoves towards {} over time.\n",
            GROUPS[1], reference.0
        ));
    }

    Ok(Fixture {
        sets,
        terminology_tsv: tsv,
        truth: FixtureTruth {
            spec: spec.clone(),
            corpora: corpora_truth,
            clusters: base.iter().map(|(id, k, _)| (id.clone(), *k)).collect(),
            shift: spec.drift.shift.then(|| ShiftTruth {
                id: ConceptId::new(SHIFT_ID).expect("valid"),
                clusters: (0..spec.corpora).map(shift_cluster).collect(),
            }),
            drift: spec.drift.pair.then(|| DriftTruth {
                reference: reference.0.clone(),
                comparison: ConceptId::new(DRIFT_ID).expect("valid"),
                true_cosines,
            }),
        },
    })
}

/// Relative path of replicate `r` of a corpus inside a fixture directory.
pub fn replicate_path(corpus_id: &str, r: usize) -> PathBuf {
    PathBuf::from(corpus_id).join(format!("replicate_{r:02}.txt"))
}

pub const TERMINOLOGY_FILE: &str = "terminology.tsv";
pub const TRUTH_FILE: &str = "fixture.json";

/// Writes replicate files, the terminology and `fixture.json` under `out`.
pub fn write_fixture(out: &Path, fixture: &Fixture) -> Result<(), FixtureError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FixtureError::Io { path, source }
    };
    for set in &fixture.sets {
        for rep in set.replicates() {
            let path = out.join(replicate_path(set.corpus_id(), rep.replicate_index()));
            fs::create_dir_all(path.parent().expect("has parent")).map_err(io(&path))?;
            fs::write(&path, rep.to_text()).map_err(io(&path))?;
        }
    }
    let term = out.join(TERMINOLOGY_FILE);
    fs::create_dir_all(out).map_err(io(out))?;
    fs::write(&term, &fixture.terminology_tsv).map_err(io(&term))?;
    let truth = out.join(TRUTH_FILE);
    let json = serde_json::to_string_pretty(&fixture.truth).expect("truth serializes");
    fs::write(&truth, json + "\n").map_err(io(&truth))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_replicate_set, parse_terminology};

    #[test]
    fn drift_spec_parsing() {
        assert_eq!("shift,pair".parse::<DriftSpec>().unwrap(), DriftSpec::default());
        assert_eq!(
            "none".parse::<DriftSpec>().unwrap(),
            DriftSpec { shift: false, pair: false }
        );
        assert_eq!("pair".parse::<DriftSpec>().unwrap(), DriftSpec { shift: false, pair: true });
        assert!("wobble".parse::<DriftSpec>().is_err());
        assert!("none,shift".parse::<DriftSpec>().is_err());
    }

    #[test]
    fn invalid_sizes() {
        let bad = |f: fn(&mut FixtureSpec)| {
            let mut s = FixtureSpec::default();
            f(&mut s);
            generate(&s).is_err()
        };
        assert!(bad(|s| s.corpora = 0));
        assert!(bad(|s| s.m = 1));
        assert!(bad(|s| s.clusters = 1));
        assert!(bad(|s| s.clusters = 30));
        assert!(bad(|s| s.noise = -1.0));
        let one = FixtureSpec {
            clusters: 1,
            drift: DriftSpec { shift: false, pair: false },
            ..FixtureSpec::default()
        };
        assert!(generate(&one).is_ok());
    }

    #[test]
    fn default_shape() {
        let f = generate(&FixtureSpec::default()).unwrap();
        assert_eq!(f.sets.len(), 3);
        for set in &f.sets {
            assert_eq!(set.m(), 5);
            assert!(set.replicates().iter().all(|r| r.len() == 102));
        }
        let t = parse_terminology(f.terminology_tsv.as_bytes()).unwrap();
        assert_eq!(t.entries.len(), 102);
        assert!(t.malformed.is_empty());
        let d = f.truth.drift.as_ref().unwrap();
        assert!(d.true_cosines.windows(2).all(|w| w[0] < w[1]), "{:?}", d.true_cosines);
        assert_eq!(f.truth.shift.as_ref().unwrap().clusters, vec![0, 1, 1]);
    }

    #[test]
    fn files_are_deterministic_and_reparse() {
        let f = generate(&FixtureSpec::default()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_fixture(a.path(), &f).unwrap();
        write_fixture(b.path(), &generate(&FixtureSpec::default()).unwrap()).unwrap();
        for rel in [replicate_path("c2", 3), PathBuf::from(TERMINOLOGY_FILE), PathBuf::from(TRUTH_FILE)] {
            assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
        }
        let paths: Vec<PathBuf> = (0..5).map(|r| a.path().join(replicate_path("c1", r))).collect();
        let loaded = load_replicate_set(&paths, "c1", "Corpus 1", 0).unwrap();
        for (x, y) in loaded.replicates().iter().zip(f.sets[0].replicates()) {
            assert_eq!(x.ids(), y.ids());
            assert!(x.iter().zip(y.iter()).all(|((_, u), (_, v))| u == v));
        }
    }
}
