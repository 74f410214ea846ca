//! 2-D projections of high-confidence concepts and their alignment across
//! corpora.

mod procrustes;
mod tsne;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ConceptId;

pub use procrustes::{align_chain, procrustes_align, Alignment, AlignmentTransform, ChainAlignment};
pub use tsne::{tsne_project, TsneOutcome, TsneParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("t-SNE needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("vector for `{id}` has length {found}, expected {expected}")]
    DimensionMismatch {
        id: ConceptId,
        expected: usize,
        found: usize,
    },
    #[error("vector for `{0}` is zero or non-finite")]
    InvalidVector(ConceptId),
    #[error("invalid t-SNE parameter: {0}")]
    InvalidParameter(String),
}

/// Recoverable conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectionWarning {
    PerplexityClamped { requested: f64, used: f64 },
    /// All pairwise distances equal; a seeded random layout was used.
    DegenerateAffinities,
    /// Fewer than three shared concepts; the identity transform was used.
    InsufficientOverlap {
        source: String,
        target: String,
        shared: usize,
    },
    /// Shared source points coincide; only a translation was fitted.
    DegenerateSource { source: String },
    /// Too few high-confidence concepts for t-SNE; a fixed circular layout was used.
    TooFewPoints { corpus: String, count: usize },
}

impl fmt::Display for ProjectionWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectionWarning::PerplexityClamped { requested, used } => {
                write!(f, "perplexity {requested} too large for point count, clamped to {used}")
            }
            ProjectionWarning::DegenerateAffinities => {
                write!(f, "all pairwise distances are equal, using a random layout")
            }
            ProjectionWarning::InsufficientOverlap { source, target, shared } => write!(
                f,
                "`{source}` shares {shared} concept(s) with `{target}`, need 3; left unaligned"
            ),
            ProjectionWarning::DegenerateSource { source } => {
                write!(f, "shared points of `{source}` coincide; translation only")
            }
            ProjectionWarning::TooFewPoints { corpus, count } => write!(
                f,
                "`{corpus}` has {count} high-confidence concept(s), too few for t-SNE; using a circular layout"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

/// 2-D coordinates for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFrame {
    pub corpus_id: String,
    pub points: BTreeMap<ConceptId, Point2>,
    pub aligned: bool,
    pub seed: u64,
    pub perplexity: f64,
    pub kl_final: f64,
}
