//! Comparative analysis of corpora through replicated static embeddings.
//!
//! The pipeline ingests several embedding replicates per corpus, scores every
//! concept's neighborhood stability across replicates (EC@k), keeps the
//! high-confidence concepts, builds aggregate neighbor tables and aligned
//! 2-D projections, and stores the result as a snapshot that the HTTP
//! service reads.

pub mod api;
pub mod fixture;
pub mod ingest;
pub mod pipeline;
pub mod projection;
pub mod similarity;
pub mod snapshot;
pub mod stability;

pub use ingest::{ConceptId, ConceptMetadata, EmbeddingReplicate, ReplicateSet};
