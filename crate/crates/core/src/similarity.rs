//! Cross-corpus similarity series between a reference concept and up to
//! eight comparison concepts.
//!
//! Values are always computed when both concepts are present in a corpus;
//! confidence flags travel with each point and the client decides what to
//! omit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ConceptId, ReplicateSet};
use crate::stability::{cosine_from_parts, mean_std};

pub const MAX_COMPARISONS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("concept `{0}` is absent")]
    ConceptAbsent(ConceptId),
    #[error("concept `{0}` is not high-confidence in any corpus")]
    NotSelectable(ConceptId),
    #[error("{0} comparison concepts requested, at most {MAX_COMPARISONS} allowed")]
    TooManyComparisons(usize),
    #[error("at least one comparison concept is required")]
    NoComparisons,
}

pub type Result<T, E = SimilarityError> = std::result::Result<T, E>;

/// Per-replicate vectors of one corpus.
pub trait ReplicateVectors {
    fn corpus_id(&self) -> &str;
    fn replicate_count(&self) -> usize;
    /// True when the concept has a vector in every replicate.
    fn contains(&self, id: &str) -> bool;
    fn vector(&self, replicate: usize, id: &str) -> Option<&[f32]>;
}

impl ReplicateVectors for ReplicateSet {
    fn corpus_id(&self) -> &str {
        ReplicateSet::corpus_id(self)
    }

    fn replicate_count(&self) -> usize {
        self.m()
    }

    fn contains(&self, id: &str) -> bool {
        self.is_shared(id)
    }

    fn vector(&self, replicate: usize, id: &str) -> Option<&[f32]> {
        self.replicates().get(replicate)?.get(id)
    }
}

fn cosine_f32(u: &[f32], v: &[f32]) -> f64 {
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    cosine_from_parts(dot, uu, vv)
}

/// Mean and population standard deviation over replicates of
/// `cosine(E^i[a], E^i[b])`.
pub fn pairwise_similarity<V: ReplicateVectors + ?Sized>(
    vectors: &V,
    a: &ConceptId,
    b: &ConceptId,
) -> Result<(f64, f64)> {
    for id in [a, b] {
        if !vectors.contains(id.as_str()) {
            return Err(SimilarityError::ConceptAbsent(id.clone()));
        }
    }
    let sims: Vec<f64> = (0..vectors.replicate_count())
        .map(|r| {
            let u = vectors.vector(r, a.as_str()).expect("checked present");
            let v = vectors.vector(r, b.as_str()).expect("checked present");
            cosine_f32(u, v)
        })
        .collect();
    Ok(mean_std(&sims))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPoint {
    pub corpus_id: String,
    /// `None` when either concept is absent from the corpus.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub ref_high_conf: bool,
    pub cmp_high_conf: bool,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySeries {
    pub reference: ConceptId,
    pub comparison: ConceptId,
    pub points: Vec<SimilarityPoint>,
}

/// One corpus as seen by the series computation.
pub struct CorpusView<'a> {
    pub order_index: i64,
    pub vectors: &'a dyn ReplicateVectors,
    pub high_confidence: &'a BTreeSet<ConceptId>,
}

pub fn is_selectable(corpora: &[CorpusView<'_>], id: &ConceptId) -> bool {
    corpora.iter().any(|c| c.high_confidence.contains(id))
}

/// One series per comparison concept, each with one point per corpus in
/// `order_index` order.
pub fn similarity_series(
    corpora: &[CorpusView<'_>],
    reference: &ConceptId,
    comparisons: &[ConceptId],
) -> Result<Vec<SimilaritySeries>> {
    if comparisons.is_empty() {
        return Err(SimilarityError::NoComparisons);
    }
    if comparisons.len() > MAX_COMPARISONS {
        return Err(SimilarityError::TooManyComparisons(comparisons.len()));
    }
    for id in std::iter::once(reference).chain(comparisons) {
        if !is_selectable(corpora, id) {
            return Err(SimilarityError::NotSelectable(id.clone()));
        }
    }
    let mut order: Vec<&CorpusView<'_>> = corpora.iter().collect();
    order.sort_by(|a, b| {
        a.order_index
            .cmp(&b.order_index)
            .then_with(|| a.vectors.corpus_id().cmp(b.vectors.corpus_id()))
    });

    Ok(comparisons
        .iter()
        .map(|cmp| SimilaritySeries {
            reference: reference.clone(),
            comparison: cmp.clone(),
            points: order
                .iter()
                .map(|corpus| {
                    let value = pairwise_similarity(corpus.vectors, reference, cmp).ok();
                    SimilarityPoint {
                        corpus_id: corpus.vectors.corpus_id().to_string(),
                        mean: value.map(|v| v.0),
                        std: value.map(|v| v.1),
                        ref_high_conf: corpus.high_confidence.contains(reference),
                        cmp_high_conf: corpus.high_confidence.contains(cmp),
                        present: value.is_some(),
                    }
                })
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::EmbeddingReplicate;
    use proptest::prelude::*;

    fn cid(s: &str) -> ConceptId {
        ConceptId::new(s).unwrap()
    }

    fn rep(rows: &[(&str, [f32; 2])]) -> EmbeddingReplicate {
        EmbeddingReplicate::from_vectors(2, rows.iter().map(|(id, v)| (cid(id), v.to_vec()))).unwrap()
    }

    fn unit(angle: f64) -> [f32; 2] {
        [angle.cos() as f32, angle.sin() as f32]
    }

    #[test]
    fn self_similarity() {
        let r = rep(&[("a", [0.3, 0.7]), ("b", [1.0, 0.0])]);
        let set = ReplicateSet::new("c", "C", 0, vec![r.clone(), r.scaled(3.0)]).unwrap();
        assert_eq!(pairwise_similarity(&set, &cid("a"), &cid("a")).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn two_replicate_mean_and_std() {
        // b at angle acos(0.2) from a in replicate 0, acos(0.4) in replicate 1.
        let r0 = rep(&[("a", [1.0, 0.0]), ("b", unit(0.2f64.acos()))]);
        let r1 = rep(&[("a", [1.0, 0.0]), ("b", unit(0.4f64.acos()))]);
        let set = ReplicateSet::new("c", "C", 0, vec![r0, r1]).unwrap();
        let (mean, std) = pairwise_similarity(&set, &cid("a"), &cid("b")).unwrap();
        assert!((mean - 0.3).abs() < 1e-7, "{mean}");
        assert!((std - 0.1).abs() < 1e-7, "{std}");
        let (m2, s2) = pairwise_similarity(&set, &cid("b"), &cid("a")).unwrap();
        assert_eq!((mean, std), (m2, s2));
    }

    #[test]
    fn absent_concept() {
        let r = rep(&[("a", [1.0, 0.0]), ("b", [0.0, 1.0])]);
        let set = ReplicateSet::new("c", "C", 0, vec![r.clone(), r]).unwrap();
        assert_eq!(
            pairwise_similarity(&set, &cid("zz"), &cid("a")),
            Err(SimilarityError::ConceptAbsent(cid("zz")))
        );
    }

    fn three_corpora() -> (Vec<ReplicateSet>, Vec<BTreeSet<ConceptId>>) {
        let full = rep(&[("r", [1.0, 0.0]), ("x", [0.5, 0.5]), ("y", [0.0, 1.0])]);
        let no_ref = rep(&[("x", [0.5, 0.5]), ("y", [0.0, 1.0])]);
        let sets = vec![
            ReplicateSet::new("c2", "C2", 2, vec![full.clone(), full.clone()]).unwrap(),
            ReplicateSet::new("c0", "C0", 0, vec![full.clone(), full]).unwrap(),
            ReplicateSet::new("c1", "C1", 1, vec![no_ref.clone(), no_ref]).unwrap(),
        ];
        let hc = vec![
            [cid("x")].into_iter().collect(),
            [cid("r"), cid("x")].into_iter().collect(),
            [cid("x"), cid("y")].into_iter().collect(),
        ];
        (sets, hc)
    }

    fn views<'a>(sets: &'a [ReplicateSet], hc: &'a [BTreeSet<ConceptId>]) -> Vec<CorpusView<'a>> {
        sets.iter()
            .zip(hc)
            .map(|(s, h)| CorpusView {
                order_index: s.order_index(),
                vectors: s,
                high_confidence: h,
            })
            .collect()
    }

    #[test]
    fn series_orders_by_order_index_and_flags() {
        let (sets, hc) = three_corpora();
        let v = views(&sets, &hc);
        let series = similarity_series(&v, &cid("r"), &[cid("r"), cid("x")]).unwrap();
        assert_eq!(series.len(), 2);
        let ids: Vec<_> = series[0].points.iter().map(|p| p.corpus_id.as_str()).collect();
        assert_eq!(ids, vec!["c0", "c1", "c2"]);

        let selfp = &series[0].points;
        assert_eq!(selfp[0].mean, Some(1.0));
        assert!(selfp[0].ref_high_conf && selfp[0].cmp_high_conf);
        assert!(!selfp[1].present && selfp[1].mean.is_none());
        // value still computed where the reference is low-confidence
        assert!(selfp[2].present && !selfp[2].ref_high_conf);
        assert_eq!(selfp[2].mean, Some(1.0));
    }

    #[test]
    fn series_errors() {
        let (sets, hc) = three_corpora();
        let v = views(&sets, &hc);
        assert_eq!(
            similarity_series(&v, &cid("r"), &[]),
            Err(SimilarityError::NoComparisons)
        );
        let many: Vec<_> = std::iter::repeat_n(cid("x"), 9).collect();
        assert_eq!(
            similarity_series(&v, &cid("r"), &many),
            Err(SimilarityError::TooManyComparisons(9))
        );
        assert!(similarity_series(&v, &cid("r"), &many[..8]).is_ok());
        assert_eq!(
            similarity_series(&v, &cid("zz"), &[cid("x")]),
            Err(SimilarityError::NotSelectable(cid("zz")))
        );
    }

    proptest! {
        #[test]
        fn symmetric_bounded_scale_invariant(
            va in proptest::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 3),
            vb in proptest::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 3),
            pow in -4i32..5,
        ) {
            prop_assume!(va.iter().chain(&vb).all(|(x, y)| x.abs() + y.abs() > 1e-3));
            let reps: Vec<_> = va.iter().zip(&vb)
                .map(|(a, b)| rep(&[("a", [a.0, a.1]), ("b", [b.0, b.1])]))
                .collect();
            let set = ReplicateSet::new("c", "C", 0, reps.clone()).unwrap();
            let (m1, s1) = pairwise_similarity(&set, &cid("a"), &cid("b")).unwrap();
            let (m2, s2) = pairwise_similarity(&set, &cid("b"), &cid("a")).unwrap();
            prop_assert_eq!((m1, s1), (m2, s2));
            prop_assert!((-1.0..=1.0).contains(&m1) && (0.0..=1.0).contains(&s1));

            let mut scaled = reps;
            scaled[1] = scaled[1].scaled(2f32.powi(pow));
            let set2 = ReplicateSet::new("c", "C", 0, scaled).unwrap();
            prop_assert_eq!(pairwise_similarity(&set2, &cid("a"), &cid("b")).unwrap(), (m1, s1));
        }
    }
}
