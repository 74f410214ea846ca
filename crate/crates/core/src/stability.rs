//! Nearest neighborhoods, embedding confidence (EC@k) and aggregate neighbors.
//!
//! EC@k of a concept is the mean size of the overlap between its top-k cosine
//! neighborhoods over every ordered pair of replicates, divided by the
//! neighborhood size so the value lies in `[0, 1]`. Neighborhoods are taken
//! over the corpus's shared vocabulary. Concepts whose EC@k reaches the
//! threshold form the high-confidence set, the only pool aggregate neighbors
//! are drawn from.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ConceptId, EmbeddingReplicate, ReplicateSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("concept `{0}` is absent")]
    ConceptAbsent(ConceptId),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
}

pub type Result<T, E = StabilityError> = std::result::Result<T, E>;

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Computed as `dot / sqrt(|u|^2 * |v|^2)` with f64 accumulation, so a vector
/// compared with itself yields exactly `1.0`.
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(StabilityError::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.into(), b.into());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(StabilityError::ZeroVector);
    }
    Ok(cosine_from_parts(dot, uu, vv))
}

#[inline]
pub(crate) fn cosine_from_parts(dot: f64, uu: f64, vv: f64) -> f64 {
    (dot / (uu * vv).sqrt()).clamp(-1.0, 1.0)
}

#[inline]
fn dot(u: &[f32], v: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        acc += a as f64 * b as f64;
    }
    acc
}

/// Orders by score descending, then id ascending.
#[inline]
pub(crate) fn rank_order(a: (f64, &ConceptId), b: (f64, &ConceptId)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Keeps the best `n` items under [`rank_order`], fully sorted.
fn top_n<T>(mut items: Vec<T>, n: usize, key: impl Fn(&T) -> (f64, &ConceptId)) -> Vec<T> {
    let cmp = |a: &T, b: &T| rank_order(key(a), key(b));
    if n == 0 {
        return Vec::new();
    }
    if items.len() > n {
        items.select_nth_unstable_by(n - 1, cmp);
        items.truncate(n);
    }
    items.sort_unstable_by(cmp);
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: ConceptId,
    pub score: f64,
}

/// Top-k neighbors of `target` in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub target: ConceptId,
    pub k: usize,
    pub entries: Vec<Neighbor>,
}

/// Exhaustive top-k cosine neighbors of `concept` among `candidates`,
/// excluding the concept itself.
pub fn knn(
    replicate: &EmbeddingReplicate,
    concept: &ConceptId,
    k: usize,
    candidates: &[ConceptId],
) -> Result<NeighborList> {
    if k == 0 {
        return Err(StabilityError::InvalidK);
    }
    let target = replicate
        .get(concept.as_str())
        .ok_or_else(|| StabilityError::ConceptAbsent(concept.clone()))?;
    let mut seen = BTreeSet::new();
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c == concept || !seen.insert(c) {
            continue;
        }
        let v = replicate
            .get(c.as_str())
            .ok_or_else(|| StabilityError::ConceptAbsent(c.clone()))?;
        scored.push(Neighbor {
            id: c.clone(),
            score: cosine(target, v)?,
        });
    }
    Ok(NeighborList {
        target: concept.clone(),
        k,
        entries: top_n(scored, k, |n| (n.score, &n.id)),
    })
}

/// Embedding confidence of one concept in one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub corpus_id: String,
    pub concept: ConceptId,
    pub ec: f64,
    pub k: usize,
    pub high_confidence: bool,
}

/// Result of thresholding a corpus: the high-confidence concepts plus one
/// record per shared-vocabulary concept, ascending by id.
#[derive(Debug, Clone, PartialEq)]
pub struct HighConfidence {
    pub concepts: BTreeSet<ConceptId>,
    pub records: Vec<ConfidenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRow {
    pub neighbor: ConceptId,
    pub mean_sim: f64,
    pub std_sim: f64,
}

/// Aggregate nearest neighbors of one concept in one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTable {
    pub corpus_id: String,
    pub concept: ConceptId,
    pub n: usize,
    pub rows: Vec<NeighborRow>,
}

/// Mean and population standard deviation. Equal inputs give exactly
/// `(x, 0.0)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let Some(&first) = values.first() else {
        return (f64::NAN, f64::NAN);
    };
    if values.iter().all(|&v| v == first) {
        return (first, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Read-only view of a replicate set restricted to its shared vocabulary.
///
/// Holds row lookups and squared norms so repeated neighborhood queries do
/// not rehash ids.
pub struct SharedIndex<'a> {
    set: &'a ReplicateSet,
    /// `rows[r][i]`: vector of shared concept `i` in replicate `r`.
    rows: Vec<Vec<&'a [f32]>>,
    sq_norms: Vec<Vec<f64>>,
}

impl<'a> SharedIndex<'a> {
    pub fn new(set: &'a ReplicateSet) -> Self {
        let shared = set.shared_vocabulary();
        let rows: Vec<Vec<&[f32]>> = set
            .replicates()
            .iter()
            .map(|r| {
                shared
                    .iter()
                    .map(|id| r.get(id.as_str()).expect("shared ids exist in every replicate"))
                    .collect()
            })
            .collect();
        let sq_norms = rows
            .iter()
            .map(|rep| rep.iter().map(|v| dot(v, v)).collect())
            .collect();
        SharedIndex {
            set,
            rows,
            sq_norms,
        }
    }

    pub fn set(&self) -> &ReplicateSet {
        self.set
    }

    pub fn ids(&self) -> &'a [ConceptId] {
        self.set.shared_vocabulary()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids().binary_search_by(|p| p.as_str().cmp(id)).ok()
    }

    fn require(&self, id: &ConceptId) -> Result<usize> {
        self.position(id.as_str())
            .ok_or_else(|| StabilityError::ConceptAbsent(id.clone()))
    }

    /// Cosine between shared concepts `a` and `b` in replicate `r`.
    #[inline]
    pub fn cosine_at(&self, r: usize, a: usize, b: usize) -> f64 {
        let rows = &self.rows[r];
        let norms = &self.sq_norms[r];
        cosine_from_parts(dot(rows[a], rows[b]), norms[a], norms[b])
    }

    /// Top-k shared-vocabulary neighbors of concept `c` in replicate `r`,
    /// as ascending index list.
    fn neighbor_set(&self, r: usize, c: usize, k: usize) -> Vec<usize> {
        let ids = self.ids();
        let scored: Vec<(usize, f64, &ConceptId)> = (0..ids.len())
            .filter(|&j| j != c)
            .map(|j| (j, self.cosine_at(r, c, j), &ids[j]))
            .collect();
        let mut best: Vec<usize> = top_n(scored, k, |t| (t.1, t.2))
            .into_iter()
            .map(|t| t.0)
            .collect();
        best.sort_unstable();
        best
    }

    /// EC@k of shared concept index `c`.
    pub fn confidence_at(&self, c: usize, k: usize) -> f64 {
        let k_eff = k.min(self.ids().len() - 1);
        if k_eff == 0 {
            return 0.0;
        }
        let m = self.rows.len();
        let sets: Vec<Vec<usize>> = (0..m).map(|r| self.neighbor_set(r, c, k)).collect();
        let mut overlap = 0usize;
        for i in 0..m {
            for j in (i + 1)..m {
                overlap += sorted_intersection_len(&sets[i], &sets[j]);
            }
        }
        // Each unordered pair stands for two ordered pairs.
        let ordered = 2 * overlap;
        ordered as f64 / ((m * (m - 1)) as f64 * k_eff as f64)
    }

    pub fn confidence(&self, concept: &ConceptId, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(StabilityError::InvalidK);
        }
        Ok(self.confidence_at(self.require(concept)?, k))
    }

    pub fn high_confidence_set(&self, k: usize, threshold: f64) -> Result<HighConfidence> {
        if k == 0 {
            return Err(StabilityError::InvalidK);
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(StabilityError::InvalidThreshold(threshold));
        }
        let ids = self.ids();
        let corpus_id = self.set.corpus_id();
        let records: Vec<ConfidenceRecord> = (0..ids.len())
            .into_par_iter()
            .map(|c| {
                let ec = self.confidence_at(c, k);
                ConfidenceRecord {
                    corpus_id: corpus_id.to_string(),
                    concept: ids[c].clone(),
                    ec,
                    k,
                    high_confidence: ec >= threshold,
                }
            })
            .collect();
        let concepts = records
            .iter()
            .filter(|r| r.high_confidence)
            .map(|r| r.concept.clone())
            .collect();
        Ok(HighConfidence { concepts, records })
    }

    /// Aggregate neighbors of `concept` drawn from `hiconf`.
    pub fn aggregate_neighbors(
        &self,
        concept: &ConceptId,
        n: usize,
        hiconf: &BTreeSet<ConceptId>,
    ) -> Result<NeighborTable> {
        if n == 0 {
            return Err(StabilityError::InvalidK);
        }
        let c = self.require(concept)?;
        let m = self.rows.len();
        let mut sims = vec![0.0f64; m];
        let mut scored = Vec::with_capacity(hiconf.len());
        for id in hiconf {
            if id == concept {
                continue;
            }
            let Some(j) = self.position(id.as_str()) else {
                continue;
            };
            for (r, s) in sims.iter_mut().enumerate() {
                *s = self.cosine_at(r, c, j);
            }
            let (mean_sim, std_sim) = mean_std(&sims);
            scored.push(NeighborRow {
                neighbor: id.clone(),
                mean_sim,
                std_sim,
            });
        }
        Ok(NeighborTable {
            corpus_id: self.set.corpus_id().to_string(),
            concept: concept.clone(),
            n,
            rows: top_n(scored, n, |r| (r.mean_sim, &r.neighbor)),
        })
    }
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// EC@k of `concept` over the shared vocabulary of `set`.
pub fn embedding_confidence(set: &ReplicateSet, concept: &ConceptId, k: usize) -> Result<f64> {
    SharedIndex::new(set).confidence(concept, k)
}

pub fn high_confidence_set(set: &ReplicateSet, k: usize, threshold: f64) -> Result<HighConfidence> {
    SharedIndex::new(set).high_confidence_set(k, threshold)
}

pub fn aggregate_neighbors(
    set: &ReplicateSet,
    concept: &ConceptId,
    n: usize,
    hiconf: &BTreeSet<ConceptId>,
) -> Result<NeighborTable> {
    SharedIndex::new(set).aggregate_neighbors(concept, n, hiconf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cid(s: &str) -> ConceptId {
        ConceptId::new(s).unwrap()
    }

    fn ids(list: &[&str]) -> Vec<ConceptId> {
        list.iter().map(|s| cid(s)).collect()
    }

    fn rep(rows: &[(&str, Vec<f32>)]) -> EmbeddingReplicate {
        EmbeddingReplicate::from_vectors(
            rows[0].1.len(),
            rows.iter().map(|(id, v)| (cid(id), v.clone())),
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0f32, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine(&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.974632).abs() < 1e-6);
        assert_eq!(cosine(&[0.0f32, 0.0], &[1.0, 0.0]), Err(StabilityError::ZeroVector));
        assert!(matches!(
            cosine(&[1.0f32], &[1.0, 0.0]),
            Err(StabilityError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn cosine_self_is_exactly_one() {
        let v = [0.1f32, -0.37, 2.9, 1e-3, 7.25];
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn knn_examples() {
        let r = rep(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.9, 0.1]),
            ("c", vec![0.0, 1.0]),
        ]);
        let all = ids(&["a", "b", "c"]);
        let l = knn(&r, &cid("a"), 1, &all).unwrap();
        assert_eq!(l.entries.len(), 1);
        assert_eq!(l.entries[0].id, cid("b"));

        let l = knn(&r, &cid("a"), 10, &all).unwrap();
        let got: Vec<_> = l.entries.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(got, vec!["b", "c"]);

        assert!(matches!(
            knn(&r, &cid("z"), 1, &all),
            Err(StabilityError::ConceptAbsent(_))
        ));
        assert_eq!(knn(&r, &cid("a"), 0, &all), Err(StabilityError::InvalidK));
    }

    #[test]
    fn knn_ties_by_ascending_id() {
        let r = rep(&[
            ("t", vec![1.0, 0.0]),
            ("zz", vec![0.0, 1.0]),
            ("aa", vec![0.0, -1.0]),
            ("mm", vec![0.0, 2.0]),
        ]);
        let l = knn(&r, &cid("t"), 3, &ids(&["zz", "aa", "mm", "t"])).unwrap();
        let got: Vec<_> = l.entries.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(got, vec!["aa", "mm", "zz"]);
    }

    #[test]
    fn ec_identical_replicates_is_one() {
        let r = rep(&[
            ("a", vec![1.0, 0.2, 0.0]),
            ("b", vec![0.3, 1.0, 0.1]),
            ("c", vec![0.0, 0.4, 1.0]),
            ("d", vec![0.5, 0.5, 0.5]),
        ]);
        let set = ReplicateSet::new("c", "C", 0, vec![r.clone(), r.clone(), r]).unwrap();
        for k in 1..6 {
            for id in set.shared_vocabulary() {
                assert_eq!(embedding_confidence(&set, id, k).unwrap(), 1.0);
            }
        }
    }

    /// Hand-built sets: kNN of `a` at k=2 is {b,c}, {b,d}, {c,d}.
    #[test]
    fn ec_three_replicate_example() {
        let base = |near: [&str; 2]| {
            let mut rows = vec![("a", vec![1.0f32, 0.0, 0.0])];
            for id in ["b", "c", "d"] {
                let v = if near.contains(&id) {
                    vec![0.9, 0.1, 0.0]
                } else {
                    vec![0.0, 0.0, 1.0]
                };
                rows.push((id, v));
            }
            rep(&rows)
        };
        let set =
            ReplicateSet::new("c", "C", 0, vec![base(["b", "c"]), base(["b", "d"]), base(["c", "d"])])
                .unwrap();
        let shared = set.shared_vocabulary().to_vec();
        for (r, want) in set.replicates().iter().zip([["b", "c"], ["b", "d"], ["c", "d"]]) {
            let l = knn(r, &cid("a"), 2, &shared).unwrap();
            let mut got: Vec<_> = l.entries.iter().map(|n| n.id.as_str()).collect();
            got.sort();
            assert_eq!(got, want);
        }
        assert_eq!(embedding_confidence(&set, &cid("a"), 2).unwrap(), 0.5);
    }

    #[test]
    fn ec_disjoint_neighborhoods_is_zero() {
        // a's single nearest neighbor differs in each replicate.
        let mk = |near: &str| {
            let rows: Vec<(&str, Vec<f32>)> = ["a", "b", "c"]
                .iter()
                .map(|&id| {
                    let v = if id == "a" {
                        vec![1.0, 0.0]
                    } else if id == near {
                        vec![1.0, 0.1]
                    } else {
                        vec![-1.0, 0.3]
                    };
                    (id, v)
                })
                .collect();
            rep(&rows)
        };
        let set = ReplicateSet::new("c", "C", 0, vec![mk("b"), mk("c")]).unwrap();
        assert_eq!(embedding_confidence(&set, &cid("a"), 1).unwrap(), 0.0);
    }

    #[test]
    fn ec_absent_concept() {
        let a = rep(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]);
        let b = rep(&[("x", vec![1.0, 0.0]), ("z", vec![0.0, 1.0])]);
        let set = ReplicateSet::new("c", "C", 0, vec![a, b]).unwrap();
        assert!(matches!(
            embedding_confidence(&set, &cid("y"), 1),
            Err(StabilityError::ConceptAbsent(_))
        ));
    }

    #[test]
    fn threshold_bounds() {
        let r = rep(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![1.0, 1.0])]);
        let set = ReplicateSet::new("c", "C", 0, vec![r.clone(), r]).unwrap();
        let all = high_confidence_set(&set, 1, 0.0).unwrap();
        assert_eq!(all.concepts.len(), 3);
        assert_eq!(all.records.len(), 3);
        assert!(high_confidence_set(&set, 1, 1.5).is_err());
        assert!(high_confidence_set(&set, 1, -0.1).is_err());
        assert_eq!(high_confidence_set(&set, 0, 0.5), Err(StabilityError::InvalidK));
    }

    #[test]
    fn threshold_one_keeps_only_identical_neighborhoods() {
        // a's nearest neighbor flips between replicates; c's does not.
        let r1 = rep(&[
            ("a", vec![1.0, 0.0, 0.0]),
            ("b", vec![1.0, 0.2, 0.0]),
            ("c", vec![0.0, 0.0, 1.0]),
            ("d", vec![1.0, -0.1, 0.0]),
        ]);
        let r2 = rep(&[
            ("a", vec![1.0, 0.0, 0.0]),
            ("b", vec![1.0, 0.05, 0.0]),
            ("c", vec![0.0, 0.0, 1.0]),
            ("d", vec![1.0, -0.3, 0.0]),
        ]);
        let set = ReplicateSet::new("c", "C", 0, vec![r1, r2]).unwrap();
        let hc = high_confidence_set(&set, 1, 1.0).unwrap();
        assert!(!hc.concepts.contains("a"));
        for rec in &hc.records {
            assert_eq!(rec.high_confidence, rec.ec >= 1.0);
        }
    }

    #[test]
    fn aggregate_neighbors_hand_checked() {
        let r1 = rep(&[("a", vec![1.0, 0.0]), ("b", vec![1.0, 1.0]), ("c", vec![0.0, 1.0])]);
        let r2 = rep(&[("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0]), ("c", vec![1.0, 1.0])]);
        let set = ReplicateSet::new("c", "C", 0, vec![r1, r2]).unwrap();
        let hi: BTreeSet<ConceptId> = ids(&["a", "b", "c"]).into_iter().collect();
        let t = aggregate_neighbors(&set, &cid("a"), 5, &hi).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // b: cosines s and 1; c: cosines 0 and s.
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].neighbor, cid("b"));
        assert!((t.rows[0].mean_sim - (s + 1.0) / 2.0).abs() < 1e-12);
        assert!((t.rows[0].std_sim - (1.0 - s) / 2.0).abs() < 1e-12);
        assert_eq!(t.rows[1].neighbor, cid("c"));
        assert!((t.rows[1].mean_sim - s / 2.0).abs() < 1e-12);
        assert!((t.rows[1].std_sim - s / 2.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_neighbors_edge_cases() {
        let r = rep(&[("a", vec![1.0, 0.0]), ("b", vec![1.0, 1.0]), ("c", vec![0.0, 1.0])]);
        let set = ReplicateSet::new("c", "C", 0, vec![r.clone(), r]).unwrap();
        let only_self: BTreeSet<ConceptId> = ids(&["a"]).into_iter().collect();
        assert!(aggregate_neighbors(&set, &cid("a"), 3, &only_self).unwrap().rows.is_empty());
        let hi: BTreeSet<ConceptId> = ids(&["a", "b", "c"]).into_iter().collect();
        let t = aggregate_neighbors(&set, &cid("a"), 3, &hi).unwrap();
        assert!(t.rows.iter().all(|r| r.std_sim == 0.0));
        assert!(matches!(
            aggregate_neighbors(&set, &cid("q"), 3, &hi),
            Err(StabilityError::ConceptAbsent(_))
        ));
        // target need not be high-confidence itself
        let others: BTreeSet<ConceptId> = ids(&["b", "c"]).into_iter().collect();
        assert_eq!(aggregate_neighbors(&set, &cid("a"), 3, &others).unwrap().rows.len(), 2);
    }

    #[test]
    fn mean_std_equal_values() {
        assert_eq!(mean_std(&[0.3, 0.3, 0.3]), (0.3, 0.0));
        let (m, s) = mean_std(&[0.2, 0.4]);
        assert!((m - 0.3).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
    }

    fn arb_set() -> impl Strategy<Value = ReplicateSet> {
        (2usize..5, 3usize..10, 2usize..5).prop_flat_map(|(m, v, d)| {
            proptest::collection::vec(
                proptest::collection::vec(
                    proptest::collection::vec(-1.0f32..1.0, d)
                        .prop_filter("non-zero", |x| x.iter().any(|c| c.abs() > 1e-3)),
                    v,
                ),
                m,
            )
            .prop_map(move |reps| {
                let reps = reps
                    .into_iter()
                    .map(|rows| {
                        EmbeddingReplicate::from_vectors(
                            d,
                            rows.into_iter()
                                .enumerate()
                                .map(|(i, x)| (ConceptId::new(format!("c{i:02}")).unwrap(), x)),
                        )
                        .unwrap()
                    })
                    .collect();
                ReplicateSet::new("p", "P", 0, reps).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn ec_in_unit_interval_and_permutation_invariant(set in arb_set(), k in 1usize..5, rot in 0usize..4) {
            let mut reps = set.replicates().to_vec();
            let len = reps.len();
            reps.rotate_left(rot % len);
            reps.swap(0, len - 1);
            let permuted = ReplicateSet::new("p", "P", 0, reps).unwrap();
            for id in set.shared_vocabulary() {
                let ec = embedding_confidence(&set, id, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&ec));
                prop_assert_eq!(ec, embedding_confidence(&permuted, id, k).unwrap());
            }
        }

        #[test]
        fn ec_scale_invariant(set in arb_set(), k in 1usize..4, pow in -3i32..4) {
            let factor = 2f32.powi(pow);
            let mut reps = set.replicates().to_vec();
            reps[0] = reps[0].scaled(factor);
            let scaled = ReplicateSet::new("p", "P", 0, reps).unwrap();
            for id in set.shared_vocabulary() {
                prop_assert_eq!(
                    embedding_confidence(&set, id, k).unwrap(),
                    embedding_confidence(&scaled, id, k).unwrap()
                );
            }
        }

        #[test]
        fn knn_deterministic_and_sorted(set in arb_set(), k in 1usize..6) {
            let r = &set.replicates()[0];
            let pool = set.shared_vocabulary().to_vec();
            for id in &pool {
                let a = knn(r, id, k, &pool).unwrap();
                let b = knn(r, id, k, &pool).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert_eq!(a.entries.len(), k.min(pool.len() - 1));
                prop_assert!(a.entries.iter().all(|n| &n.id != id));
                for w in a.entries.windows(2) {
                    prop_assert!(rank_order((w[0].score, &w[0].id), (w[1].score, &w[1].id)) == Ordering::Less);
                }
            }
        }

        #[test]
        fn aggregate_prefix_monotone(set in arb_set(), n in 1usize..5) {
            let hi: BTreeSet<ConceptId> = set.shared_vocabulary().iter().step_by(1).cloned().collect();
            for id in set.shared_vocabulary() {
                let short = aggregate_neighbors(&set, id, n, &hi).unwrap();
                let long = aggregate_neighbors(&set, id, n + 2, &hi).unwrap();
                prop_assert!(long.rows.len() >= short.rows.len());
                prop_assert_eq!(&long.rows[..short.rows.len()], &short.rows[..]);
                prop_assert!(long.rows.iter().all(|r| hi.contains(&r.neighbor) && &r.neighbor != id));
                prop_assert!(long.rows.iter().all(|r| r.std_sim >= 0.0));
            }
        }
    }
}
