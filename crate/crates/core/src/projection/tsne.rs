//! Exact t-SNE over cosine distances.
//!
//! Schedule: early exaggeration 12 for the first 250 iterations (or all of
//! them when fewer are requested), momentum 0.5 then 0.8, learning rate
//! `max(50, n / 12)`, delta-bar-delta gains with floor 0.01, Gaussian
//! initialization with standard deviation 1e-4.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Point2, ProjectionError, ProjectionFrame, ProjectionWarning};
use crate::ingest::ConceptId;
use crate::stability::cosine;

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const INITIAL_MOMENTUM: f64 = 0.5;
const FINAL_MOMENTUM: f64 = 0.8;
const MIN_GAIN: f64 = 0.01;
const INIT_STD: f64 = 1e-4;
const PERPLEXITY_TOL: f64 = 1e-5;
const PERPLEXITY_STEPS: usize = 100;
const MIN_PROB: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutcome {
    pub frame: ProjectionFrame,
    /// KL divergence right after the exaggeration phase, measured against
    /// the unexaggerated affinities. `None` for the degenerate fallback.
    pub kl_after_exaggeration: Option<f64>,
    pub warnings: Vec<ProjectionWarning>,
}

/// Projects `vectors` to 2-D. Output is a pure function of the inputs and
/// `params`.
pub fn tsne_project(
    corpus_id: &str,
    vectors: &BTreeMap<ConceptId, Vec<f64>>,
    params: &TsneParams,
) -> Result<TsneOutcome, ProjectionError> {
    let n = vectors.len();
    if n < 4 {
        return Err(ProjectionError::TooFewPoints(n));
    }
    if !(params.perplexity > 0.0 && params.perplexity.is_finite()) {
        return Err(ProjectionError::InvalidParameter(format!(
            "perplexity {}",
            params.perplexity
        )));
    }
    let ids: Vec<&ConceptId> = vectors.keys().collect();
    let rows: Vec<&[f64]> = vectors.values().map(Vec::as_slice).collect();
    let dim = rows[0].len();
    for (id, row) in ids.iter().zip(&rows) {
        if row.len() != dim {
            return Err(ProjectionError::DimensionMismatch {
                id: (*id).clone(),
                expected: dim,
                found: row.len(),
            });
        }
        if row.iter().any(|x| !x.is_finite()) || row.iter().all(|&x| x == 0.0) {
            return Err(ProjectionError::InvalidVector((*id).clone()));
        }
    }

    let mut warnings = Vec::new();
    let max_perplexity = (n - 1) as f64 / 3.0;
    let perplexity = if params.perplexity >= max_perplexity {
        let used = (max_perplexity * 0.99).max(1.0);
        log::warn!("perplexity {} clamped to {used} for {n} points", params.perplexity);
        warnings.push(ProjectionWarning::PerplexityClamped {
            requested: params.perplexity,
            used,
        });
        used
    } else {
        params.perplexity
    };

    let dist = cosine_distances(&rows);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let (coords, kl_after, kl_final) = if is_degenerate(&dist, n) {
        log::warn!("corpus {corpus_id}: degenerate affinities, random layout");
        warnings.push(ProjectionWarning::DegenerateAffinities);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
        let p = vec![1.0 / (n * (n - 1)) as f64; n * n];
        let kl = kl_divergence(&p, &y, n);
        (y, None, kl)
    } else {
        let p = joint_probabilities(&dist, n, perplexity);
        let (y, kl_after, kl_final) = optimize(&p, n, params.iterations, &mut rng);
        (y, Some(kl_after), kl_final)
    };

    let points = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            (
                id.clone(),
                Point2 {
                    x: coords[2 * i],
                    y: coords[2 * i + 1],
                },
            )
        })
        .collect();
    Ok(TsneOutcome {
        frame: ProjectionFrame {
            corpus_id: corpus_id.to_string(),
            points,
            aligned: false,
            seed: params.seed,
            perplexity,
            kl_final,
        },
        kl_after_exaggeration: kl_after,
        warnings,
    })
}

fn cosine_distances(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len();
    let mut dist = vec![0.0; n * n];
    dist.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        for (j, d) in out.iter_mut().enumerate() {
            if i != j {
                *d = (1.0 - cosine(rows[i], rows[j]).expect("validated non-zero")).max(0.0);
            }
        }
    });
    dist
}

fn is_degenerate(dist: &[f64], n: usize) -> bool {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(dist[i * n + j]);
                hi = hi.max(dist[i * n + j]);
            }
        }
    }
    hi - lo <= 1e-12 * hi.max(1.0)
}

/// Row-conditional Gaussian affinities calibrated to `perplexity`, then
/// symmetrized and normalized to sum to one.
fn joint_probabilities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    cond.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let row = &dist[i * n..(i + 1) * n];
        let d_min = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        for _ in 0..PERPLEXITY_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for (j, o) in out.iter_mut().enumerate() {
                if j == i {
                    *o = 0.0;
                    continue;
                }
                let shifted = row[j] - d_min;
                let p = (-beta * shifted).exp();
                *o = p;
                sum += p;
                weighted += p * shifted;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= sum);
    });
    let denom = 2.0 * n as f64;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / denom).max(MIN_PROB);
            }
        }
    }
    p
}

#[inline]
fn student_kernel(y: &[f64], i: usize, j: usize) -> f64 {
    let dx = y[2 * i] - y[2 * j];
    let dy = y[2 * i + 1] - y[2 * j + 1];
    1.0 / (1.0 + dx * dx + dy * dy)
}

/// Normalizer of the low-dimensional affinities. Row sums are reduced
/// sequentially so the result does not depend on thread scheduling.
fn kernel_sum(y: &[f64], n: usize) -> f64 {
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| j != i).map(|j| student_kernel(y, i, j)).sum())
        .collect();
    rows.iter().sum()
}

fn kl_divergence(p: &[f64], y: &[f64], n: usize) -> f64 {
    let z = kernel_sum(y, n);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let pij = p[i * n + j];
                    let q = (student_kernel(y, i, j) / z).max(MIN_PROB);
                    pij * (pij / q).ln()
                })
                .sum()
        })
        .collect();
    rows.iter().sum::<f64>().max(0.0)
}

/// Gradient descent; returns coordinates (interleaved x, y), KL after the
/// exaggeration phase and final KL.
fn optimize(p: &[f64], n: usize, iterations: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, f64) {
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let learning_rate = (n as f64 / 12.0).max(50.0);
    let exaggeration_iters = EXAGGERATION_ITERS.min(iterations);
    let mut grad = vec![0.0; 2 * n];
    let mut kl_after = None;

    for it in 0..iterations {
        let exaggerating = it < exaggeration_iters;
        let exag = if exaggerating { EXAGGERATION } else { 1.0 };
        let momentum = if exaggerating { INITIAL_MOMENTUM } else { FINAL_MOMENTUM };
        let z = kernel_sum(&y, n);
        let y_ref = &y;
        grad.par_chunks_mut(2).enumerate().for_each(|(i, g)| {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = student_kernel(y_ref, i, j);
                let coef = (exag * p[i * n + j] - k / z) * k;
                gx += coef * (y_ref[2 * i] - y_ref[2 * j]);
                gy += coef * (y_ref[2 * i + 1] - y_ref[2 * j + 1]);
            }
            g[0] = 4.0 * gx;
            g[1] = 4.0 * gy;
        });
        for c in 0..2 * n {
            let same_sign = (grad[c] > 0.0) == (update[c] > 0.0);
            gains[c] = if same_sign { gains[c] * 0.8 } else { gains[c] + 0.2 };
            gains[c] = gains[c].max(MIN_GAIN);
            update[c] = momentum * update[c] - learning_rate * gains[c] * grad[c];
            y[c] += update[c];
        }
        recenter(&mut y, n);
        if it + 1 == exaggeration_iters {
            kl_after = Some(kl_divergence(p, &y, n));
        }
    }
    let kl_final = kl_divergence(p, &y, n);
    (y, kl_after.unwrap_or(kl_final), kl_final)
}

fn recenter(y: &mut [f64], n: usize) {
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..n {
        mx += y[2 * i];
        my += y[2 * i + 1];
    }
    mx /= n as f64;
    my /= n as f64;
    for i in 0..n {
        y[2 * i] -= mx;
        y[2 * i + 1] -= my;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(s: &str) -> ConceptId {
        ConceptId::new(s).unwrap()
    }

    fn simplex(n: usize) -> BTreeMap<ConceptId, Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                (cid(&format!("e{i}")), v)
            })
            .collect()
    }

    #[test]
    fn equidistant_points_fall_back() {
        let out = tsne_project("c", &simplex(4), &TsneParams::default()).unwrap();
        assert!(out.warnings.contains(&ProjectionWarning::DegenerateAffinities));
        assert_eq!(out.frame.points.len(), 4);
        assert!(out.frame.points.values().all(|p| p.x.is_finite() && p.y.is_finite()));
        assert!(out.frame.kl_final >= 0.0);
    }

    #[test]
    fn too_few_points() {
        let v = simplex(3);
        assert_eq!(
            tsne_project("c", &v, &TsneParams::default()),
            Err(ProjectionError::TooFewPoints(3))
        );
    }

    #[test]
    fn perplexity_clamped() {
        let mut v = simplex(6);
        v.get_mut("e0").unwrap()[1] = 0.5;
        let out = tsne_project(
            "c",
            &v,
            &TsneParams {
                perplexity: 30.0,
                iterations: 50,
                seed: 1,
            },
        )
        .unwrap();
        assert!(matches!(
            out.warnings[0],
            ProjectionWarning::PerplexityClamped { requested, used } if requested == 30.0 && used < 5.0 / 3.0
        ));
        assert_eq!(out.frame.perplexity, (5.0f64 / 3.0 * 0.99).max(1.0));
    }

    #[test]
    fn invalid_inputs() {
        let mut v = simplex(5);
        v.insert(cid("z"), vec![0.0; 5]);
        assert!(matches!(
            tsne_project("c", &v, &TsneParams::default()),
            Err(ProjectionError::InvalidVector(_))
        ));
        let mut v = simplex(5);
        v.insert(cid("short"), vec![1.0; 2]);
        assert!(matches!(
            tsne_project("c", &v, &TsneParams::default()),
            Err(ProjectionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn affinities_sum_to_one_and_match_perplexity() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![1.0, (i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let dist = cosine_distances(&refs);
        let p = joint_probabilities(&dist, 12, 3.0);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(p[i * 12 + j], p[j * 12 + i]);
            }
        }
    }
}
