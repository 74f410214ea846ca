//! Similarity Procrustes between projection frames: rotation (reflection
//! allowed), uniform scale and translation, fitted in closed form on the
//! concepts two frames share.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{Point2, ProjectionFrame, ProjectionWarning};

/// Maps a point `p` to `scale * rotation * p + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTransform {
    /// Row-major 2x2 orthogonal matrix.
    pub rotation: [[f64; 2]; 2],
    pub scale: f64,
    pub translation: [f64; 2],
    /// Frobenius norm of the shared-point residual before the transform.
    pub disparity_before: f64,
    /// Frobenius norm of the shared-point residual after the transform.
    pub disparity_after: f64,
}

impl AlignmentTransform {
    pub fn identity(disparity: f64) -> Self {
        AlignmentTransform {
            rotation: [[1.0, 0.0], [0.0, 1.0]],
            scale: 1.0,
            translation: [0.0, 0.0],
            disparity_before: disparity,
            disparity_after: disparity,
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let r = &self.rotation;
        Point2 {
            x: self.scale * (r[0][0] * p.x + r[0][1] * p.y) + self.translation[0],
            y: self.scale * (r[1][0] * p.x + r[1][1] * p.y) + self.translation[1],
        }
    }

    /// Largest entry of `|R^T R - I|`.
    pub fn orthogonality_residual(&self) -> f64 {
        let r = Matrix2::new(
            self.rotation[0][0],
            self.rotation[0][1],
            self.rotation[1][0],
            self.rotation[1][1],
        );
        (r.transpose() * r - Matrix2::identity()).abs().max()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub transform: AlignmentTransform,
    /// Every source point mapped through `transform`, marked aligned.
    pub frame: ProjectionFrame,
    pub warning: Option<ProjectionWarning>,
}

fn residual(pairs: &[(Point2, Point2)], f: impl Fn(Point2) -> Point2) -> f64 {
    pairs
        .iter()
        .map(|&(s, t)| {
            let p = f(s);
            (p.x - t.x).powi(2) + (p.y - t.y).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Fits `source` onto `target` using the concepts both frames contain and
/// applies the fitted transform to all source points.
pub fn procrustes_align(source: &ProjectionFrame, target: &ProjectionFrame) -> Alignment {
    let pairs: Vec<(Point2, Point2)> = source
        .points
        .iter()
        .filter_map(|(id, &s)| target.points.get(id).map(|&t| (s, t)))
        .collect();
    let before = residual(&pairs, |p| p);

    let (transform, warning) = if pairs.len() < 3 {
        log::warn!(
            "{} shares {} concept(s) with {}; identity used",
            source.corpus_id,
            pairs.len(),
            target.corpus_id
        );
        (
            AlignmentTransform::identity(before),
            Some(ProjectionWarning::InsufficientOverlap {
                source: source.corpus_id.clone(),
                target: target.corpus_id.clone(),
                shared: pairs.len(),
            }),
        )
    } else {
        fit(&pairs, before, &source.corpus_id)
    };

    let mut frame = source.clone();
    for p in frame.points.values_mut() {
        *p = transform.apply(*p);
    }
    frame.aligned = true;
    Alignment {
        transform,
        frame,
        warning,
    }
}

fn fit(
    pairs: &[(Point2, Point2)],
    before: f64,
    source_id: &str,
) -> (AlignmentTransform, Option<ProjectionWarning>) {
    let n = pairs.len() as f64;
    let (mut ms, mut mt) = (Vector2::zeros(), Vector2::zeros());
    for (s, t) in pairs {
        ms += Vector2::new(s.x, s.y);
        mt += Vector2::new(t.x, t.y);
    }
    ms /= n;
    mt /= n;

    // Cross-covariance sum of (s - ms)(t - mt)^T and the source spread.
    let mut cov = Matrix2::zeros();
    let mut spread = 0.0;
    for (s, t) in pairs {
        let sc = Vector2::new(s.x, s.y) - ms;
        let tc = Vector2::new(t.x, t.y) - mt;
        cov += sc * tc.transpose();
        spread += sc.norm_squared();
    }

    let (rotation, scale, warning) = if spread <= f64::EPSILON * n {
        (
            Matrix2::identity(),
            1.0,
            Some(ProjectionWarning::DegenerateSource {
                source: source_id.to_string(),
            }),
        )
    } else {
        let svd = cov.svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        // maximizes trace(R * cov) over orthogonal R
        let rotation = v_t.transpose() * u.transpose();
        let scale = svd.singular_values.sum() / spread;
        (rotation, scale, None)
    };
    let translation = mt - scale * rotation * ms;

    let fitted = AlignmentTransform {
        rotation: [
            [rotation[(0, 0)], rotation[(0, 1)]],
            [rotation[(1, 0)], rotation[(1, 1)]],
        ],
        scale,
        translation: [translation[0], translation[1]],
        disparity_before: before,
        disparity_after: 0.0,
    };
    let after = residual(pairs, |p| fitted.apply(p));
    if after > before {
        // Identity is itself a candidate; only reachable through rounding.
        return (AlignmentTransform::identity(before), warning);
    }
    (
        AlignmentTransform {
            disparity_after: after,
            ..fitted
        },
        warning,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainAlignment {
    pub frames: Vec<ProjectionFrame>,
    /// `transforms[i]` aligned frame `i + 1` onto aligned frame `i`.
    pub transforms: Vec<AlignmentTransform>,
    pub warnings: Vec<ProjectionWarning>,
}

/// Aligns each frame to its already-aligned predecessor; frame 0 is kept.
pub fn align_chain(frames: Vec<ProjectionFrame>) -> ChainAlignment {
    let mut out: Vec<ProjectionFrame> = Vec::with_capacity(frames.len());
    let mut transforms = Vec::new();
    let mut warnings = Vec::new();
    for mut frame in frames {
        match out.last() {
            None => {
                frame.aligned = true;
                out.push(frame);
            }
            Some(prev) => {
                let a = procrustes_align(&frame, prev);
                transforms.push(a.transform);
                warnings.extend(a.warning);
                out.push(a.frame);
            }
        }
    }
    ChainAlignment {
        frames: out,
        transforms,
        warnings,
    }
}
