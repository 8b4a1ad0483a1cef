//! RANSAC pose estimation from point and line correspondences.
//!
//! Hypotheses come from point triples through the P3P solver; lines
//! contribute to inlier scoring and to the final refinement but not to
//! minimal solving. The adaptive stopping rule follows the point inlier
//! ratio only, so enabling lines never changes which hypotheses are drawn.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    infinite_line_coeffs, Intrinsics, LineSegment2, LineSegment3, Point2, Point3, Pose, MIN_DEPTH,
};

use super::lm::lm_refine;
use super::p3p::p3p_minimal;
use super::LocalizeError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Point inlier threshold: reprojection error in pixels.
    pub inlier_threshold_px: f64,
    /// Line inlier threshold: each endpoint's perpendicular distance must
    /// pass (ψ split across endpoints).
    pub line_inlier_threshold_px: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            inlier_threshold_px: 8.0,
            line_inlier_threshold_px: 8.0,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) {
        assert!(self.inlier_threshold_px > 0.0 && self.line_inlier_threshold_px > 0.0);
        assert!(self.max_iterations > 0);
        assert!((0.0..1.0).contains(&self.confidence) || self.confidence == 0.999);
    }
}

/// 2D observations paired with predicted 3D geometry, assembled from kept
/// features only.
#[derive(Debug, Clone, Default)]
pub struct Correspondences {
    pub points: Vec<(Point2, Point3)>,
    pub lines: Vec<(LineSegment2, LineSegment3)>,
}

impl Correspondences {
    pub fn all_finite(&self) -> bool {
        self.points
            .iter()
            .all(|(u, p)| u.coords.iter().all(|v| v.is_finite()) && p.coords.iter().all(|v| v.is_finite()))
            && self.lines.iter().all(|(s, l)| {
                s.a.coords.iter().all(|v| v.is_finite())
                    && s.b.coords.iter().all(|v| v.is_finite())
                    && l.a.coords.iter().all(|v| v.is_finite())
                    && l.b.coords.iter().all(|v| v.is_finite())
            })
    }
}

#[derive(Debug, Clone)]
pub struct LocalizationResult {
    pub pose: Pose,
    pub num_inlier_points: usize,
    pub num_inlier_lines: usize,
    pub success: bool,
    /// RMS pixel residual over the refined inlier set.
    pub refinement_residual: f64,
    pub refinement_converged: bool,
}

/// Minimum total inliers for a hypothesis to count as consensus.
pub const MIN_CONSENSUS: usize = 6;

fn point_inlier(pose: &Pose, k: &Intrinsics, obs: &Point2, pw: &Point3, thr: f64) -> bool {
    let cam = pose.apply(pw);
    if cam.z <= MIN_DEPTH {
        return false;
    }
    let du = k.fx * cam.x / cam.z + k.cx - obs.x;
    let dv = k.fy * cam.y / cam.z + k.cy - obs.y;
    du * du + dv * dv < thr * thr
}

fn line_inlier(
    pose: &Pose,
    k: &Intrinsics,
    obs: &(nalgebra::Vector2<f64>, f64),
    seg: &LineSegment3,
    thr: f64,
) -> bool {
    for pw in [&seg.a, &seg.b] {
        let cam = pose.apply(pw);
        if cam.z <= MIN_DEPTH {
            return false;
        }
        let u = k.fx * cam.x / cam.z + k.cx;
        let v = k.fy * cam.y / cam.z + k.cy;
        if (obs.0.x * u + obs.0.y * v - obs.1).abs() >= thr {
            return false;
        }
    }
    true
}

/// Iterations needed for the standard confidence criterion with point
/// inlier ratio `w` and 3-point samples.
fn iterations_needed(confidence: f64, w: f64, max: usize) -> usize {
    if w <= 0.0 {
        return max;
    }
    if w >= 1.0 {
        return 1;
    }
    let denom = (1.0 - w * w * w).ln();
    if denom >= 0.0 {
        return max;
    }
    let n = ((1.0 - confidence).ln() / denom).ceil();
    if n.is_finite() && n >= 1.0 {
        (n as usize).min(max)
    } else {
        max
    }
}

/// Hypothesize-and-verify pose estimation, then LM refinement on the inliers.
pub fn ransac_pnp(
    corr: &Correspondences,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<LocalizationResult, LocalizeError> {
    cfg.validate();
    let n_pts = corr.points.len();
    if n_pts < 4 {
        return Err(LocalizeError::InsufficientCorrespondences { got: n_pts, need: 4 });
    }
    assert!(corr.all_finite(), "correspondences must be finite");

    let bearings: Vec<Vector3<f64>> = corr.points.iter().map(|(u, _)| k.bearing(u)).collect();
    let line_coeffs: Vec<(nalgebra::Vector2<f64>, f64)> = corr
        .lines
        .iter()
        .map(|(s, _)| infinite_line_coeffs(s).expect("observed segments are non-degenerate"))
        .collect();

    let mut rng = crate::rng::seeded(cfg.seed);
    let mut best: Option<(usize, usize, Pose)> = None; // (pts, lines, pose)
    let mut best_point_inliers = 0usize;
    let mut needed = cfg.max_iterations;

    let mut it = 0;
    while it < needed {
        it += 1;
        let sample = rand::seq::index::sample(&mut rng, n_pts, 3);
        let (i0, i1, i2) = (sample.index(0), sample.index(1), sample.index(2));
        let world = [corr.points[i0].1, corr.points[i1].1, corr.points[i2].1];
        let rays = [bearings[i0], bearings[i1], bearings[i2]];
        let Ok(candidates) = p3p_minimal(&world, &rays) else {
            continue; // degenerate sample: spend the iteration
        };
        for pose in candidates {
            let pts_in = corr
                .points
                .iter()
                .filter(|(u, p)| point_inlier(&pose, k, u, p, cfg.inlier_threshold_px))
                .count();
            let lines_in = corr
                .lines
                .iter()
                .zip(&line_coeffs)
                .filter(|((_, seg), coeffs)| {
                    line_inlier(&pose, k, coeffs, seg, cfg.line_inlier_threshold_px)
                })
                .count();
            let total = pts_in + lines_in;
            if best
                .as_ref()
                .map(|(bp, bl, _)| total > bp + bl)
                .unwrap_or(true)
            {
                best = Some((pts_in, lines_in, pose));
            }
            // The stopping rule tracks point inliers only, so line usage
            // cannot change how many hypotheses get drawn.
            if pts_in > best_point_inliers {
                best_point_inliers = pts_in;
                needed = iterations_needed(
                    cfg.confidence,
                    pts_in as f64 / n_pts as f64,
                    cfg.max_iterations,
                );
            }
        }
    }

    let Some((pts_in, lines_in, pose)) = best else {
        return Err(LocalizeError::NoConsensus { best: 0 });
    };
    if pts_in + lines_in < MIN_CONSENSUS {
        return Err(LocalizeError::NoConsensus {
            best: pts_in + lines_in,
        });
    }

    // Refine on the consensus set.
    let inlier_points: Vec<(Point2, Point3)> = corr
        .points
        .iter()
        .filter(|(u, p)| point_inlier(&pose, k, u, p, cfg.inlier_threshold_px))
        .cloned()
        .collect();
    let inlier_lines: Vec<(LineSegment2, LineSegment3)> = corr
        .lines
        .iter()
        .zip(&line_coeffs)
        .filter(|((_, seg), coeffs)| {
            line_inlier(&pose, k, coeffs, seg, cfg.line_inlier_threshold_px)
        })
        .map(|(c, _)| c.clone())
        .collect();
    let refined = lm_refine(&pose, k, &inlier_points, &inlier_lines)?;

    // Report inlier counts at the refined pose.
    let final_pts = corr
        .points
        .iter()
        .filter(|(u, p)| point_inlier(&refined.pose, k, u, p, cfg.inlier_threshold_px))
        .count();
    let final_lines = corr
        .lines
        .iter()
        .zip(&line_coeffs)
        .filter(|((_, seg), coeffs)| {
            line_inlier(&refined.pose, k, coeffs, seg, cfg.line_inlier_threshold_px)
        })
        .count();

    let success = final_pts + final_lines >= MIN_CONSENSUS;
    Ok(LocalizationResult {
        pose: refined.pose,
        num_inlier_points: final_pts,
        num_inlier_lines: final_lines,
        success,
        refinement_residual: refined.rms_residual,
        refinement_converged: refined.converged,
    })
}
