//! Training objectives: map loss, BCE pruning loss, reprojection loss with
//! the scheduled robust gate, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, LineSegment2, Pose};
use crate::tensor::{Arr, Tape, Tensor};

/// Loss coefficients and the robust-reprojection schedule constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta_m: f64,
    pub delta_bce: f64,
    pub delta_pi: f64,
    /// Training progress before which the reprojection term is disabled.
    pub theta: f64,
    /// Schedule endpoints in pixels.
    pub tau_max: f64,
    pub tau_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta_m: 1.0,
            delta_bce: 1.0,
            delta_pi: 1.0,
            theta: 0.05,
            tau_max: 50.0,
            tau_min: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        assert!(self.delta_m >= 0.0 && self.delta_bce >= 0.0 && self.delta_pi >= 0.0);
        assert!(self.tau_max > 0.0 && self.tau_min > 0.0);
        assert!((0.0..1.0).contains(&self.theta));
    }
}

/// Σ‖P − P̂‖₂ + Σ‖L − L̂‖₂ over predictions paired with their ground truth
/// (unsquared L2 norms of the 3- and 6-vectors). Empty sums are zero.
pub fn map_loss(
    tape: &Tape,
    points: Option<(&Tensor, &Arr)>,
    lines: Option<(&Tensor, &Arr)>,
) -> Tensor {
    let mut total = tape.scalar(0.0);
    for (pred, gt) in [points, lines].into_iter().flatten() {
        assert_eq!(
            pred.shape(),
            gt.dim(),
            "map_loss prediction/ground-truth shape mismatch"
        );
        total = total.add(&pred.sub(&tape.constant(gt.clone())).sum_row_norms());
    }
    total
}

/// Summed binary cross entropy over all point and all line scores.
pub fn bce_loss(
    point_alphas: &Tensor,
    point_labels: &[f64],
    line_alphas: &Tensor,
    line_labels: &[f64],
) -> Tensor {
    point_alphas
        .bce_sum(point_labels)
        .add(&line_alphas.bce_sum(line_labels))
}

/// Σ‖π(T, P̂) − u‖₂ + Σ ψ(π(T, L̂), uˡ) under the ground-truth pose.
///
/// Predicted features behind the camera contribute the fixed `penalty`
/// (normally τ_max) instead of a projected residual.
pub fn reprojection_loss(
    tape: &Tape,
    pose_gt: &Pose,
    k: &Intrinsics,
    points: Option<(&Tensor, &Arr)>,
    lines: Option<(&Tensor, &[LineSegment2])>,
    penalty: f64,
) -> Tensor {
    let mut total = tape.scalar(0.0);
    if let Some((pred, observed)) = points {
        total = total.add(
            &pred
                .point_reproj_residuals(pose_gt, k, observed, penalty)
                .sum_all(),
        );
    }
    if let Some((pred, observed)) = lines {
        total = total.add(
            &pred
                .line_reproj_residuals(pose_gt, k, observed, penalty)
                .sum_all(),
        );
    }
    total
}

/// Circular schedule τ(t) = √(1 − t²)·τ_max + τ_min for t ∈ [0, 1].
pub fn tau_schedule(t: f64, tau_max: f64, tau_min: f64) -> f64 {
    assert!((0.0..=1.0).contains(&t), "progress t={t} outside [0,1]");
    (1.0 - t * t).sqrt() * tau_max + tau_min
}

/// Robust gate: zero before θ, then τ(t)·tanh(L_π / τ(t)).
pub fn robust_reprojection_loss(tape: &Tape, l_pi: &Tensor, t: f64, w: &LossWeights) -> Tensor {
    if t < w.theta {
        return tape.scalar(0.0);
    }
    let tau = tau_schedule(t, w.tau_max, w.tau_min);
    l_pi.scale(1.0 / tau).tanh().scale(tau)
}

/// δ_m·L_m + δ_BCE·L_BCE + δ_π·L_π^robust.
pub fn total_loss(map: &Tensor, bce: &Tensor, robust: &Tensor, w: &LossWeights) -> Tensor {
    map.scale(w.delta_m)
        .add(&bce.scale(w.delta_bce))
        .add(&robust.scale(w.delta_pi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, Point2, Point3};
    use approx::assert_relative_eq;
    use ndarray::arr2;

    #[test]
    fn map_loss_examples() {
        let tape = Tape::new();
        let pred = tape.constant(arr2(&[[1.0, 2.0, 3.0]]));
        let gt = arr2(&[[1.0, 2.0, 3.0]]);
        assert_eq!(
            map_loss(&tape, Some((&pred, &gt)), None).scalar_value(),
            0.0
        );

        let pred = tape.constant(arr2(&[[1.0, 2.0, 2.0]]));
        let gt = arr2(&[[0.0, 0.0, 0.0]]);
        assert_relative_eq!(
            map_loss(&tape, Some((&pred, &gt)), None).scalar_value(),
            3.0
        );

        let pred = tape.constant(arr2(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]));
        let gt = Arr::zeros((1, 6));
        assert_relative_eq!(
            map_loss(&tape, None, Some((&pred, &gt))).scalar_value(),
            1.0
        );

        // both sums empty
        assert_eq!(map_loss(&tape, None, None).scalar_value(), 0.0);
    }

    #[test]
    fn reprojection_loss_examples() {
        let pose = Pose::identity();
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0);
        let tape = Tape::new();

        // prediction exactly at the triangulated point
        let p = Point3::new(0.4, -0.2, 2.0);
        let u = project_point(&pose, &k, &p).unwrap();
        let pred = tape.constant(arr2(&[[p.x, p.y, p.z]]));
        let obs = arr2(&[[u.x, u.y]]);
        let loss = reprojection_loss(&tape, &pose, &k, Some((&pred, &obs)), None, 50.0);
        assert!(loss.scalar_value() < 1e-9);

        // reprojection off by (3, 4) pixels
        let obs = arr2(&[[u.x - 3.0, u.y - 4.0]]);
        let loss = reprojection_loss(&tape, &pose, &k, Some((&pred, &obs)), None, 50.0);
        assert_relative_eq!(loss.scalar_value(), 5.0, epsilon = 1e-9);

        // line projecting parallel to ground truth at perpendicular offset 2 px
        let pred = tape.constant(arr2(&[[0.0, 0.02, 1.0, 0.5, 0.02, 1.0]]));
        let gt_seg =
            LineSegment2::new(Point2::new(0.0, 50.0), Point2::new(100.0, 50.0)).unwrap();
        let segs = vec![gt_seg];
        let loss = reprojection_loss(&tape, &pose, &k, None, Some((&pred, &segs[..])), 50.0);
        assert_relative_eq!(loss.scalar_value(), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn tau_schedule_examples() {
        assert_relative_eq!(tau_schedule(0.0, 50.0, 1.0), 51.0);
        assert_relative_eq!(tau_schedule(1.0, 50.0, 1.0), 1.0);
        assert_relative_eq!(tau_schedule(0.6, 50.0, 1.0), 41.0, epsilon = 1e-12);
    }

    #[test]
    fn robust_loss_gate_and_saturation() {
        let w = LossWeights::default();
        let tape = Tape::new();

        let l = tape.scalar(123.0);
        assert_eq!(
            robust_reprojection_loss(&tape, &l, 0.04, &w).scalar_value(),
            0.0
        );

        let l = tape.scalar(0.0);
        assert_eq!(
            robust_reprojection_loss(&tape, &l, 0.5, &w).scalar_value(),
            0.0
        );

        let l = tape.scalar(1e6);
        let v = robust_reprojection_loss(&tape, &l, 1.0, &w).scalar_value();
        assert_relative_eq!(v, 1.0, epsilon = 1e-9); // saturates at tau(1) = tau_min

        // bounded by tau(t) and monotone in the residual
        let taus = tau_schedule(0.3, w.tau_max, w.tau_min);
        let mut prev = -1.0;
        for lv in [0.0, 1.0, 10.0, 100.0, 1e4, 1e8] {
            let l = tape.scalar(lv);
            let v = robust_reprojection_loss(&tape, &l, 0.3, &w).scalar_value();
            assert!(v <= taus + 1e-12);
            assert!(v >= prev);
            prev = v;
        }

        // near-linear for small residuals: at L = tau/100, deviation < 1e-3
        let small = taus / 100.0;
        let l = tape.scalar(small);
        let v = robust_reprojection_loss(&tape, &l, 0.3, &w).scalar_value();
        assert!((v - small).abs() / small < 1e-3);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let tape = Tape::new();
        let (m, b, r) = (tape.scalar(2.0), tape.scalar(3.0), tape.scalar(4.0));
        assert_eq!(total_loss(&m, &b, &r, &w).scalar_value(), 9.0);

        // delta_pi = 0 removes the reprojection term from the gradient path
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.5]]), true);
        let m = x.scale(2.0);
        let b = tape.scalar(0.0);
        let r = x.scale(100.0);
        let w0 = LossWeights {
            delta_pi: 0.0,
            ..LossWeights::default()
        };
        total_loss(&m, &b, &r, &w0).backward();
        assert_eq!(x.grad().unwrap()[(0, 0)], 2.0);

        // doubling delta_m doubles the map-loss gradient contribution
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.5]]), true);
        let m = x.scale(2.0);
        let b = tape.scalar(0.0);
        let r = tape.scalar(0.0);
        let w2 = LossWeights {
            delta_m: 2.0,
            ..LossWeights::default()
        };
        total_loss(&m, &b, &r, &w2).backward();
        assert_eq!(x.grad().unwrap()[(0, 0)], 4.0);
    }

    #[test]
    fn losses_are_nonnegative() {
        let tape = Tape::new();
        let w = LossWeights::default();
        let pred = tape.constant(arr2(&[[0.3, -0.4, 2.0], [5.0, 5.0, -1.0]]));
        let gt = arr2(&[[0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]);
        assert!(map_loss(&tape, Some((&pred, &gt)), None).scalar_value() >= 0.0);
        let pose = Pose::identity();
        let k = Intrinsics::new(100.0, 100.0, 0.0, 0.0);
        let obs = arr2(&[[3.0, 1.0], [-2.0, 0.5]]);
        let lpi = reprojection_loss(&tape, &pose, &k, Some((&pred, &obs)), None, w.tau_max);
        assert!(lpi.scalar_value() >= 0.0);
        assert!(
            robust_reprojection_loss(&tape, &lpi, 0.9, &w).scalar_value() >= 0.0
        );
    }
}
