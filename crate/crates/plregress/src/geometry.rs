//! Camera models, rigid transforms, projection of points and line segments,
//! residual distances, and pose-error metrics.
//!
//! Conventions:
//! - Poses map world coordinates to camera coordinates: `x_cam = R * x_world + t`.
//! - The camera looks down +z; a point is projectable only if its camera-frame
//!   depth exceeds [`MIN_DEPTH`].
//! - Pixel coordinates follow the pinhole model `u = fx * x/z + cx`,
//!   `v = fy * y/z + cy`.
//!
//! All values are `f64` and all operations are pure functions.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

/// Minimum camera-frame depth for a point to count as "in front of" the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Tolerance for rotation orthonormality and segment degeneracy checks.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point behind camera (depth {0:.3e} <= {MIN_DEPTH:.0e})")]
    BehindCamera(f64),
    #[error("degenerate line: endpoints coincide")]
    DegenerateLine,
    #[error("matrix is not a rotation (orthonormality residual {0:.3e})")]
    NotARotation(f64),
}

/// Rigid world-to-camera transform stored as a rotation matrix and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, validating that `rotation` is orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if residual >= GEOM_EPS || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation(residual));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose without the orthonormality check. For internal hot paths
    /// where the rotation is constructed from a unit quaternion or exponential map.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Pose from a `[qw, qx, qy, qz]` unit quaternion (normalized here) and translation.
    pub fn from_quaternion(q: [f64; 4], t: [f64; 3]) -> Self {
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        Self {
            rotation: *quat.to_rotation_matrix().matrix(),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    /// Canonical `[qw, qx, qy, qz]` with `qw >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy }
    }

    /// Unit-less ray direction through a pixel, in the camera frame (z = 1 plane).
    pub fn bearing(&self, px: &Point2) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// 3D line segment with distinct endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment3 {
    pub a: Point3,
    pub b: Point3,
}

impl LineSegment3 {
    pub fn new(a: Point3, b: Point3) -> Result<Self, GeometryError> {
        if (a - b).norm() <= GEOM_EPS {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self { a, b })
    }

    pub fn length(&self) -> f64 {
        (self.a - self.b).norm()
    }
}

/// 2D (pixel-space) line segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment2 {
    pub a: Point2,
    pub b: Point2,
}

impl LineSegment2 {
    pub fn new(a: Point2, b: Point2) -> Result<Self, GeometryError> {
        if (a - b).norm() <= GEOM_EPS {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self { a, b })
    }
}

/// Pinhole projection of a world point.
pub fn project_point(pose: &Pose, k: &Intrinsics, p: &Point3) -> Result<Point2, GeometryError> {
    let c = pose.apply(p);
    if c.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera(c.z));
    }
    Ok(Point2::new(
        k.fx * c.x / c.z + k.cx,
        k.fy * c.y / c.z + k.cy,
    ))
}

/// Per-endpoint projection of a 3D segment; fails if either endpoint is behind.
pub fn project_line(
    pose: &Pose,
    k: &Intrinsics,
    l: &LineSegment3,
) -> Result<LineSegment2, GeometryError> {
    Ok(LineSegment2 {
        a: project_point(pose, k, &l.a)?,
        b: project_point(pose, k, &l.b)?,
    })
}

/// Unit normal `n` and offset `c` of the infinite line through the segment,
/// so that `n · p = c` exactly on the line.
pub fn infinite_line_coeffs(seg: &LineSegment2) -> Result<(Vector2<f64>, f64), GeometryError> {
    let d = seg.b - seg.a;
    let len = d.norm();
    if len <= GEOM_EPS {
        return Err(GeometryError::DegenerateLine);
    }
    let n = Vector2::new(-d.y / len, d.x / len);
    Ok((n, n.dot(&seg.a.coords)))
}

/// Signed perpendicular distance from `p` to the infinite line through `seg`.
pub fn signed_perp_distance(p: &Point2, seg: &LineSegment2) -> Result<f64, GeometryError> {
    let (n, c) = infinite_line_coeffs(seg)?;
    Ok(n.dot(&p.coords) - c)
}

/// Line residual ψ: sum over the two projected endpoints of the perpendicular
/// distance to the infinite line through the ground-truth segment.
pub fn line_distance_psi(projected: &LineSegment2, gt: &LineSegment2) -> Result<f64, GeometryError> {
    let (n, c) = infinite_line_coeffs(gt)?;
    Ok((n.dot(&projected.a.coords) - c).abs() + (n.dot(&projected.b.coords) - c).abs())
}

/// Geodesic rotation distance in degrees: `arccos((trace(R_gtᵀ R_est) - 1) / 2)`.
pub fn rotation_error_deg(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let cos = ((r_gt.transpose() * r_est).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Euclidean distance between two translations.
pub fn translation_error(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_est - t_gt).norm()
}

/// Rotation by `angle_rad` about a (not necessarily unit) axis.
pub fn rotation_about(axis: Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle_rad)
        .matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ident() -> Pose {
        Pose::identity()
    }

    #[test]
    fn project_principal_axis() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let u = project_point(&ident(), &k, &Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((u.x, u.y), (0.0, 0.0));
    }

    #[test]
    fn project_hand_computed() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0);
        let u = project_point(&ident(), &k, &Point3::new(1.0, 2.0, 2.0)).unwrap();
        assert_relative_eq!(u.x, 100.0);
        assert_relative_eq!(u.y, 150.0);
    }

    #[test]
    fn project_behind_camera() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0);
        let err = project_point(&ident(), &k, &Point3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera(_)));
    }

    #[test]
    fn project_scale_invariant() {
        let k = Intrinsics::new(320.0, 320.0, 320.0, 240.0);
        let p = Point3::new(0.3, -0.7, 2.1);
        let u1 = project_point(&ident(), &k, &p).unwrap();
        let u2 = project_point(&ident(), &k, &Point3::from(p.coords * 3.5)).unwrap();
        assert_relative_eq!(u1.x, u2.x, epsilon = 1e-9);
        assert_relative_eq!(u1.y, u2.y, epsilon = 1e-9);
    }

    #[test]
    fn project_line_unit_depth() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let l = LineSegment3::new(Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 1.0)).unwrap();
        let s = project_line(&ident(), &k, &l).unwrap();
        assert_eq!((s.a.x, s.a.y), (0.0, 0.0));
        assert_eq!((s.b.x, s.b.y), (1.0, 0.0));
    }

    #[test]
    fn project_line_hand_computed() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let l = LineSegment3::new(Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 1.0, 2.0)).unwrap();
        let s = project_line(&ident(), &k, &l).unwrap();
        assert_eq!((s.a.x, s.a.y), (0.0, 0.0));
        assert_eq!((s.b.x, s.b.y), (0.0, 0.5));
    }

    #[test]
    fn project_line_one_endpoint_behind() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let l = LineSegment3::new(Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, -1.0)).unwrap();
        assert!(matches!(
            project_line(&ident(), &k, &l),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn psi_zero_on_supporting_line() {
        let gt = LineSegment2::new(Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)).unwrap();
        let proj = LineSegment2::new(Point2::new(-3.0, 0.0), Point2::new(42.0, 0.0)).unwrap();
        assert_relative_eq!(line_distance_psi(&proj, &gt).unwrap(), 0.0);
    }

    #[test]
    fn psi_hand_computed() {
        let gt = LineSegment2::new(Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)).unwrap();
        let proj = LineSegment2::new(Point2::new(5.0, 3.0), Point2::new(7.0, 0.0)).unwrap();
        assert_relative_eq!(line_distance_psi(&proj, &gt).unwrap(), 3.0);

        let gt = LineSegment2::new(Point2::new(0.0, 0.0), Point2::new(0.0, 4.0)).unwrap();
        let proj = LineSegment2::new(Point2::new(2.0, 1.0), Point2::new(2.0, 9.0)).unwrap();
        assert_relative_eq!(line_distance_psi(&proj, &gt).unwrap(), 4.0);
    }

    #[test]
    fn psi_degenerate_gt() {
        let gt = LineSegment2 {
            a: Point2::new(1.0, 1.0),
            b: Point2::new(1.0, 1.0),
        };
        let proj = LineSegment2::new(Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)).unwrap();
        assert_eq!(
            line_distance_psi(&proj, &gt).unwrap_err(),
            GeometryError::DegenerateLine
        );
    }

    #[test]
    fn rotation_error_cases() {
        let i = Matrix3::identity();
        assert_relative_eq!(rotation_error_deg(&i, &i), 0.0);
        let rz90 = rotation_about(Vector3::z(), std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(rotation_error_deg(&rz90, &i), 90.0, epsilon = 1e-9);
        let rx180 = rotation_about(Vector3::x(), std::f64::consts::PI);
        assert_relative_eq!(rotation_error_deg(&rx180, &i), 180.0, epsilon = 1e-9);
    }

    #[test]
    fn translation_error_cases() {
        let z = Vector3::zeros();
        assert_eq!(translation_error(&z, &z), 0.0);
        assert_eq!(translation_error(&Vector3::new(1.0, 0.0, 0.0), &z), 1.0);
        assert_relative_eq!(translation_error(&Vector3::new(1.0, 2.0, 2.0), &z), 3.0);
    }

    #[test]
    fn rigid_transform_algebra() {
        assert_eq!(ident().inverse(), ident());
        let p = Point3::new(0.4, -1.0, 2.0);
        assert_eq!(ident().apply(&p), p);

        let pose = Pose::from_parts(
            rotation_about(Vector3::new(0.3, -1.0, 0.5), 0.88),
            Vector3::new(0.1, 2.0, -0.7),
        );
        let back = pose.apply(&pose.inverse().apply(&p));
        assert_relative_eq!((back - p).norm(), 0.0, epsilon = 1e-9);

        let ident_check = pose.compose(&pose.inverse());
        assert_relative_eq!(
            (ident_check.rotation - Matrix3::identity()).norm(),
            0.0,
            epsilon = 1e-9
        );
        assert_relative_eq!(ident_check.translation.norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_new_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            Pose::new(m, Vector3::zeros()),
            Err(GeometryError::NotARotation(_))
        ));
    }

    #[test]
    fn quaternion_round_trip() {
        let pose = Pose::from_parts(
            rotation_about(Vector3::new(1.0, 2.0, -0.3), -1.21),
            Vector3::new(4.0, -1.0, 9.0),
        );
        let q = pose.to_quaternion();
        let t = pose.translation;
        let back = Pose::from_quaternion(q, [t.x, t.y, t.z]);
        assert_relative_eq!((back.rotation - pose.rotation).norm(), 0.0, epsilon = 1e-12);
    }
}
