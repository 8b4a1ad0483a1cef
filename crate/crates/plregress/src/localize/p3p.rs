//! Perspective-three-point minimal solver.
//!
//! Grunert's formulation: with unit bearing vectors f1, f2, f3 and world
//! points P1, P2, P3, solve for the depths s_i in
//!
//! ```text
//! s_i² + s_j² - 2 s_i s_j cos(f_i, f_j) = |P_i - P_j|²
//! ```
//!
//! Substituting s2 = u·s1, s3 = v·s1 eliminates s1 and reduces the system to
//! a quartic in v whose coefficients are assembled here by explicit
//! polynomial arithmetic (no hand-expanded formulas). Real roots come from
//! the companion matrix, are polished by Newton steps, and each depth
//! triplet is refined on the distance equations before the rigid alignment
//! recovers the pose. Up to four solutions.

use nalgebra::{Matrix3, Matrix4, Point3 as NaPoint3, Vector3};
use thiserror::Error;

use crate::geometry::{Point3, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),
}

/// Polynomial helpers on dense coefficient slices, lowest degree first.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add_scaled(acc: &mut Vec<f64>, other: &[f64], scale: f64) {
    if acc.len() < other.len() {
        acc.resize(other.len(), 0.0);
    }
    for (i, &y) in other.iter().enumerate() {
        acc[i] += scale * y;
    }
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn poly_derivative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| i as f64 * c)
        .collect()
}

/// Real roots of a polynomial of degree <= 4 via the companion matrix,
/// polished with Newton iterations.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    // Trim a (numerically) vanishing leading coefficient.
    let max_mag = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max_mag == 0.0 {
        return Vec::new();
    }
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-13 * max_mag {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = *c.last().unwrap();
    let monic: Vec<f64> = c.iter().map(|x| x / lead).collect();

    let mut roots = Vec::new();
    match deg {
        1 => roots.push(-monic[0]),
        2 => {
            let (b, cc) = (monic[1], monic[0]);
            let disc = b * b - 4.0 * cc;
            if disc >= 0.0 {
                let s = disc.sqrt();
                // Citardauq form for the smaller-magnitude root.
                let q = -0.5 * (b + b.signum() * s);
                roots.push(q);
                if q != 0.0 {
                    roots.push(cc / q);
                } else {
                    roots.push(-b - q);
                }
            }
        }
        _ => {
            // Companion matrix eigenvalues (degree 3 handled by padding: the
            // 4x4 with a zero row/col is avoided by building the right size).
            let eig: Vec<(f64, f64)> = if deg == 3 {
                let m = Matrix3::new(
                    0.0, 0.0, -monic[0], //
                    1.0, 0.0, -monic[1], //
                    0.0, 1.0, -monic[2],
                );
                m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
            } else {
                let m = Matrix4::new(
                    0.0, 0.0, 0.0, -monic[0], //
                    1.0, 0.0, 0.0, -monic[1], //
                    0.0, 1.0, 0.0, -monic[2], //
                    0.0, 0.0, 1.0, -monic[3],
                );
                m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
            };
            let deriv = poly_derivative(&monic);
            for (re, im) in eig {
                if im.abs() > 1e-6 * (1.0 + re.abs()) {
                    continue;
                }
                let mut r = re;
                for _ in 0..8 {
                    let f = poly_eval(&monic, r);
                    let fp = poly_eval(&deriv, r);
                    if fp.abs() < 1e-300 {
                        break;
                    }
                    let step = f / fp;
                    r -= step;
                    if step.abs() < 1e-14 * (1.0 + r.abs()) {
                        break;
                    }
                }
                roots.push(r);
            }
        }
    }
    // Deduplicate near-identical roots.
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * (1.0 + b.abs()));
    roots
}

/// Orthonormal frame adapted to a (non-degenerate) triangle.
fn triangle_frame(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Matrix3<f64> {
    let e1 = (b - a).normalize();
    let mut e2 = c - a;
    e2 -= e1 * e2.dot(&e1);
    let e2 = e2.normalize();
    let e3 = e1.cross(&e2);
    Matrix3::from_columns(&[e1, e2, e3])
}

/// Rigid alignment `R·w + t = c` over three paired points forming congruent
/// triangles (exact up to rounding, which the depth equations guarantee).
fn rigid_align(world: &[Point3; 3], cam: &[NaPoint3<f64>; 3]) -> Pose {
    let wf = triangle_frame(&world[0].coords, &world[1].coords, &world[2].coords);
    let cf = triangle_frame(&cam[0].coords, &cam[1].coords, &cam[2].coords);
    let r = cf * wf.transpose();
    let wbar = (world[0].coords + world[1].coords + world[2].coords) / 3.0;
    let cbar = (cam[0].coords + cam[1].coords + cam[2].coords) / 3.0;
    let t = cbar - r * wbar;
    Pose::from_parts(r, t)
}

/// Gauss-Newton refinement of the depth triplet on the three distance
/// equations (a few iterations, accepted only while the residual drops).
fn refine_depths(
    mut s: Vector3<f64>,
    cos12: f64,
    cos13: f64,
    cos23: f64,
    d12: f64,
    d13: f64,
    d23: f64,
) -> Vector3<f64> {
    let residual = |s: &Vector3<f64>| {
        Vector3::new(
            s.x * s.x + s.y * s.y - 2.0 * s.x * s.y * cos12 - d12 * d12,
            s.x * s.x + s.z * s.z - 2.0 * s.x * s.z * cos13 - d13 * d13,
            s.y * s.y + s.z * s.z - 2.0 * s.y * s.z * cos23 - d23 * d23,
        )
    };
    let mut r = residual(&s);
    for _ in 0..6 {
        if r.norm() < 1e-14 * (1.0 + s.norm_squared()) {
            break;
        }
        let j = Matrix3::new(
            2.0 * s.x - 2.0 * s.y * cos12,
            2.0 * s.y - 2.0 * s.x * cos12,
            0.0,
            2.0 * s.x - 2.0 * s.z * cos13,
            0.0,
            2.0 * s.z - 2.0 * s.x * cos13,
            0.0,
            2.0 * s.y - 2.0 * s.z * cos23,
            2.0 * s.z - 2.0 * s.y * cos23,
        );
        let Some(inv) = j.try_inverse() else { break };
        let s_new = s - inv * r;
        let r_new = residual(&s_new);
        if r_new.norm() >= r.norm() {
            break;
        }
        s = s_new;
        r = r_new;
    }
    s
}

/// All real solutions of the perspective-three-point problem.
///
/// `bearings` are camera-frame ray directions (normalized internally).
/// Returned poses are world-to-camera; every candidate places all three
/// points in front of the camera and reproduces the bearing directions.
pub fn p3p_minimal(
    world: &[Point3; 3],
    bearings: &[Vector3<f64>; 3],
) -> Result<Vec<Pose>, SolveError> {
    let p1 = world[0];
    let p2 = world[1];
    let p3 = world[2];

    let d12 = (p1 - p2).norm();
    let d13 = (p1 - p3).norm();
    let d23 = (p2 - p3).norm();
    let scale = d12.max(d13).max(d23);
    if scale < 1e-9 || d12.min(d13).min(d23) < 1e-9 * scale.max(1.0) {
        return Err(SolveError::DegenerateSample("coincident world points"));
    }
    let cross = (p2 - p1).cross(&(p3 - p1)).norm();
    if cross < 1e-9 * scale * scale {
        return Err(SolveError::DegenerateSample("collinear world points"));
    }

    let f1 = bearings[0].normalize();
    let f2 = bearings[1].normalize();
    let f3 = bearings[2].normalize();
    let cos12 = f1.dot(&f2);
    let cos13 = f1.dot(&f3);
    let cos23 = f2.dot(&f3);
    if cos12.abs() > 1.0 - 1e-12 || cos13.abs() > 1.0 - 1e-12 || cos23.abs() > 1.0 - 1e-12 {
        return Err(SolveError::DegenerateSample("coincident bearing rays"));
    }

    // Depth-ratio system with u = s2/s1, v = s3/s1:
    //   s1²(1 + u² - 2u·cos12) = d12²          (I)
    //   s1²(1 + v² - 2v·cos13) = d13²          (II)
    //   s1²(u² + v² - 2uv·cos23) = d23²        (III)
    //
    // (II)/(I) and (III)/(I) give, with e = (d23² - d12²)/d13²:
    //   u·D(v) = A(v)  where D(v) = 2(cos12 - v·cos23),
    //   A(v) = e·K(v) - v² + 1,  K(v) = 1 + v² - 2v·cos13,
    // and substituting u = A/D into (I)/(II) yields the quartic
    //   A² - 2·cos12·A·D - (d12²/d13²·K - 1)·D² = 0.
    let e = (d23 * d23 - d12 * d12) / (d13 * d13);
    let q = (d12 * d12) / (d13 * d13);
    let k_poly = [1.0, -2.0 * cos13, 1.0];
    let a_poly = {
        let mut a = vec![1.0 + e, -2.0 * e * cos13, e - 1.0];
        // A(v) = e·K(v) - v² + 1 expanded: [e+1, -2e·cos13, e-1]
        a.truncate(3);
        a
    };
    let d_poly = [2.0 * cos12, -2.0 * cos23];

    let mut quartic = poly_mul(&a_poly, &a_poly);
    let ad = poly_mul(&a_poly, &d_poly);
    poly_add_scaled(&mut quartic, &ad, -2.0 * cos12);
    // (q·K - 1)
    let mut qk = vec![q * k_poly[0] - 1.0, q * k_poly[1], q * k_poly[2]];
    qk.truncate(3);
    let dd = poly_mul(&d_poly, &d_poly);
    let qk_dd = poly_mul(&qk, &dd);
    poly_add_scaled(&mut quartic, &qk_dd, -1.0);

    let mut poses = Vec::new();
    for v in real_roots(&quartic) {
        if !(v.is_finite() && v > 0.0) {
            continue;
        }
        let dv = poly_eval(&d_poly, v);
        if dv.abs() < 1e-12 {
            continue;
        }
        let u = poly_eval(&a_poly, v) / dv;
        if !(u.is_finite() && u > 0.0) {
            continue;
        }
        let denom = 1.0 + u * u - 2.0 * u * cos12;
        if denom <= 0.0 {
            continue;
        }
        let s1 = d12 / denom.sqrt();
        let s = refine_depths(
            Vector3::new(s1, u * s1, v * s1),
            cos12,
            cos13,
            cos23,
            d12,
            d13,
            d23,
        );
        if s.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            continue;
        }
        let cam = [
            NaPoint3::from(f1 * s.x),
            NaPoint3::from(f2 * s.y),
            NaPoint3::from(f3 * s.z),
        ];
        let pose = rigid_align(world, &cam);
        // Keep only candidates that actually reproduce the bearings.
        let mut ok = true;
        for (pw, f) in world.iter().zip([f1, f2, f3]) {
            let pc = pose.apply(pw);
            if pc.z <= 0.0 {
                ok = false;
                break;
            }
            let dir = pc.coords.normalize();
            if 1.0 - dir.dot(&f) > 1e-10 {
                ok = false;
                break;
            }
        }
        if ok {
            poses.push(pose);
        }
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, rotation_about, Intrinsics};
    use rand::Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let rot = rotation_about(axis, rng.random_range(-3.0..3.0));
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(6.0..12.0),
        );
        Pose::from_parts(rot, t)
    }

    #[test]
    fn construct_and_recover() {
        let k = Intrinsics::new(500.0, 480.0, 320.0, 240.0);
        let mut rng = crate::rng::seeded(17);
        let mut recovered = 0;
        for trial in 0..50 {
            let pose = random_pose(&mut rng);
            let inv = pose.inverse();
            // world points sampled in front of the camera
            let world: Vec<Point3> = (0..3)
                .map(|_| {
                    let cam = Point3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(4.0..9.0),
                    );
                    inv.apply(&cam)
                })
                .collect();
            let world: [Point3; 3] = [world[0], world[1], world[2]];
            let bearings: [Vector3<f64>; 3] = std::array::from_fn(|i| {
                let u = project_point(&pose, &k, &world[i]).unwrap();
                k.bearing(&u)
            });
            let sols = p3p_minimal(&world, &bearings).unwrap();
            assert!(!sols.is_empty(), "trial {trial}: no solutions");
            // pose distance: translation norm plus max rotation-matrix
            // deviation (arccos-based angles quantize around 1e-6 deg)
            let best = sols
                .iter()
                .map(|s| {
                    let dt = crate::geometry::translation_error(&s.translation, &pose.translation);
                    let dr = (s.rotation - pose.rotation)
                        .iter()
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                    dt.max(dr)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "trial {trial}: best candidate off by {best}");
            // every candidate must reproject the three points exactly
            for s in &sols {
                for w in &world {
                    let u_est = project_point(s, &k, w).unwrap();
                    let u_true_cam = s.apply(w);
                    assert!(u_true_cam.z > 0.0);
                    let _ = u_est;
                }
            }
            recovered += 1;
        }
        assert_eq!(recovered, 50);
    }

    #[test]
    fn candidates_reproject_within_tolerance() {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
        let mut rng = crate::rng::seeded(23);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let inv = pose.inverse();
            let world: [Point3; 3] = std::array::from_fn(|_| {
                inv.apply(&Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(4.0..9.0),
                ))
            });
            let pixels: [crate::geometry::Point2; 3] =
                std::array::from_fn(|i| project_point(&pose, &k, &world[i]).unwrap());
            let bearings: [Vector3<f64>; 3] = std::array::from_fn(|i| k.bearing(&pixels[i]));
            for sol in p3p_minimal(&world, &bearings).unwrap() {
                for i in 0..3 {
                    let u = project_point(&sol, &k, &world[i]).unwrap();
                    let err = (u - pixels[i]).norm();
                    assert!(err < 1e-6, "candidate reprojection error {err} px");
                }
            }
        }
    }

    #[test]
    fn collinear_points_rejected() {
        let world = [
            Point3::new(0.0, 0.0, 5.0),
            Point3::new(1.0, 0.0, 5.0),
            Point3::new(2.0, 0.0, 5.0),
        ];
        let bearings = [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.1, 0.0, 1.0),
            Vector3::new(0.2, 0.0, 1.0),
        ];
        assert_eq!(
            p3p_minimal(&world, &bearings).unwrap_err(),
            SolveError::DegenerateSample("collinear world points")
        );
    }

    #[test]
    fn world_frame_equivariance() {
        let k = Intrinsics::new(400.0, 400.0, 320.0, 240.0);
        let mut rng = crate::rng::seeded(29);
        let pose = random_pose(&mut rng);
        let inv = pose.inverse();
        let world: [Point3; 3] = std::array::from_fn(|_| {
            inv.apply(&Point3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..9.0),
            ))
        });
        let bearings: [Vector3<f64>; 3] = std::array::from_fn(|i| {
            k.bearing(&project_point(&pose, &k, &world[i]).unwrap())
        });

        // transform the world frame by a rigid map G; expected pose becomes pose∘G⁻¹
        let g = Pose::from_parts(
            rotation_about(Vector3::new(0.3, 0.8, -0.2), 1.1),
            Vector3::new(5.0, -2.0, 1.0),
        );
        let ginv = g.inverse();
        let world_g: [Point3; 3] = std::array::from_fn(|i| g.apply(&world[i]));

        let sols = p3p_minimal(&world, &bearings).unwrap();
        let sols_g = p3p_minimal(&world_g, &bearings).unwrap();
        assert_eq!(sols.len(), sols_g.len());
        for s in &sols {
            let expected = s.compose(&ginv);
            let best = sols_g
                .iter()
                .map(|sg| {
                    let dt = crate::geometry::translation_error(&sg.translation, &expected.translation);
                    let dr = (sg.rotation - expected.rotation)
                        .iter()
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                    dt.max(dr)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "equivariance violated: {best}");
        }
    }
}
