//! Levenberg-Marquardt pose refinement over point and line inliers.
//!
//! Residuals: two pixel components per point, and per line the signed
//! perpendicular distance of each reprojected endpoint to the observed
//! segment's supporting line (two residuals per line). The pose increment is
//! a 6-vector `(ω, δt)` applied as `R ← exp(ω)·R`, `t ← t + δt`.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, RowVector3, Vector2, Vector6, Vector3};

use crate::geometry::{
    infinite_line_coeffs, Intrinsics, LineSegment2, LineSegment3, Point2, Point3, Pose, MIN_DEPTH,
};

use super::LocalizeError;

pub struct RefineOutcome {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RMS residual (pixels) at the returned pose.
    pub rms_residual: f64,
}

struct LineObs {
    normal: Vector2<f64>,
    offset: f64,
    endpoints: [Point3; 2],
}

/// 2×3 Jacobian of the pixel projection with respect to the camera-frame point.
fn projection_jacobian(k: &Intrinsics, cam: &Point3) -> Matrix2x3<f64> {
    let z = cam.z;
    Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * cam.x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * cam.y / (z * z),
    )
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Minimizes the summed squared residuals; the returned cost never exceeds
/// the initial cost. Requires at least six scalar residuals.
pub fn lm_refine(
    initial: &Pose,
    k: &Intrinsics,
    points: &[(Point2, Point3)],
    lines: &[(LineSegment2, LineSegment3)],
) -> Result<RefineOutcome, LocalizeError> {
    let n_res = 2 * points.len() + 2 * lines.len();
    if n_res < 6 {
        return Err(LocalizeError::InsufficientResiduals(n_res));
    }
    let line_obs: Vec<LineObs> = lines
        .iter()
        .map(|(obs, pred)| {
            let (normal, offset) = infinite_line_coeffs(obs)
                .expect("observed segments are validated non-degenerate");
            LineObs {
                normal,
                offset,
                endpoints: [pred.a, pred.b],
            }
        })
        .collect();

    // Total squared residual; None when any feature falls behind the camera.
    let cost_of = |pose: &Pose| -> Option<f64> {
        let mut c = 0.0;
        for (obs, pw) in points {
            let cam = pose.apply(pw);
            if cam.z <= MIN_DEPTH {
                return None;
            }
            let u = k.fx * cam.x / cam.z + k.cx - obs.x;
            let v = k.fy * cam.y / cam.z + k.cy - obs.y;
            c += u * u + v * v;
        }
        for lo in &line_obs {
            for pw in &lo.endpoints {
                let cam = pose.apply(pw);
                if cam.z <= MIN_DEPTH {
                    return None;
                }
                let u = k.fx * cam.x / cam.z + k.cx;
                let v = k.fy * cam.y / cam.z + k.cy;
                let s = lo.normal.x * u + lo.normal.y * v - lo.offset;
                c += s * s;
            }
        }
        Some(c)
    };

    let mut pose = *initial;
    let initial_cost = cost_of(&pose).unwrap_or(f64::INFINITY);
    let mut cost = initial_cost;
    let mut lambda = 1e-4;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..100 {
        iterations = it + 1;
        // Accumulate JᵀJ and Jᵀr at the current pose.
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let mut add_residual = |r: f64, jrow: RowVector3<f64>, q: &Vector3<f64>| {
            // d(cam)/dω = -[q]ₓ at ω = 0, d(cam)/dδt = I
            let jw = -(jrow * skew(q));
            let mut full = Vector6::zeros();
            for i in 0..3 {
                full[i] = jw[i];
                full[i + 3] = jrow[i];
            }
            jtj += full * full.transpose();
            jtr += full * r;
        };
        for (obs, pw) in points {
            // cam(ω, δt) = exp(ω)·q + t + δt with q = R·P
            let q = pose.rotation * pw.coords;
            let cam = Point3::from(q + pose.translation);
            let jp_cam = projection_jacobian(k, &cam);
            let ru = k.fx * cam.x / cam.z + k.cx - obs.x;
            let rv = k.fy * cam.y / cam.z + k.cy - obs.y;
            add_residual(ru, jp_cam.row(0).into(), &q);
            add_residual(rv, jp_cam.row(1).into(), &q);
        }
        for lo in &line_obs {
            for pw in &lo.endpoints {
                let q = pose.rotation * pw.coords;
                let cam = Point3::from(q + pose.translation);
                let jp_cam = projection_jacobian(k, &cam);
                let u = k.fx * cam.x / cam.z + k.cx;
                let v = k.fy * cam.y / cam.z + k.cy;
                let s = lo.normal.x * u + lo.normal.y * v - lo.offset;
                let jrow = lo.normal.x * jp_cam.row(0) + lo.normal.y * jp_cam.row(1);
                add_residual(s, jrow.into(), &q);
            }
        }

        // Convergence on the gradient (∇cost = 2·Jᵀr).
        if jtr.amax() * 2.0 < 1e-10 {
            converged = true;
            break;
        }

        // Try increasing damping until a step is accepted.
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 11.0;
                continue;
            };
            let delta = chol.solve(&(-jtr));
            if delta.norm() < 1e-12 {
                converged = true;
                accepted = true;
                break;
            }
            let omega = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let r_new = Rotation3::new(omega).matrix() * pose.rotation;
            let trial = Pose::from_parts(r_new, pose.translation + dt);
            match cost_of(&trial) {
                Some(c_new) if c_new <= cost => {
                    pose = trial;
                    cost = c_new;
                    lambda = (lambda / 9.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => {
                    lambda *= 11.0;
                }
            }
        }
        if converged || !accepted {
            break;
        }
    }

    Ok(RefineOutcome {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        rms_residual: (cost / n_res as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_line, project_point, rotation_about};
    use rand::Rng;

    fn setup(
        rng: &mut impl Rng,
        n_points: usize,
        n_lines: usize,
    ) -> (Pose, Intrinsics, Vec<(Point2, Point3)>, Vec<(LineSegment2, LineSegment3)>) {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
        let pose = Pose::from_parts(
            rotation_about(Vector3::new(0.2, -0.5, 1.0), 0.8),
            Vector3::new(0.4, -0.1, 8.0),
        );
        let inv = pose.inverse();
        let points: Vec<(Point2, Point3)> = (0..n_points)
            .map(|_| {
                let w = inv.apply(&Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(5.0..10.0),
                ));
                (project_point(&pose, &k, &w).unwrap(), w)
            })
            .collect();
        let lines: Vec<(LineSegment2, LineSegment3)> = (0..n_lines)
            .map(|_| {
                let a = inv.apply(&Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(5.0..10.0),
                ));
                let b = inv.apply(&Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(5.0..10.0),
                ));
                let seg = LineSegment3::new(a, b).unwrap();
                (project_line(&pose, &k, &seg).unwrap(), seg)
            })
            .collect();
        (pose, k, points, lines)
    }

    #[test]
    fn exact_initialization_stays_put() {
        let mut rng = crate::rng::seeded(3);
        let (pose, k, points, lines) = setup(&mut rng, 10, 4);
        let out = lm_refine(&pose, &k, &points, &lines).unwrap();
        assert!(out.final_cost < 1e-18);
        assert!(
            crate::geometry::translation_error(&out.pose.translation, &pose.translation) < 1e-12
        );
    }

    #[test]
    fn recovers_from_perturbed_initialization() {
        let mut rng = crate::rng::seeded(5);
        let (pose, k, points, lines) = setup(&mut rng, 12, 5);
        // perturb by ~1 degree / 5 cm
        let bad = Pose::from_parts(
            rotation_about(Vector3::new(0.1, 1.0, -0.3), 0.017) * pose.rotation,
            pose.translation + Vector3::new(0.03, -0.02, 0.03),
        );
        let out = lm_refine(&bad, &k, &points, &lines).unwrap();
        assert!(out.converged, "did not converge");
        let dt = crate::geometry::translation_error(&out.pose.translation, &pose.translation);
        let dr = crate::geometry::rotation_error_deg(&out.pose.rotation, &pose.rotation);
        assert!(dt < 1e-8, "translation error {dt}");
        assert!(dr < 1e-8, "rotation error {dr}");
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn lines_alone_constrain_nothing_but_cost_never_increases() {
        let mut rng = crate::rng::seeded(7);
        let (pose, k, points, lines) = setup(&mut rng, 4, 3);
        let bad = Pose::from_parts(
            rotation_about(Vector3::new(0.0, 0.0, 1.0), 0.01) * pose.rotation,
            pose.translation + Vector3::new(0.01, 0.0, 0.0),
        );
        let out = lm_refine(&bad, &k, &points, &lines).unwrap();
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn too_few_residuals_is_an_error() {
        let mut rng = crate::rng::seeded(9);
        let (pose, k, points, _) = setup(&mut rng, 2, 0);
        assert!(matches!(
            lm_refine(&pose, &k, &points, &[]),
            Err(LocalizeError::InsufficientResiduals(4))
        ));
    }
}
