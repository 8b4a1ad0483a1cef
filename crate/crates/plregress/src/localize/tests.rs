use nalgebra::Vector3;
use rand::Rng;

use super::*;
use crate::geometry::{
    project_line, project_point, rotation_about, Intrinsics, LineSegment2, LineSegment3, Point2,
    Point3,
};
use crate::rng::standard_normal;

struct Scene {
    pose: Pose,
    k: Intrinsics,
    corr: Correspondences,
    diameter: f64,
}

fn make_scene(seed: u64, n_points: usize, n_lines: usize, noise_px: f64, outlier_frac: f64) -> Scene {
    let mut rng = crate::rng::seeded(seed);
    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
    let pose = Pose::from_parts(
        rotation_about(
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            rng.random_range(-2.5..2.5),
        ),
        Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 10.0),
    );
    let inv = pose.inverse();
    let mut corr = Correspondences::default();
    let mut world_pts: Vec<Point3> = Vec::new();
    for _ in 0..n_points {
        let w = inv.apply(&Point3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(6.0..14.0),
        ));
        world_pts.push(w);
        let mut u = project_point(&pose, &k, &w).unwrap();
        if rng.random::<f64>() < outlier_frac {
            u = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        } else if noise_px > 0.0 {
            u = Point2::new(
                u.x + noise_px * standard_normal(&mut rng),
                u.y + noise_px * standard_normal(&mut rng),
            );
        }
        corr.points.push((u, w));
    }
    for _ in 0..n_lines {
        let a = inv.apply(&Point3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(6.0..14.0),
        ));
        let b = inv.apply(&Point3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(6.0..14.0),
        ));
        let seg3 = LineSegment3::new(a, b).unwrap();
        let mut seg2 = project_line(&pose, &k, &seg3).unwrap();
        if rng.random::<f64>() < outlier_frac {
            seg2 = LineSegment2::new(
                Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            )
            .unwrap_or(seg2);
        } else if noise_px > 0.0 {
            seg2 = LineSegment2::new(
                Point2::new(
                    seg2.a.x + noise_px * standard_normal(&mut rng),
                    seg2.a.y + noise_px * standard_normal(&mut rng),
                ),
                Point2::new(
                    seg2.b.x + noise_px * standard_normal(&mut rng),
                    seg2.b.y + noise_px * standard_normal(&mut rng),
                ),
            )
            .unwrap_or(seg2);
        }
        corr.lines.push((seg2, seg3));
    }
    // world extent of the sampled cloud, used to scale error tolerances
    let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
    for w in &world_pts {
        for a in 0..3 {
            lo[a] = lo[a].min(w[a]);
            hi[a] = hi[a].max(w[a]);
        }
    }
    let diameter = (hi - lo).norm();
    Scene {
        pose,
        k,
        corr,
        diameter,
    }
}

#[test]
fn exact_correspondences_recover_pose() {
    let scene = make_scene(1, 40, 8, 0.0, 0.0);
    let cfg = RansacConfig {
        seed: 7,
        ..RansacConfig::default()
    };
    let res = ransac_pnp(&scene.corr, &scene.k, &cfg).unwrap();
    assert!(res.success);
    let dt = crate::geometry::translation_error(&res.pose.translation, &scene.pose.translation);
    let dr = crate::geometry::rotation_error_deg(&res.pose.rotation, &scene.pose.rotation);
    assert!(dt < 1e-6, "translation error {dt}");
    assert!(dr < 1e-6, "rotation error {dr}");
    assert_eq!(res.num_inlier_points, 40);
    assert_eq!(res.num_inlier_lines, 8);
}

#[test]
fn robust_to_outliers_and_noise() {
    let mut ok = 0;
    for seed in 0..20 {
        let scene = make_scene(100 + seed, 150, 20, 1.0, 0.3);
        let cfg = RansacConfig {
            seed: 1000 + seed,
            ..RansacConfig::default()
        };
        if let Ok(res) = ransac_pnp(&scene.corr, &scene.k, &cfg) {
            let dt =
                crate::geometry::translation_error(&res.pose.translation, &scene.pose.translation);
            if res.success && dt < 0.01 * scene.diameter {
                ok += 1;
            }
        }
    }
    assert!(ok >= 19, "only {ok}/20 noisy trials recovered the pose");
}

#[test]
fn too_few_points_is_an_error() {
    let scene = make_scene(3, 3, 0, 0.0, 0.0);
    assert_eq!(
        ransac_pnp(&scene.corr, &scene.k, &RansacConfig::default()).unwrap_err(),
        LocalizeError::InsufficientCorrespondences { got: 3, need: 4 }
    );
}

#[test]
fn deterministic_for_fixed_seed() {
    let scene = make_scene(11, 60, 10, 1.5, 0.2);
    let cfg = RansacConfig {
        seed: 42,
        ..RansacConfig::default()
    };
    let a = ransac_pnp(&scene.corr, &scene.k, &cfg).unwrap();
    let b = ransac_pnp(&scene.corr, &scene.k, &cfg).unwrap();
    assert_eq!(a.pose.translation, b.pose.translation);
    assert_eq!(a.pose.rotation, b.pose.rotation);
    assert_eq!(a.num_inlier_points, b.num_inlier_points);
    assert_eq!(a.num_inlier_lines, b.num_inlier_lines);
}

#[test]
fn lines_never_reduce_consensus() {
    for seed in 0..10 {
        let scene = make_scene(200 + seed, 50, 12, 1.0, 0.25);
        let cfg = RansacConfig {
            seed: 5 + seed,
            ..RansacConfig::default()
        };
        let mut points_only = scene.corr.clone();
        points_only.lines.clear();
        let with_lines = ransac_pnp(&scene.corr, &scene.k, &cfg);
        let without = ransac_pnp(&points_only, &scene.k, &cfg);
        if let (Ok(a), Ok(b)) = (with_lines, without) {
            assert!(
                a.num_inlier_points + a.num_inlier_lines >= b.num_inlier_points,
                "seed {seed}: total inliers with lines < points-only"
            );
        }
    }
}

#[test]
fn refinement_never_increases_cost() {
    let scene = make_scene(31, 30, 6, 2.0, 0.0);
    let perturbed = Pose::from_parts(
        rotation_about(Vector3::new(0.3, 0.2, -1.0), 0.02) * scene.pose.rotation,
        scene.pose.translation + Vector3::new(0.05, -0.02, 0.04),
    );
    let out = lm_refine(&perturbed, &scene.k, &scene.corr.points, &scene.corr.lines).unwrap();
    assert!(out.final_cost <= out.initial_cost);
}

#[test]
fn summary_medians_and_strict_recall() {
    // errors {1,2,3,4,5} cm, rotations all 0, thresholds 5 cm / 5 deg
    let images: Vec<ImageEval> = (0..5)
        .map(|i| ImageEval {
            image_id: i as u32,
            success: true,
            pose: None,
            inliers_pts: 10,
            inliers_lines: 0,
            err_t: Some(1.0 + i as f64),
            err_r: Some(0.0),
            recalled: false,
        })
        .collect();
    let s = summarize(images, 5.0, 5.0);
    assert_eq!(s.median_t_cm, 3.0);
    assert_eq!(s.median_r_deg, 0.0);
    // the 5.0 cm error is NOT recalled: strict inequality
    assert!((s.recall - 0.8).abs() < 1e-12);
    assert!(!s.flagged);

    // all exact
    let images: Vec<ImageEval> = (0..4)
        .map(|i| ImageEval {
            image_id: i,
            success: true,
            pose: None,
            inliers_pts: 10,
            inliers_lines: 2,
            err_t: Some(0.0),
            err_r: Some(0.0),
            recalled: false,
        })
        .collect();
    let s = summarize(images, 5.0, 5.0);
    assert_eq!(s.median_t_cm, 0.0);
    assert_eq!(s.recall, 1.0);

    // failures count as non-recalled and flag the run at >= 50%
    let images: Vec<ImageEval> = (0..4)
        .map(|i| ImageEval {
            image_id: i,
            success: i < 2,
            pose: None,
            inliers_pts: 0,
            inliers_lines: 0,
            err_t: (i < 2).then_some(1.0),
            err_r: (i < 2).then_some(0.1),
            recalled: false,
        })
        .collect();
    let s = summarize(images, 5.0, 5.0);
    assert_eq!(s.failures, 2);
    assert!(s.flagged);
    assert_eq!(s.recall, 0.5);
    assert_eq!(s.median_t_cm, 1.0);
}
