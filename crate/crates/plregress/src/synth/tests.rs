use super::*;
use crate::geometry::{project_line, project_point};

fn small_spec() -> SceneSpec {
    SceneSpec {
        n_point_landmarks: 300,
        n_line_landmarks: 30,
        n_train_images: 8,
        n_test_images: 3,
        points_per_image: [60, 90],
        lines_per_image: [6, 12],
        seed: 42,
        ..SceneSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = small_spec();
    let a = generate_scene(&spec).unwrap();
    let b = generate_scene(&spec).unwrap();
    assert_eq!(a.cameras.len(), b.cameras.len());
    for (ca, cb) in a.cameras.iter().zip(&b.cameras) {
        assert_eq!(ca.quaternion().map(f64::to_bits), cb.quaternion().map(f64::to_bits));
        assert_eq!(ca.translation().map(f64::to_bits), cb.translation().map(f64::to_bits));
    }
    for (fa, fb) in a.features.iter().zip(&b.features) {
        assert_eq!(fa.points.len(), fb.points.len());
        for (pa, pb) in fa.points.iter().zip(&fb.points) {
            assert_eq!(pa.location.x.to_bits(), pb.location.x.to_bits());
            for (da, db) in pa.descriptor.iter().zip(&pb.descriptor) {
                assert_eq!(da.to_bits(), db.to_bits());
            }
        }
        for (la, lb) in fa.lines.iter().zip(&fb.lines) {
            assert_eq!(la.descriptors, lb.descriptors);
        }
    }
}

#[test]
fn reliable_locations_match_projection_exactly() {
    let ds = generate_scene(&small_spec()).unwrap();
    for (cam, fs) in ds.cameras.iter().zip(&ds.features) {
        for p in &fs.points {
            if let Some(gt) = &p.gt3d {
                let u = project_point(cam.pose(), &cam.intrinsics, gt).unwrap();
                assert!((u - p.location).norm() < 1e-9);
            }
        }
        for l in &fs.lines {
            if let Some(gt) = &l.gt3d {
                let s = project_line(cam.pose(), &cam.intrinsics, gt).unwrap();
                assert!((s.a - l.segment.a).norm() < 1e-9);
                assert!((s.b - l.segment.b).norm() < 1e-9);
            }
        }
    }
}

#[test]
fn noiseless_observations_are_identical_across_images() {
    let spec = SceneSpec {
        descriptor_noise: 0.0,
        distractor_fraction: 0.0,
        n_point_landmarks: 60,
        n_line_landmarks: 0,
        n_train_images: 4,
        n_test_images: 1,
        points_per_image: [30, 40],
        lines_per_image: [0, 0],
        seed: 7,
        ..SceneSpec::default()
    };
    let ds = generate_scene(&spec).unwrap();
    // Group observations by their 3D landmark; all descriptors must agree bitwise.
    let mut seen: Vec<(Point3, Vec<f64>)> = Vec::new();
    let mut cross_image_matches = 0;
    for fs in &ds.features {
        for p in &fs.points {
            let gt = p.gt3d.expect("no distractors");
            if let Some((_, d)) = seen.iter().find(|(g, _)| (g - gt).norm() < 1e-12) {
                cross_image_matches += 1;
                assert_eq!(d.len(), p.descriptor.len());
                for (a, b) in d.iter().zip(&p.descriptor) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            } else {
                seen.push((gt, p.descriptor.clone()));
            }
        }
    }
    assert!(cross_image_matches > 20, "want repeated observations");
}

#[test]
fn distractor_fraction_matches_binomial_expectation() {
    let spec = SceneSpec {
        n_point_landmarks: 1200,
        n_line_landmarks: 0,
        n_train_images: 40,
        n_test_images: 1,
        points_per_image: [500, 500],
        lines_per_image: [0, 0],
        distractor_fraction: 0.3,
        seed: 11,
        ..SceneSpec::default()
    };
    let ds = generate_scene(&spec).unwrap();
    let mean = ds
        .features
        .iter()
        .map(|f| f.points.iter().filter(|p| !p.reliable).count() as f64)
        .sum::<f64>()
        / ds.features.len() as f64;
    // per-image sd = sqrt(500 * 0.3 * 0.7) ≈ 10.2; mean over 41 images
    assert!(
        (mean - 150.0).abs() < 8.0,
        "mean distractors per image {mean}, expected 150"
    );
}

#[test]
fn reliable_descriptor_nearest_neighbor_is_its_landmark() {
    let spec = SceneSpec {
        n_point_landmarks: 1000,
        n_line_landmarks: 60,
        n_train_images: 2,
        n_test_images: 1,
        points_per_image: [200, 250],
        lines_per_image: [10, 20],
        seed: 5,
        ..SceneSpec::default()
    };
    let ds = generate_scene(&spec).unwrap();
    // flat list of (code, landmark index)
    let mut codes: Vec<(&[f64], usize)> = Vec::new();
    for (i, lm) in ds.landmarks.iter().enumerate() {
        for c in &lm.codes {
            codes.push((c, i));
        }
    }
    let nn = |d: &[f64]| -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, i) in &codes {
            let dot: f64 = c.iter().zip(d).map(|(a, b)| a * b).sum();
            if dot > best.0 {
                best = (dot, *i);
            }
        }
        best.1
    };
    let mut total = 0usize;
    let mut correct = 0usize;
    for fs in &ds.features {
        for p in fs.points.iter().filter(|p| p.reliable) {
            let lm = &ds.landmarks[nn(&p.descriptor)];
            let LandmarkGeometry::Point(g) = &lm.geometry else {
                total += 1;
                continue;
            };
            total += 1;
            if (g - p.gt3d.unwrap()).norm() < 1e-12 {
                correct += 1;
            }
        }
        for l in fs.lines.iter().filter(|l| l.reliable) {
            for tok in l.descriptors.rows() {
                let row: Vec<f64> = tok.iter().copied().collect();
                let lm = &ds.landmarks[nn(&row)];
                total += 1;
                if let LandmarkGeometry::Line(g) = &lm.geometry {
                    let gt = l.gt3d.unwrap();
                    if (g.a - gt.a).norm() < 1e-12 && (g.b - gt.b).norm() < 1e-12 {
                        correct += 1;
                    }
                }
            }
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.99, "NN separability {acc:.4} below 0.99 ({correct}/{total})");
}

#[test]
fn train_and_test_poses_are_disjoint() {
    let ds = generate_scene(&small_spec()).unwrap();
    for tr in ds.cameras.iter().filter(|c| c.split == Split::Train) {
        for te in ds.cameras.iter().filter(|c| c.split == Split::Test) {
            assert!(pose_distance_ok(tr, te));
        }
    }
}

#[test]
fn cameras_view_the_scene_interior() {
    let ds = generate_scene(&small_spec()).unwrap();
    let center = Point3::new(0.0, 0.0, 0.0);
    let (w, h) = (
        ds.spec.image_size[0] as f64,
        ds.spec.image_size[1] as f64,
    );
    for cam in &ds.cameras {
        let u = project_point(cam.pose(), &cam.intrinsics, &center).unwrap();
        assert!(u.x > 0.0 && u.x < w && u.y > 0.0 && u.y < h);
    }
}

#[test]
fn infeasible_spec_is_reported() {
    let spec = SceneSpec {
        n_point_landmarks: 5,
        n_line_landmarks: 0,
        n_train_images: 1,
        n_test_images: 1,
        points_per_image: [50, 50],
        lines_per_image: [0, 0],
        distractor_fraction: 0.0,
        seed: 1,
        ..SceneSpec::default()
    };
    assert!(matches!(
        generate_scene(&spec),
        Err(SynthError::InfeasibleSpec(_))
    ));
}

#[test]
fn invalid_spec_is_rejected() {
    let spec = SceneSpec {
        distractor_fraction: 1.0,
        ..SceneSpec::default()
    };
    assert!(matches!(
        generate_scene(&spec),
        Err(SynthError::InvalidSpec(_))
    ));
}

mod io_tests {
    use super::*;
    use crate::synth::io::{read_dataset, write_dataset, DatasetIoError};
    use std::fs;

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            n_point_landmarks: 40,
            n_line_landmarks: 6,
            n_train_images: 3,
            n_test_images: 2,
            points_per_image: [15, 25],
            lines_per_image: [2, 5],
            seed: 99,
            ..SceneSpec::default()
        }
    }

    fn assert_datasets_equal(a: &SceneDataset, b: &SceneDataset) {
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.landmarks.len(), b.landmarks.len());
        for (la, lb) in a.landmarks.iter().zip(&b.landmarks) {
            assert_eq!(la.id, lb.id);
            assert_eq!(la.codes, lb.codes);
            match (&la.geometry, &lb.geometry) {
                (LandmarkGeometry::Point(pa), LandmarkGeometry::Point(pb)) => {
                    assert_eq!(pa.coords.map(f64::to_bits), pb.coords.map(f64::to_bits));
                }
                (LandmarkGeometry::Line(sa), LandmarkGeometry::Line(sb)) => {
                    assert_eq!(sa.a.coords.map(f64::to_bits), sb.a.coords.map(f64::to_bits));
                    assert_eq!(sa.b.coords.map(f64::to_bits), sb.b.coords.map(f64::to_bits));
                }
                _ => panic!("landmark kind mismatch"),
            }
        }
        for (ca, cb) in a.cameras.iter().zip(&b.cameras) {
            assert_eq!(ca.id, cb.id);
            assert_eq!(ca.split, cb.split);
            assert_eq!(ca.quaternion().map(f64::to_bits), cb.quaternion().map(f64::to_bits));
            assert_eq!(ca.translation().map(f64::to_bits), cb.translation().map(f64::to_bits));
            assert_eq!(
                ca.pose().rotation.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                cb.pose().rotation.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa.points.len(), fb.points.len());
            assert_eq!(fa.lines.len(), fb.lines.len());
            for (pa, pb) in fa.points.iter().zip(&fb.points) {
                assert_eq!(pa.descriptor, pb.descriptor);
                assert_eq!(pa.location.coords.map(f64::to_bits), pb.location.coords.map(f64::to_bits));
                assert_eq!(pa.reliable, pb.reliable);
                assert_eq!(pa.gt3d.is_some(), pb.gt3d.is_some());
            }
            for (la, lb) in fa.lines.iter().zip(&fb.lines) {
                assert_eq!(la.descriptors, lb.descriptors);
                assert_eq!(la.reliable, lb.reliable);
            }
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = generate_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_datasets_equal(&ds, &back);

        // second write must produce byte-identical files
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&back, dir2.path()).unwrap();
        for name in ["scene.json", "cameras.jsonl"] {
            let a = fs::read(dir.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after a round trip");
        }
        for cam in &ds.cameras {
            let rel = format!("features/{:06}.jsonl", cam.id);
            let a = fs::read(dir.path().join(&rel)).unwrap();
            let b = fs::read(dir2.path().join(&rel)).unwrap();
            assert_eq!(a, b, "{rel} differs after a round trip");
        }
    }

    #[test]
    fn truncated_file_reports_corrupt() {
        let ds = generate_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("features/000001.jsonl");
        let content = fs::read(&victim).unwrap();
        fs::write(&victim, &content[..content.len() / 2]).unwrap();
        match read_dataset(dir.path()) {
            Err(DatasetIoError::CorruptFile { path, line, .. }) => {
                assert!(path.ends_with("000001.jsonl"));
                assert!(line > 0);
            }
            other => panic!("expected CorruptFile, got {other:?}"),
        }
    }

    #[test]
    fn zero_line_dataset_round_trips() {
        let spec = SceneSpec {
            n_line_landmarks: 0,
            lines_per_image: [0, 0],
            ..tiny_spec()
        };
        let ds = generate_scene(&spec).unwrap();
        assert!(ds.features.iter().all(|f| f.lines.is_empty()));
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.features.iter().all(|f| f.lines.is_empty()));
    }
}
