//! Synthetic scene generation: 3D point and line landmarks, orbit cameras,
//! projected detections with a descriptor oracle, reliability labels, and
//! distractors.
//!
//! Landmark codes live on a `code_rank`-dimensional subspace of the
//! descriptor space; observations add isotropic Gaussian noise and
//! renormalize. Distractors draw fresh codes from the full descriptor
//! sphere. This keeps nearest-neighbor lookup of reliable observations
//! nearly perfect while giving the pruning heads a learnable signal that
//! does not require memorizing every landmark.
//!
//! Generation is pure given `(spec, seed)`: per-image work runs on derived
//! RNG streams, so results are bit-identical under any thread count.

pub mod io;

use ndarray::Array2;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project_line, project_point, Intrinsics, LineSegment2, LineSegment3, Point2, Point3, Pose,
};
use crate::model::{FeatureSet, LineFeature, PointFeature};
use crate::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
}

/// Everything that defines a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_point_landmarks: usize,
    pub n_line_landmarks: usize,
    /// Axis-aligned box extents in meters, centered on the origin.
    pub scene_box: [f64; 3],
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub image_size: [u32; 2],
    pub intrinsics: Intrinsics,
    /// Per-image point detection count range M_i (inclusive).
    pub points_per_image: [usize; 2],
    /// Per-image line detection count range N_i (inclusive).
    pub lines_per_image: [usize; 2],
    /// Fraction ρ of detections that are distractors.
    pub distractor_fraction: f64,
    /// σ of the Gaussian descriptor observation noise.
    pub descriptor_noise: f64,
    pub descriptor_dim: usize,
    /// Dimension of the subspace carrying landmark codes.
    pub code_rank: usize,
    /// Descriptors sampled along each line segment (C).
    pub line_tokens: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_point_landmarks: 2000,
            n_line_landmarks: 100,
            scene_box: [10.0, 10.0, 5.0],
            n_train_images: 200,
            n_test_images: 50,
            image_size: [640, 480],
            intrinsics: Intrinsics::new(500.0, 500.0, 320.0, 240.0),
            points_per_image: [400, 800],
            lines_per_image: [20, 60],
            distractor_fraction: 0.3,
            descriptor_noise: 0.05,
            descriptor_dim: 256,
            code_rank: 64,
            line_tokens: 10,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidSpec(msg.to_string()));
        if self.n_point_landmarks == 0 || self.n_train_images == 0 || self.n_test_images == 0 {
            return bad("landmark and image counts must be positive");
        }
        if self.scene_box.iter().any(|&e| e <= 0.0) {
            return bad("scene box extents must be positive");
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return bad("distractor fraction must be in [0, 1)");
        }
        if self.points_per_image[0] == 0 || self.points_per_image[0] > self.points_per_image[1] {
            return bad("points-per-image range is empty");
        }
        if self.lines_per_image[0] > self.lines_per_image[1] {
            return bad("lines-per-image range is empty");
        }
        if self.code_rank == 0 || self.code_rank > self.descriptor_dim {
            return bad("code rank must be in 1..=descriptor_dim");
        }
        if self.line_tokens == 0 {
            return bad("line token count must be positive");
        }
        if self.descriptor_noise < 0.0 {
            return bad("descriptor noise must be non-negative");
        }
        Ok(())
    }

    /// Diagonal of the scene box; the recall threshold scales with this.
    pub fn scene_diameter(&self) -> f64 {
        self.scene_box.iter().map(|e| e * e).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkKind {
    Point,
    Line,
}

#[derive(Debug, Clone)]
pub enum LandmarkGeometry {
    Point(Point3),
    Line(LineSegment3),
}

/// A 3D landmark with its identity code(s): one for points, one per endpoint
/// for lines.
#[derive(Debug, Clone)]
pub struct Landmark {
    pub id: u32,
    pub geometry: LandmarkGeometry,
    pub codes: Vec<Vec<f64>>,
}

impl Landmark {
    pub fn kind(&self) -> LandmarkKind {
        match self.geometry {
            LandmarkGeometry::Point(_) => LandmarkKind::Point,
            LandmarkGeometry::Line(_) => LandmarkKind::Line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Camera with its pose stored canonically as `[qw qx qy qz]` + translation
/// (world-to-camera). The quaternion is the serialization source of truth;
/// the rotation matrix is derived from it, which keeps read/write round
/// trips bit-exact.
#[derive(Debug, Clone)]
pub struct Camera {
    pub id: u32,
    pub split: Split,
    pub intrinsics: Intrinsics,
    quat: [f64; 4],
    trans: [f64; 3],
    pose: Pose,
}

impl Camera {
    pub fn from_quaternion(
        id: u32,
        split: Split,
        intrinsics: Intrinsics,
        quat: [f64; 4],
        trans: [f64; 3],
    ) -> Self {
        let pose = Pose::from_quaternion(quat, trans);
        Self {
            id,
            split,
            intrinsics,
            quat,
            trans,
            pose,
        }
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.quat
    }

    pub fn translation(&self) -> [f64; 3] {
        self.trans
    }
}

/// On-disk collection: cameras, per-image feature sets, ground-truth landmarks.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub spec: SceneSpec,
    pub landmarks: Vec<Landmark>,
    pub cameras: Vec<Camera>,
    /// Aligned with `cameras`.
    pub features: Vec<FeatureSet>,
}

impl SceneDataset {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.cameras
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

const MAX_ATTEMPTS: usize = 1000;

fn sample_in_box(rng: &mut impl Rng, ext: &[f64; 3]) -> Point3 {
    Point3::new(
        rng.random_range(-ext[0] / 2.0..ext[0] / 2.0),
        rng.random_range(-ext[1] / 2.0..ext[1] / 2.0),
        rng.random_range(-ext[2] / 2.0..ext[2] / 2.0),
    )
}

fn in_box(p: &Point3, ext: &[f64; 3]) -> bool {
    p.x.abs() <= ext[0] / 2.0 && p.y.abs() <= ext[1] / 2.0 && p.z.abs() <= ext[2] / 2.0
}

/// Orthonormal basis of the code subspace (descriptor_dim × code_rank).
fn code_basis(rng: &mut impl Rng, dim: usize, rank: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, rank, |_, _| rng::standard_normal(rng));
    let qr = m.qr();
    qr.q()
}

fn subspace_code(rng: &mut impl Rng, basis: &DMatrix<f64>) -> Vec<f64> {
    let rank = basis.ncols();
    let g = DMatrix::from_fn(rank, 1, |_, _| rng::standard_normal(rng));
    let v = basis * g;
    let norm = v.norm();
    v.column(0).iter().map(|x| x / norm).collect()
}

fn noisy_unit(rng: &mut impl Rng, code: &[f64], sigma: f64) -> Vec<f64> {
    let mut v: Vec<f64> = code
        .iter()
        .map(|&c| c + sigma * rng::standard_normal(rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn lerp_codes(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (1.0 - s) * x + s * y)
        .collect()
}

/// World-to-camera rotation looking from `eye` toward `target`, world +z up.
fn look_at_rotation(eye: &Point3, target: &Point3) -> Matrix3<f64> {
    let forward = (target - eye).normalize();
    let up = Vector3::z();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

fn orbit_camera(
    rng: &mut impl Rng,
    spec: &SceneSpec,
    azimuth: f64,
    id: u32,
    split: Split,
) -> Camera {
    let diameter = spec.scene_diameter();
    let radius = diameter * rng.random_range(0.70..0.95);
    let elevation: f64 = rng.random_range(0.25..0.70); // radians above the horizon
    let eye = Point3::new(
        radius * azimuth.cos() * elevation.cos(),
        radius * azimuth.sin() * elevation.cos(),
        radius * elevation.sin(),
    );
    let jitter = 0.05 * diameter;
    let target = Point3::new(
        rng.random_range(-jitter..jitter),
        rng.random_range(-jitter..jitter),
        rng.random_range(-jitter..jitter),
    );
    let rotation = look_at_rotation(&eye, &target);
    let translation = -(rotation * eye.coords);
    // Canonicalize through the quaternion so that serialized poses round-trip
    // to the exact same rotation matrix.
    let pose = Pose::from_parts(rotation, translation);
    let q = pose.to_quaternion();
    Camera::from_quaternion(id, split, spec.intrinsics, q, [
        translation.x,
        translation.y,
        translation.z,
    ])
}

fn pose_distance_ok(a: &Camera, b: &Camera) -> bool {
    let dt = crate::geometry::translation_error(
        &Vector3::from(a.translation()),
        &Vector3::from(b.translation()),
    );
    let dr = crate::geometry::rotation_error_deg(&a.pose().rotation, &b.pose().rotation);
    dt >= 0.1 || dr >= 2.0
}

struct VisibleSets {
    points: Vec<usize>,
    lines: Vec<usize>,
}

fn visible_landmarks(spec: &SceneSpec, landmarks: &[Landmark], pose: &Pose) -> VisibleSets {
    let k = &spec.intrinsics;
    let (w, h) = (spec.image_size[0] as f64, spec.image_size[1] as f64);
    let margin = 1.0;
    let inside = |u: &Point2| {
        u.x >= margin && u.x <= w - margin && u.y >= margin && u.y <= h - margin
    };
    let mut points = Vec::new();
    let mut lines = Vec::new();
    for (i, lm) in landmarks.iter().enumerate() {
        match &lm.geometry {
            LandmarkGeometry::Point(p) => {
                if let Ok(u) = project_point(pose, k, p) {
                    if inside(&u) {
                        points.push(i);
                    }
                }
            }
            LandmarkGeometry::Line(l) => {
                if let Ok(s) = project_line(pose, k, l) {
                    if inside(&s.a) && inside(&s.b) {
                        lines.push(i);
                    }
                }
            }
        }
    }
    VisibleSets { points, lines }
}

/// Generates the full dataset for `spec`. Deterministic given the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneDataset, SynthError> {
    spec.validate()?;
    let seed = spec.seed;

    let basis = code_basis(
        &mut rng::derived(seed, 0),
        spec.descriptor_dim,
        spec.code_rank,
    );

    // Landmarks: points then lines, ids in order.
    let mut lm_rng = rng::derived(seed, 1);
    let mut landmarks = Vec::with_capacity(spec.n_point_landmarks + spec.n_line_landmarks);
    for i in 0..spec.n_point_landmarks {
        landmarks.push(Landmark {
            id: i as u32,
            geometry: LandmarkGeometry::Point(sample_in_box(&mut lm_rng, &spec.scene_box)),
            codes: vec![subspace_code(&mut lm_rng, &basis)],
        });
    }
    let min_extent = spec
        .scene_box
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    for i in 0..spec.n_line_landmarks {
        let mut attempts = 0;
        let seg = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(SynthError::InfeasibleSpec(
                    "could not place a line landmark inside the scene box".into(),
                ));
            }
            let mid = sample_in_box(&mut lm_rng, &spec.scene_box);
            let dir = Vector3::from_column_slice(&rng::unit_vector(&mut lm_rng, 3));
            let half = 0.5 * lm_rng.random_range(0.15 * min_extent..0.6 * min_extent);
            let a = Point3::from(mid.coords - dir * half);
            let b = Point3::from(mid.coords + dir * half);
            if in_box(&a, &spec.scene_box) && in_box(&b, &spec.scene_box) {
                break LineSegment3::new(a, b).expect("distinct endpoints");
            }
        };
        landmarks.push(Landmark {
            id: (spec.n_point_landmarks + i) as u32,
            geometry: LandmarkGeometry::Line(seg),
            codes: vec![
                subspace_code(&mut lm_rng, &basis),
                subspace_code(&mut lm_rng, &basis),
            ],
        });
    }

    // Cameras: jittered orbit; test poses keep a minimum distance from every
    // train pose (translation >= 0.1 m or rotation >= 2 degrees).
    let mut cam_rng = rng::derived(seed, 2);
    let mut cameras: Vec<Camera> = Vec::with_capacity(spec.n_train_images + spec.n_test_images);
    for i in 0..spec.n_train_images {
        let az = std::f64::consts::TAU * (i as f64 + cam_rng.random_range(-0.3..0.3))
            / spec.n_train_images as f64;
        cameras.push(orbit_camera(&mut cam_rng, spec, az, i as u32, Split::Train));
    }
    for i in 0..spec.n_test_images {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(SynthError::InfeasibleSpec(
                    "could not place a test pose away from all train poses".into(),
                ));
            }
            let az = std::f64::consts::TAU * (i as f64 + 0.5 + cam_rng.random_range(-0.3..0.3))
                / spec.n_test_images as f64;
            let cam = orbit_camera(
                &mut cam_rng,
                spec,
                az,
                (spec.n_train_images + i) as u32,
                Split::Test,
            );
            if cameras
                .iter()
                .filter(|c| c.split == Split::Train)
                .all(|c| pose_distance_ok(c, &cam))
            {
                cameras.push(cam);
                break;
            }
        }
    }

    // Per-image detections on derived streams, parallel over images.
    let features: Result<Vec<FeatureSet>, SynthError> = cameras
        .par_iter()
        .map(|cam| {
            let mut rng = rng::derived(seed, 1000 + cam.id as u64);
            image_features(spec, &landmarks, cam, &mut rng)
        })
        .collect();

    Ok(SceneDataset {
        spec: spec.clone(),
        landmarks,
        cameras,
        features: features?,
    })
}

fn image_features(
    spec: &SceneSpec,
    landmarks: &[Landmark],
    cam: &Camera,
    rng: &mut impl Rng,
) -> Result<FeatureSet, SynthError> {
    let visible = visible_landmarks(spec, landmarks, cam.pose());
    let rho = spec.distractor_fraction;
    let sigma = spec.descriptor_noise;
    let (w, h) = (spec.image_size[0] as f64, spec.image_size[1] as f64);

    // Draw detection counts and distractor flags until the reliable demand
    // fits the visible landmark supply.
    let mut attempts = 0;
    let (point_flags, line_flags) = loop {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(SynthError::InfeasibleSpec(format!(
                "image {}: {} visible point landmarks / {} visible line landmarks \
                 cannot supply the requested detection counts",
                cam.id,
                visible.points.len(),
                visible.lines.len()
            )));
        }
        let m_i = rng.random_range(spec.points_per_image[0]..=spec.points_per_image[1]);
        let n_i = rng.random_range(spec.lines_per_image[0]..=spec.lines_per_image[1]);
        let pf: Vec<bool> = (0..m_i).map(|_| rng.random::<f64>() < rho).collect();
        let lf: Vec<bool> = (0..n_i).map(|_| rng.random::<f64>() < rho).collect();
        let need_p = pf.iter().filter(|d| !**d).count();
        let need_l = lf.iter().filter(|d| !**d).count();
        if need_p <= visible.points.len() && need_l <= visible.lines.len() {
            break (pf, lf);
        }
    };

    let need_p = point_flags.iter().filter(|d| !**d).count();
    let chosen_points = rand::seq::index::sample(rng, visible.points.len(), need_p);
    let mut point_iter = chosen_points.iter().map(|j| visible.points[j]);

    let mut points = Vec::with_capacity(point_flags.len());
    for &is_distractor in &point_flags {
        if is_distractor {
            points.push(PointFeature {
                descriptor: rng::unit_vector(rng, spec.descriptor_dim),
                location: Point2::new(rng.random_range(0.0..w), rng.random_range(0.0..h)),
                gt3d: None,
                reliable: false,
            });
        } else {
            let lm = &landmarks[point_iter.next().expect("sized above")];
            let LandmarkGeometry::Point(p) = &lm.geometry else {
                unreachable!("visible point list holds point landmarks");
            };
            let u = project_point(cam.pose(), &spec.intrinsics, p).expect("visible");
            points.push(PointFeature {
                descriptor: noisy_unit(rng, &lm.codes[0], sigma),
                location: u,
                gt3d: Some(*p),
                reliable: true,
            });
        }
    }
    points.shuffle(rng);

    let need_l = line_flags.iter().filter(|d| !**d).count();
    let chosen_lines = rand::seq::index::sample(rng, visible.lines.len(), need_l);
    let mut line_iter = chosen_lines.iter().map(|j| visible.lines[j]);
    let c_tokens = spec.line_tokens;

    let mut lines = Vec::with_capacity(line_flags.len());
    for &is_distractor in &line_flags {
        if is_distractor {
            // Random segment in the image with fresh full-sphere codes.
            let seg = loop {
                let a = Point2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
                let b = Point2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
                if (a - b).norm() >= 20.0 {
                    break LineSegment2::new(a, b).expect("distinct");
                }
            };
            let code_a = rng::unit_vector(rng, spec.descriptor_dim);
            let code_b = rng::unit_vector(rng, spec.descriptor_dim);
            let descriptors = line_token_matrix(rng, &code_a, &code_b, c_tokens, sigma, spec);
            lines.push(LineFeature {
                descriptors,
                segment: seg,
                gt3d: None,
                reliable: false,
            });
        } else {
            let lm = &landmarks[line_iter.next().expect("sized above")];
            let LandmarkGeometry::Line(l3) = &lm.geometry else {
                unreachable!("visible line list holds line landmarks");
            };
            let seg = project_line(cam.pose(), &spec.intrinsics, l3).expect("visible");
            let descriptors =
                line_token_matrix(rng, &lm.codes[0], &lm.codes[1], c_tokens, sigma, spec);
            lines.push(LineFeature {
                descriptors,
                segment: seg,
                gt3d: Some(*l3),
                reliable: true,
            });
        }
    }
    lines.shuffle(rng);

    Ok(FeatureSet { points, lines })
}

/// C noisy unit descriptors sampled at s = (k + 0.5)/C along the segment,
/// interpolating between the endpoint codes.
fn line_token_matrix(
    rng: &mut impl Rng,
    code_a: &[f64],
    code_b: &[f64],
    c_tokens: usize,
    sigma: f64,
    spec: &SceneSpec,
) -> Array2<f64> {
    let mut m = Array2::zeros((c_tokens, spec.descriptor_dim));
    for k in 0..c_tokens {
        let s = (k as f64 + 0.5) / c_tokens as f64;
        let code = lerp_codes(code_a, code_b, s);
        let tok = noisy_unit(rng, &code, sigma);
        for (j, x) in tok.iter().enumerate() {
            m[(k, j)] = *x;
        }
    }
    m
}

#[cfg(test)]
mod tests;
