//! Dataset serialization.
//!
//! Layout under the dataset directory:
//! - `scene.json`: the spec plus the landmark table (codes as base64 doubles)
//! - `cameras.jsonl`: one record per image, pose as `[qw qx qy qz tx ty tz]`
//!   (world-to-camera)
//! - `features/<image_id>.jsonl`: one record per detection
//!
//! All text is UTF-8, one JSON object per line in the `.jsonl` files. Doubles
//! round-trip bit-exactly: raw descriptor payloads travel as little-endian
//! base64 and scalar fields rely on shortest-round-trip float formatting.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Camera, Landmark, LandmarkGeometry, LandmarkKind, SceneDataset, SceneSpec, Split, SynthError,
};
use crate::geometry::{Intrinsics, LineSegment2, LineSegment3, Point2, Point3};
use crate::model::{FeatureSet, LineFeature, PointFeature};
use crate::tensor::Arr;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset file {path}:{line}: {msg}")]
    CorruptFile {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetIoError + '_ {
    move |source| DatasetIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, line: usize, msg: impl Into<String>) -> DatasetIoError {
    DatasetIoError::CorruptFile {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn encode_f64s<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    let mut bytes = Vec::new();
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("descriptor byte length {} not a multiple of 8", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct LandmarkRecord {
    id: u32,
    kind: LandmarkKind,
    geometry: Vec<f64>,
    codes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    spec: SceneSpec,
    landmarks: Vec<LandmarkRecord>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: u32,
    split: Split,
    intrinsics: Intrinsics,
    /// `[qw, qx, qy, qz, tx, ty, tz]`, world-to-camera.
    pose: [f64; 7],
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DescField {
    One(String),
    Many(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    kind: LandmarkKind,
    loc: Vec<f64>,
    desc: DescField,
    gt3d: Option<Vec<f64>>,
    reliable: u8,
}

fn feature_file(dir: &Path, image_id: u32) -> PathBuf {
    dir.join("features").join(format!("{image_id:06}.jsonl"))
}

/// Writes the dataset directory; overwrites existing files.
pub fn write_dataset(ds: &SceneDataset, dir: &Path) -> Result<(), DatasetIoError> {
    fs::create_dir_all(dir.join("features")).map_err(io_err(dir))?;

    let scene_path = dir.join("scene.json");
    let scene = SceneFile {
        spec: ds.spec.clone(),
        landmarks: ds
            .landmarks
            .iter()
            .map(|lm| LandmarkRecord {
                id: lm.id,
                kind: lm.kind(),
                geometry: match &lm.geometry {
                    LandmarkGeometry::Point(p) => vec![p.x, p.y, p.z],
                    LandmarkGeometry::Line(l) => {
                        vec![l.a.x, l.a.y, l.a.z, l.b.x, l.b.y, l.b.z]
                    }
                },
                codes: lm.codes.iter().map(|c| encode_f64s(c.iter())).collect(),
            })
            .collect(),
    };
    let f = File::create(&scene_path).map_err(io_err(&scene_path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &scene)
        .map_err(|e| corrupt(&scene_path, 0, e.to_string()))?;
    w.write_all(b"\n").map_err(io_err(&scene_path))?;
    w.flush().map_err(io_err(&scene_path))?;

    let cam_path = dir.join("cameras.jsonl");
    let f = File::create(&cam_path).map_err(io_err(&cam_path))?;
    let mut w = BufWriter::new(f);
    for cam in &ds.cameras {
        let q = cam.quaternion();
        let t = cam.translation();
        let rec = CameraRecord {
            id: cam.id,
            split: cam.split,
            intrinsics: cam.intrinsics,
            pose: [q[0], q[1], q[2], q[3], t[0], t[1], t[2]],
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| corrupt(&cam_path, 0, e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(&cam_path))?;
    }
    w.flush().map_err(io_err(&cam_path))?;

    for (cam, fs_set) in ds.cameras.iter().zip(&ds.features) {
        let path = feature_file(dir, cam.id);
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(f);
        for p in &fs_set.points {
            let rec = DetectionRecord {
                kind: LandmarkKind::Point,
                loc: vec![p.location.x, p.location.y],
                desc: DescField::One(encode_f64s(p.descriptor.iter())),
                gt3d: p.gt3d.map(|g| vec![g.x, g.y, g.z]),
                reliable: p.reliable as u8,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| corrupt(&path, 0, e.to_string()))?;
            w.write_all(b"\n").map_err(io_err(&path))?;
        }
        for l in &fs_set.lines {
            let rec = DetectionRecord {
                kind: LandmarkKind::Line,
                loc: vec![l.segment.a.x, l.segment.a.y, l.segment.b.x, l.segment.b.y],
                desc: DescField::Many(
                    l.descriptors
                        .rows()
                        .into_iter()
                        .map(|r| encode_f64s(r.iter()))
                        .collect(),
                ),
                gt3d: l
                    .gt3d
                    .map(|g| vec![g.a.x, g.a.y, g.a.z, g.b.x, g.b.y, g.b.z]),
                reliable: l.reliable as u8,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| corrupt(&path, 0, e.to_string()))?;
            w.write_all(b"\n").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn read_lines<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>, DatasetIoError>
where
    F: FnMut(usize, &str) -> Result<T, DatasetIoError>,
{
    let f = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(i + 1, &line)?);
    }
    Ok(out)
}

fn landmark_from_record(
    rec: LandmarkRecord,
    path: &Path,
    expected_dim: usize,
) -> Result<Landmark, DatasetIoError> {
    let geometry = match (rec.kind, rec.geometry.len()) {
        (LandmarkKind::Point, 3) => {
            LandmarkGeometry::Point(Point3::new(rec.geometry[0], rec.geometry[1], rec.geometry[2]))
        }
        (LandmarkKind::Line, 6) => {
            let g = &rec.geometry;
            let seg = LineSegment3::new(
                Point3::new(g[0], g[1], g[2]),
                Point3::new(g[3], g[4], g[5]),
            )
            .map_err(|e| corrupt(path, 0, format!("landmark {}: {e}", rec.id)))?;
            LandmarkGeometry::Line(seg)
        }
        (kind, n) => {
            return Err(corrupt(
                path,
                0,
                format!("landmark {}: {kind:?} with {n} geometry values", rec.id),
            ))
        }
    };
    let expected_codes = match rec.kind {
        LandmarkKind::Point => 1,
        LandmarkKind::Line => 2,
    };
    if rec.codes.len() != expected_codes {
        return Err(corrupt(
            path,
            0,
            format!("landmark {}: expected {expected_codes} codes", rec.id),
        ));
    }
    let mut codes = Vec::with_capacity(rec.codes.len());
    for c in &rec.codes {
        let v = decode_f64s(c).map_err(|m| corrupt(path, 0, format!("landmark {}: {m}", rec.id)))?;
        if v.len() != expected_dim {
            return Err(corrupt(
                path,
                0,
                format!("landmark {}: code width {} != {expected_dim}", rec.id, v.len()),
            ));
        }
        codes.push(v);
    }
    Ok(Landmark {
        id: rec.id,
        geometry,
        codes,
    })
}

fn detection_from_record(
    rec: DetectionRecord,
    path: &Path,
    line: usize,
    spec: &SceneSpec,
    points: &mut Vec<PointFeature>,
    lines: &mut Vec<LineFeature>,
) -> Result<(), DatasetIoError> {
    let bad = |msg: String| corrupt(path, line, msg);
    match rec.kind {
        LandmarkKind::Point => {
            if rec.loc.len() != 2 {
                return Err(bad(format!("point detection with {} loc values", rec.loc.len())));
            }
            let DescField::One(d) = rec.desc else {
                return Err(bad("point detection must carry one descriptor".into()));
            };
            let descriptor = decode_f64s(&d).map_err(bad)?;
            let gt3d = match rec.gt3d {
                None => None,
                Some(g) if g.len() == 3 => Some(Point3::new(g[0], g[1], g[2])),
                Some(g) => return Err(bad(format!("point gt3d with {} values", g.len()))),
            };
            points.push(PointFeature {
                descriptor,
                location: Point2::new(rec.loc[0], rec.loc[1]),
                gt3d,
                reliable: rec.reliable != 0,
            });
        }
        LandmarkKind::Line => {
            if rec.loc.len() != 4 {
                return Err(bad(format!("line detection with {} loc values", rec.loc.len())));
            }
            let DescField::Many(ds) = rec.desc else {
                return Err(bad("line detection must carry a descriptor list".into()));
            };
            let mut m = Arr::zeros((ds.len(), spec.descriptor_dim));
            for (r, d) in ds.iter().enumerate() {
                let v = decode_f64s(d).map_err(&bad)?;
                if v.len() != spec.descriptor_dim {
                    return Err(bad(format!(
                        "line token width {} != {}",
                        v.len(),
                        spec.descriptor_dim
                    )));
                }
                for (j, x) in v.iter().enumerate() {
                    m[(r, j)] = *x;
                }
            }
            let segment = LineSegment2::new(
                Point2::new(rec.loc[0], rec.loc[1]),
                Point2::new(rec.loc[2], rec.loc[3]),
            )
            .map_err(|e| bad(format!("degenerate 2D segment: {e}")))?;
            let gt3d = match rec.gt3d {
                None => None,
                Some(g) if g.len() == 6 => Some(
                    LineSegment3::new(Point3::new(g[0], g[1], g[2]), Point3::new(g[3], g[4], g[5]))
                        .map_err(|e| bad(format!("degenerate 3D segment: {e}")))?,
                ),
                Some(g) => return Err(bad(format!("line gt3d with {} values", g.len()))),
            };
            lines.push(LineFeature {
                descriptors: m,
                segment,
                gt3d,
                reliable: rec.reliable != 0,
            });
        }
    }
    Ok(())
}

/// Reads a dataset directory produced by [`write_dataset`], validating the
/// feature-set invariants against the stored spec.
pub fn read_dataset(dir: &Path) -> Result<SceneDataset, DatasetIoError> {
    let scene_path = dir.join("scene.json");
    let content = fs::read_to_string(&scene_path).map_err(io_err(&scene_path))?;
    let scene: SceneFile = serde_json::from_str(&content)
        .map_err(|e| corrupt(&scene_path, e.line(), e.to_string()))?;
    let spec = scene.spec;
    spec.validate()
        .map_err(|e: SynthError| corrupt(&scene_path, 0, e.to_string()))?;

    let mut landmarks = Vec::with_capacity(scene.landmarks.len());
    for rec in scene.landmarks {
        landmarks.push(landmark_from_record(rec, &scene_path, spec.descriptor_dim)?);
    }

    let cam_path = dir.join("cameras.jsonl");
    let cameras: Vec<Camera> = read_lines(&cam_path, |line, text| {
        let rec: CameraRecord = serde_json::from_str(text)
            .map_err(|e| corrupt(&cam_path, line, e.to_string()))?;
        let p = rec.pose;
        Ok(Camera::from_quaternion(
            rec.id,
            rec.split,
            rec.intrinsics,
            [p[0], p[1], p[2], p[3]],
            [p[4], p[5], p[6]],
        ))
    })?;

    let mut features = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let path = feature_file(dir, cam.id);
        let mut points = Vec::new();
        let mut lines = Vec::new();
        read_lines(&path, |line, text| {
            let rec: DetectionRecord =
                serde_json::from_str(text).map_err(|e| corrupt(&path, line, e.to_string()))?;
            detection_from_record(rec, &path, line, &spec, &mut points, &mut lines)
        })?;
        let fs_set = FeatureSet { points, lines };
        fs_set
            .validate(spec.descriptor_dim, spec.line_tokens)
            .map_err(|e| corrupt(&path, 0, e.to_string()))?;
        features.push(fs_set);
    }

    Ok(SceneDataset {
        spec,
        landmarks,
        cameras,
        features,
    })
}
