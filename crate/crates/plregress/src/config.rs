//! Flat key-value run configuration.
//!
//! One `key = value` pair per line, `#` comments. Keys are dot-namespaced
//! (`scene.*`, `model.*`, `train.*`, `loss.*`, `ransac.*`, `prune.*`,
//! `eval.*`, `paths.*`). Unknown keys are rejected. Every run logs the fully
//! resolved configuration and its hash.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::localize::{EvalOptions, RansacConfig};
use crate::model::ModelConfig;
use crate::synth::{SceneDataset, SceneSpec};
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {msg}")]
    BadValue { key: String, msg: String },
    #[error("malformed line {line}: expected 'key = value'")]
    Malformed { line: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    PaperExact,
    DeskScale,
}

impl ModelPreset {
    pub fn model_config(&self) -> ModelConfig {
        match self {
            ModelPreset::PaperExact => ModelConfig::paper_exact(),
            ModelPreset::DeskScale => ModelConfig::desk_scale(),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            ModelPreset::PaperExact => "paper",
            ModelPreset::DeskScale => "desk",
        }
    }
}

/// The resolved run configuration; field defaults are the documented run
/// defaults.
#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,
    pub scene: SceneSpec,
    pub preset: ModelPreset,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
    pub delta_p: f64,
    pub delta_l: f64,
    pub eval_use_lines: bool,
    /// Absolute recall threshold in cm; when unset the threshold is
    /// `recall_t_frac` of the scene diameter.
    pub recall_t_cm: Option<f64>,
    pub recall_t_frac: f64,
    pub recall_r_deg: f64,
    pub dataset_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            scene: SceneSpec::default(),
            preset: ModelPreset::DeskScale,
            train: TrainConfig::default(),
            ransac: RansacConfig::default(),
            delta_p: 0.8,
            delta_l: 0.01,
            eval_use_lines: true,
            recall_t_cm: None,
            recall_t_frac: 0.05,
            recall_r_deg: 5.0,
            dataset_dir: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError::BadValue {
            key: key.to_string(),
            msg: format!("expected bool, got '{other}'"),
        }),
    }
}

impl Config {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                // dependent defaults follow unless explicitly overridden later
                self.scene.seed = self.seed;
                self.train.seed = self.seed;
                self.ransac.seed = self.seed;
            }
            "scene.seed" => self.scene.seed = parse(key, v)?,
            "scene.n_point_landmarks" => self.scene.n_point_landmarks = parse(key, v)?,
            "scene.n_line_landmarks" => self.scene.n_line_landmarks = parse(key, v)?,
            "scene.box_x" => self.scene.scene_box[0] = parse(key, v)?,
            "scene.box_y" => self.scene.scene_box[1] = parse(key, v)?,
            "scene.box_z" => self.scene.scene_box[2] = parse(key, v)?,
            "scene.n_train_images" => self.scene.n_train_images = parse(key, v)?,
            "scene.n_test_images" => self.scene.n_test_images = parse(key, v)?,
            "scene.image_width" => self.scene.image_size[0] = parse(key, v)?,
            "scene.image_height" => self.scene.image_size[1] = parse(key, v)?,
            "scene.fx" => self.scene.intrinsics.fx = parse(key, v)?,
            "scene.fy" => self.scene.intrinsics.fy = parse(key, v)?,
            "scene.cx" => self.scene.intrinsics.cx = parse(key, v)?,
            "scene.cy" => self.scene.intrinsics.cy = parse(key, v)?,
            "scene.points_min" => self.scene.points_per_image[0] = parse(key, v)?,
            "scene.points_max" => self.scene.points_per_image[1] = parse(key, v)?,
            "scene.lines_min" => self.scene.lines_per_image[0] = parse(key, v)?,
            "scene.lines_max" => self.scene.lines_per_image[1] = parse(key, v)?,
            "scene.distractor_fraction" => self.scene.distractor_fraction = parse(key, v)?,
            "scene.descriptor_noise" => self.scene.descriptor_noise = parse(key, v)?,
            "scene.descriptor_dim" => self.scene.descriptor_dim = parse(key, v)?,
            "scene.code_rank" => self.scene.code_rank = parse(key, v)?,
            "scene.line_tokens" => self.scene.line_tokens = parse(key, v)?,
            "model.preset" => {
                self.preset = match v {
                    "paper" | "paper-exact" => ModelPreset::PaperExact,
                    "desk" | "desk-scale" => ModelPreset::DeskScale,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            msg: format!("expected 'paper' or 'desk', got '{other}'"),
                        })
                    }
                }
            }
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.total_iterations" => self.train.total_iterations = parse(key, v)?,
            "train.lr_init" => self.train.lr_init = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.log_every" => self.train.log_every = parse(key, v)?,
            "train.augment" => self.train.augment = parse_bool(key, v)?,
            "loss.delta_m" => self.train.weights.delta_m = parse(key, v)?,
            "loss.delta_bce" => self.train.weights.delta_bce = parse(key, v)?,
            "loss.delta_pi" => self.train.weights.delta_pi = parse(key, v)?,
            "loss.theta" => self.train.weights.theta = parse(key, v)?,
            "loss.tau_max" => self.train.weights.tau_max = parse(key, v)?,
            "loss.tau_min" => self.train.weights.tau_min = parse(key, v)?,
            "ransac.seed" => self.ransac.seed = parse(key, v)?,
            "ransac.max_iterations" => self.ransac.max_iterations = parse(key, v)?,
            "ransac.inlier_threshold_px" => self.ransac.inlier_threshold_px = parse(key, v)?,
            "ransac.line_inlier_threshold_px" => {
                self.ransac.line_inlier_threshold_px = parse(key, v)?
            }
            "ransac.confidence" => self.ransac.confidence = parse(key, v)?,
            "prune.delta_p" => self.delta_p = parse(key, v)?,
            "prune.delta_l" => self.delta_l = parse(key, v)?,
            "eval.use_lines" => self.eval_use_lines = parse_bool(key, v)?,
            "eval.recall_t_cm" => self.recall_t_cm = Some(parse(key, v)?),
            "eval.recall_t_frac" => self.recall_t_frac = parse(key, v)?,
            "eval.recall_r_deg" => self.recall_r_deg = parse(key, v)?,
            "paths.dataset" => self.dataset_dir = Some(PathBuf::from(v)),
            "paths.out" => self.out_dir = Some(PathBuf::from(v)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses file content (applied on top of the current values).
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed { line: i + 1 });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// `key=value` overrides, applied after the file (overrides win).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), ConfigError> {
        for pair in pairs {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(ConfigError::BadValue {
                    key: pair.clone(),
                    msg: "override must be key=value".to_string(),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Canonical resolved text: every key, sorted, one per line.
    pub fn resolved_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("scene.seed".into(), self.scene.seed.to_string()),
            (
                "scene.n_point_landmarks".into(),
                self.scene.n_point_landmarks.to_string(),
            ),
            (
                "scene.n_line_landmarks".into(),
                self.scene.n_line_landmarks.to_string(),
            ),
            ("scene.box_x".into(), self.scene.scene_box[0].to_string()),
            ("scene.box_y".into(), self.scene.scene_box[1].to_string()),
            ("scene.box_z".into(), self.scene.scene_box[2].to_string()),
            (
                "scene.n_train_images".into(),
                self.scene.n_train_images.to_string(),
            ),
            (
                "scene.n_test_images".into(),
                self.scene.n_test_images.to_string(),
            ),
            ("scene.image_width".into(), self.scene.image_size[0].to_string()),
            ("scene.image_height".into(), self.scene.image_size[1].to_string()),
            ("scene.fx".into(), self.scene.intrinsics.fx.to_string()),
            ("scene.fy".into(), self.scene.intrinsics.fy.to_string()),
            ("scene.cx".into(), self.scene.intrinsics.cx.to_string()),
            ("scene.cy".into(), self.scene.intrinsics.cy.to_string()),
            (
                "scene.points_min".into(),
                self.scene.points_per_image[0].to_string(),
            ),
            (
                "scene.points_max".into(),
                self.scene.points_per_image[1].to_string(),
            ),
            (
                "scene.lines_min".into(),
                self.scene.lines_per_image[0].to_string(),
            ),
            (
                "scene.lines_max".into(),
                self.scene.lines_per_image[1].to_string(),
            ),
            (
                "scene.distractor_fraction".into(),
                self.scene.distractor_fraction.to_string(),
            ),
            (
                "scene.descriptor_noise".into(),
                self.scene.descriptor_noise.to_string(),
            ),
            (
                "scene.descriptor_dim".into(),
                self.scene.descriptor_dim.to_string(),
            ),
            ("scene.code_rank".into(), self.scene.code_rank.to_string()),
            ("scene.line_tokens".into(), self.scene.line_tokens.to_string()),
            ("model.preset".into(), self.preset.as_str().to_string()),
            ("train.seed".into(), self.train.seed.to_string()),
            (
                "train.total_iterations".into(),
                self.train.total_iterations.to_string(),
            ),
            ("train.lr_init".into(), self.train.lr_init.to_string()),
            ("train.batch".into(), self.train.batch.to_string()),
            ("train.eval_every".into(), self.train.eval_every.to_string()),
            (
                "train.checkpoint_every".into(),
                self.train.checkpoint_every.to_string(),
            ),
            ("train.log_every".into(), self.train.log_every.to_string()),
            ("train.augment".into(), self.train.augment.to_string()),
            ("loss.delta_m".into(), self.train.weights.delta_m.to_string()),
            (
                "loss.delta_bce".into(),
                self.train.weights.delta_bce.to_string(),
            ),
            ("loss.delta_pi".into(), self.train.weights.delta_pi.to_string()),
            ("loss.theta".into(), self.train.weights.theta.to_string()),
            ("loss.tau_max".into(), self.train.weights.tau_max.to_string()),
            ("loss.tau_min".into(), self.train.weights.tau_min.to_string()),
            ("ransac.seed".into(), self.ransac.seed.to_string()),
            (
                "ransac.max_iterations".into(),
                self.ransac.max_iterations.to_string(),
            ),
            (
                "ransac.inlier_threshold_px".into(),
                self.ransac.inlier_threshold_px.to_string(),
            ),
            (
                "ransac.line_inlier_threshold_px".into(),
                self.ransac.line_inlier_threshold_px.to_string(),
            ),
            ("ransac.confidence".into(), self.ransac.confidence.to_string()),
            ("prune.delta_p".into(), self.delta_p.to_string()),
            ("prune.delta_l".into(), self.delta_l.to_string()),
            ("eval.use_lines".into(), self.eval_use_lines.to_string()),
            (
                "eval.recall_t_cm".into(),
                self.recall_t_cm.map(|v| v.to_string()).unwrap_or_default(),
            ),
            ("eval.recall_t_frac".into(), self.recall_t_frac.to_string()),
            ("eval.recall_r_deg".into(), self.recall_r_deg.to_string()),
            (
                "paths.dataset".into(),
                self.dataset_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            (
                "paths.out".into(),
                self.out_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            (
                "paths.checkpoint".into(),
                self.checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
        ];
        // "seed" first so that re-parsing the canonical text reproduces the
        // cascade-then-override semantics; everything else alphabetical.
        pairs.sort_by(|a, b| {
            (a.0 != "seed")
                .cmp(&(b.0 != "seed"))
                .then_with(|| a.0.cmp(&b.0))
        });
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a 64 fingerprint of the resolved text, as hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.resolved_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Evaluation options resolved against a dataset (recall threshold in
    /// absolute units or scaled to the scene diameter).
    pub fn eval_options(&self, ds: &SceneDataset) -> EvalOptions {
        let recall_t_m = match self.recall_t_cm {
            Some(cm) => cm / 100.0,
            None => self.recall_t_frac * ds.spec.scene_diameter(),
        };
        EvalOptions {
            delta_p: self.delta_p,
            delta_l: self.delta_l,
            ransac: self.ransac,
            use_lines: self.eval_use_lines,
            recall_t_m,
            recall_r_deg: self.recall_r_deg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        let text = cfg.resolved_text();
        let mut cfg2 = Config::default();
        // resolved text should be parseable except empty-valued path keys
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            if v.trim().is_empty() {
                continue;
            }
            cfg2.set(k.trim(), v).unwrap();
        }
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = Config::default();
        assert_eq!(
            cfg.set("scene.bogus", "1"),
            Err(ConfigError::UnknownKey("scene.bogus".into()))
        );
        assert!(cfg.apply_text("train.total_iterations = 10\nwhat = 3").is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let mut cfg = Config::default();
        cfg.apply_text("train.lr_init = 1e-3 # comment\n\n# full-line comment\nprune.delta_p = 0.5")
            .unwrap();
        assert_eq!(cfg.train.lr_init, 1e-3);
        assert_eq!(cfg.delta_p, 0.5);
        cfg.apply_overrides(&["train.lr_init=5e-4".to_string()]).unwrap();
        assert_eq!(cfg.train.lr_init, 5e-4);
    }

    #[test]
    fn seed_cascades_unless_overridden() {
        let mut cfg = Config::default();
        cfg.apply_text("seed = 42\ntrain.seed = 7").unwrap();
        assert_eq!(cfg.scene.seed, 42);
        assert_eq!(cfg.ransac.seed, 42);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn hash_changes_with_values() {
        let a = Config::default();
        let mut b = Config::default();
        b.set("train.lr_init", "3e-4").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn malformed_lines_are_reported() {
        let mut cfg = Config::default();
        assert_eq!(
            cfg.apply_text("not a key value line"),
            Err(ConfigError::Malformed { line: 1 })
        );
    }
}
