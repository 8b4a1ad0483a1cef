//! The two regression branches: points (early pruning → 5 self-attention
//! layers → regressor MLP) and lines (token encoder → 1 self-attention layer
//! → late pruning → regressor MLP). The branches share no parameters.

mod attention;
mod encoder;
mod features;
mod params;

pub use attention::SelfAttentionLayer;
pub use encoder::LineTokenEncoder;
pub use features::{FeatureSet, FeatureSetError, LineFeature, PointFeature};
pub use params::{xavier_uniform, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{LineSegment3, Point3};
use crate::tensor::{concat_rows, Arr, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("line set carries {got} token rows, expected {expected}")]
    WrongTokenCount { expected: usize, got: usize },
    #[error("only {kept} points kept at inference, pose solving needs {needed}")]
    TooFewKept { kept: usize, needed: usize },
}

/// Network shapes. `paper_exact` follows the published configuration;
/// `desk_scale` divides all internal widths by four for fast CI runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input descriptor width (from the dataset).
    pub descriptor_dim: usize,
    /// Internal attention/descriptor width.
    pub width: usize,
    pub heads: usize,
    pub point_attention_layers: usize,
    /// Regressor widths starting at the lift output; last entry must be 3.
    pub point_regressor: Vec<usize>,
    /// Regressor widths starting at the lift output; last entry must be 6.
    pub line_regressor: Vec<usize>,
    /// Number of descriptors sampled along each 2D segment (C).
    pub line_tokens: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn paper_exact() -> Self {
        Self {
            descriptor_dim: 256,
            width: 256,
            heads: 4,
            point_attention_layers: 5,
            point_regressor: vec![512, 1024, 1024, 512, 3],
            line_regressor: vec![512, 1024, 512, 6],
            line_tokens: 10,
            ln_eps: 1e-5,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            descriptor_dim: 256,
            width: 64,
            heads: 4,
            point_attention_layers: 5,
            point_regressor: vec![128, 256, 256, 128, 3],
            line_regressor: vec![128, 256, 128, 6],
            line_tokens: 10,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) {
        assert_eq!(self.point_regressor.last(), Some(&3));
        assert_eq!(self.line_regressor.last(), Some(&6));
        assert!(self.width % self.heads == 0);
        assert!(self.point_attention_layers >= 1);
        assert!(self.line_tokens >= 1);
    }
}

/// How the kept subset is chosen.
#[derive(Clone, Copy)]
pub enum KeepRule<'a> {
    /// Teacher forcing: keep exactly the features labeled reliable.
    Teacher(&'a [bool]),
    /// Inference: keep features with `alpha > delta`.
    Threshold(f64),
}

/// Graph-level output of one branch pass.
pub struct BranchGraph {
    /// Reliability score per input feature (n×1), in input order.
    pub alphas: Tensor,
    /// Indices of kept features, ascending.
    pub kept: Vec<usize>,
    /// Coordinates for kept features (k×3 points / k×6 lines); `None` when
    /// nothing was kept.
    pub coords: Option<Tensor>,
}

/// Canonical row order: lexicographic by row contents under `total_cmp`.
///
/// Set reductions (softmax sums, attention-weighted sums, token pooling) run
/// in this order so their floating-point results do not depend on the input
/// ordering, which is what makes permutation equivariance bit-exact.
pub(crate) fn canonical_row_order(m: &Arr) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| {
        for j in 0..m.ncols() {
            let c = m[(a, j)].total_cmp(&m[(b, j)]);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

pub(crate) fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}

fn select_kept(alphas: &Arr, rule: KeepRule, n: usize) -> Vec<usize> {
    match rule {
        KeepRule::Teacher(reliable) => {
            assert_eq!(reliable.len(), n, "reliability label count mismatch");
            (0..n).filter(|&i| reliable[i]).collect()
        }
        KeepRule::Threshold(delta) => (0..n).filter(|&i| alphas[(i, 0)] > delta).collect(),
    }
}

pub struct PointBranch {
    input_proj: Option<Linear>,
    prune: Mlp,
    attention: Vec<SelfAttentionLayer>,
    lift: Linear,
    regressor: Mlp,
}

impl PointBranch {
    fn new(ps: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let input_proj = (cfg.descriptor_dim != cfg.width)
            .then(|| Linear::new(ps, rng, "point.proj", cfg.descriptor_dim, cfg.width));
        let prune = Mlp::new(ps, rng, "point.prune", &[cfg.width, cfg.width, 1]);
        let attention = (0..cfg.point_attention_layers)
            .map(|i| {
                SelfAttentionLayer::new(ps, rng, &format!("point.attn.{i}"), cfg.width, cfg.heads)
            })
            .collect();
        let lift = Linear::new(ps, rng, "point.lift", cfg.width, cfg.point_regressor[0]);
        let regressor = Mlp::new(ps, rng, "point.regress", &cfg.point_regressor);
        Self {
            input_proj,
            prune,
            attention,
            lift,
            regressor,
        }
    }

    /// Scores all points, keeps a subset, refines the kept descriptors with
    /// the attention stack, and regresses one 3-vector per kept point.
    ///
    /// `descriptors` is the n×descriptor_dim input matrix (a tape constant).
    /// `min_kept` applies to threshold (inference) keeps only.
    pub fn forward_graph(
        &self,
        g: &Graph,
        descriptors: &Tensor,
        rule: KeepRule,
        min_kept: usize,
    ) -> Result<BranchGraph, ModelError> {
        let (n, _) = descriptors.shape();
        let x_all = match &self.input_proj {
            Some(proj) => proj.forward(g, descriptors),
            None => descriptors.clone(),
        };
        let alphas = self.prune.forward(g, &x_all).sigmoid();
        let kept = select_kept(&alphas.value(), rule, n);
        if matches!(rule, KeepRule::Threshold(_)) && kept.len() < min_kept {
            return Err(ModelError::TooFewKept {
                kept: kept.len(),
                needed: min_kept,
            });
        }
        if kept.is_empty() {
            return Ok(BranchGraph {
                alphas,
                kept,
                coords: None,
            });
        }
        let mut x = x_all.gather_rows(&kept);
        for layer in &self.attention {
            x = layer.forward(g, &x);
        }
        let coords = self.regressor.forward(g, &self.lift.forward(g, &x));
        Ok(BranchGraph {
            alphas,
            kept,
            coords: Some(coords),
        })
    }
}

pub struct LineBranch {
    input_proj: Option<Linear>,
    encoder: LineTokenEncoder,
    refine: SelfAttentionLayer,
    prune: Mlp,
    lift: Linear,
    regressor: Mlp,
}

impl LineBranch {
    fn new(ps: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let input_proj = (cfg.descriptor_dim != cfg.width)
            .then(|| Linear::new(ps, rng, "line.proj", cfg.descriptor_dim, cfg.width));
        let encoder = LineTokenEncoder::new(ps, rng, "line.encoder", cfg.width, cfg.heads, cfg.ln_eps);
        let refine = SelfAttentionLayer::new(ps, rng, "line.attn", cfg.width, cfg.heads);
        let prune = Mlp::new(ps, rng, "line.prune", &[cfg.width, cfg.width, 1]);
        let lift = Linear::new(ps, rng, "line.lift", cfg.width, cfg.line_regressor[0]);
        let regressor = Mlp::new(ps, rng, "line.regress", &cfg.line_regressor);
        Self {
            input_proj,
            encoder,
            refine,
            prune,
            lift,
            regressor,
        }
    }

    /// Encodes every line's C tokens to one descriptor, refines all line
    /// descriptors together with one self-attention layer, then prunes and
    /// regresses 6-vectors for the kept lines.
    ///
    /// Attention runs before pruning, so a surviving line's coordinates do
    /// not depend on the pruning threshold.
    ///
    /// `tokens` is the (N·C)×descriptor_dim stack of all lines' tokens.
    pub fn forward_graph(
        &self,
        g: &Graph,
        tokens: &Tensor,
        n_lines: usize,
        c_tokens: usize,
        rule: KeepRule,
    ) -> Result<BranchGraph, ModelError> {
        if n_lines == 0 {
            return Ok(BranchGraph {
                alphas: g.constant(Arr::zeros((0, 1))),
                kept: Vec::new(),
                coords: None,
            });
        }
        let (rows, _) = tokens.shape();
        if rows != n_lines * c_tokens {
            return Err(ModelError::WrongTokenCount {
                expected: n_lines * c_tokens,
                got: rows,
            });
        }
        let projected = match &self.input_proj {
            Some(proj) => proj.forward(g, tokens),
            None => tokens.clone(),
        };
        let pooled: Vec<Tensor> = (0..n_lines)
            .map(|i| {
                let line_tokens = projected.slice_rows(i * c_tokens, (i + 1) * c_tokens);
                self.encoder.forward(g, &line_tokens)
            })
            .collect();
        let descriptors = if pooled.len() == 1 {
            pooled[0].clone()
        } else {
            concat_rows(&pooled)
        };
        let refined = self.refine.forward(g, &descriptors);
        let alphas = self.prune.forward(g, &refined).sigmoid();
        let kept = select_kept(&alphas.value(), rule, n_lines);
        if kept.is_empty() {
            return Ok(BranchGraph {
                alphas,
                kept,
                coords: None,
            });
        }
        let x = refined.gather_rows(&kept);
        let coords = self.regressor.forward(g, &self.lift.forward(g, &x));
        Ok(BranchGraph {
            alphas,
            kept,
            coords: Some(coords),
        })
    }
}

/// Per-feature inference output.
#[derive(Debug, Clone)]
pub struct PointPrediction {
    pub alpha: f64,
    pub kept: bool,
    pub coords: Option<Point3>,
}

#[derive(Debug, Clone)]
pub struct LinePrediction {
    pub alpha: f64,
    pub kept: bool,
    pub coords: Option<LineSegment3>,
}

/// Both regression branches plus their parameter store.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub points: PointBranch,
    pub lines: LineBranch,
}

/// Minimum kept points required for downstream pose solving.
pub const MIN_KEPT_POINTS: usize = 4;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        config.validate();
        let mut ps = ParamStore::new();
        let mut rng = crate::rng::seeded(seed);
        let points = PointBranch::new(&mut ps, &mut rng, &config);
        let lines = LineBranch::new(&mut ps, &mut rng, &config);
        Self {
            config,
            store: ps,
            points,
            lines,
        }
    }

    /// Parameter names prefixed `point.` / `line.`, for the branch-separation
    /// checks and optimizer bookkeeping.
    pub fn point_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.name(id).starts_with("point."))
            .collect()
    }

    pub fn line_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.name(id).starts_with("line."))
            .collect()
    }

    /// Inference on one feature set with threshold pruning.
    pub fn infer(
        &self,
        features: &FeatureSet,
        delta_p: f64,
        delta_l: f64,
    ) -> Result<(Vec<PointPrediction>, Vec<LinePrediction>), ModelError> {
        let g = Graph::new(&self.store, false);
        let cfg = &self.config;

        let desc = g.constant(features.point_descriptor_matrix(cfg.descriptor_dim));
        let pg = self
            .points
            .forward_graph(&g, &desc, KeepRule::Threshold(delta_p), MIN_KEPT_POINTS)?;
        let point_preds = extract_points(features.points.len(), &pg);

        let tokens = g.constant(features.line_token_matrix(cfg.descriptor_dim, cfg.line_tokens));
        let lg = self.lines.forward_graph(
            &g,
            &tokens,
            features.lines.len(),
            cfg.line_tokens,
            KeepRule::Threshold(delta_l),
        )?;
        let line_preds = extract_lines(features.lines.len(), &lg);

        Ok((point_preds, line_preds))
    }
}

fn extract_points(n: usize, bg: &BranchGraph) -> Vec<PointPrediction> {
    let alphas = bg.alphas.value();
    let coords = bg.coords.as_ref().map(|c| c.value());
    let mut out: Vec<PointPrediction> = (0..n)
        .map(|i| PointPrediction {
            alpha: alphas[(i, 0)],
            kept: false,
            coords: None,
        })
        .collect();
    if let Some(c) = coords {
        for (row, &i) in bg.kept.iter().enumerate() {
            out[i].kept = true;
            out[i].coords = Some(Point3::new(c[(row, 0)], c[(row, 1)], c[(row, 2)]));
        }
    }
    out
}

fn extract_lines(n: usize, bg: &BranchGraph) -> Vec<LinePrediction> {
    let alphas = bg.alphas.value();
    let coords = bg.coords.as_ref().map(|c| c.value());
    let mut out: Vec<LinePrediction> = (0..n)
        .map(|i| LinePrediction {
            alpha: alphas[(i, 0)],
            kept: false,
            coords: None,
        })
        .collect();
    if let Some(c) = coords {
        for (row, &i) in bg.kept.iter().enumerate() {
            out[i].kept = true;
            out[i].coords = Some(LineSegment3 {
                a: Point3::new(c[(row, 0)], c[(row, 1)], c[(row, 2)]),
                b: Point3::new(c[(row, 3)], c[(row, 4)], c[(row, 5)]),
            });
        }
    }
    out
}
