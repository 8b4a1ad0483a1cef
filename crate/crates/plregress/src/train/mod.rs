//! Optimizer, learning-rate schedule, and the training loop with the
//! θ-gated robust reprojection loss, checkpointing, and metrics logging.

pub mod checkpoint;

use std::io::Write;
use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, LineSegment2, Pose};
use crate::losses::{
    bce_loss, map_loss, reprojection_loss, robust_reprojection_loss, tau_schedule, total_loss,
    LossWeights,
};
use crate::model::{Graph, KeepRule, Model, ParamStore};
use crate::synth::{SceneDataset, Split};
use crate::tensor::Arr;

pub use checkpoint::{load_checkpoint, restore_model, save_checkpoint, Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{skipped} of {total} steps skipped on non-finite gradients (over 1%)")]
    TooManySkippedSteps { skipped: usize, total: usize },
    #[error("dataset has no training images")]
    EmptyTrainSplit,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub lr_init: f64,
    /// Images per optimizer step (gradient accumulation).
    pub batch: usize,
    pub weights: LossWeights,
    /// Iterations between held-out evaluations (0 disables).
    pub eval_every: usize,
    /// Iterations between checkpoints (0 keeps only the final one).
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Re-noise descriptors each epoch (the descriptor-space analogue of
    /// photometric augmentation).
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 50_000,
            lr_init: 2e-4,
            batch: 1,
            weights: LossWeights::default(),
            eval_every: 0,
            checkpoint_every: 0,
            log_every: 250,
            augment: true,
            seed: 1,
        }
    }
}

/// Piecewise-constant schedule: seven halvings at evenly spaced progress
/// points (eight equal segments over [0, 1)).
pub fn lr_at(progress: f64, lr_init: f64) -> f64 {
    assert!((0.0..=1.0).contains(&progress));
    let halvings = ((progress * 8.0).floor() as i32).min(7);
    lr_init * 0.5f64.powi(halvings)
}

#[derive(Debug, Error)]
#[error("non-finite gradient on parameter {name}")]
pub struct NonFiniteGradient {
    pub name: String,
}

/// Adam with bias correction; per-parameter moment buffers and step counts.
pub struct AdamState {
    m: Vec<Arr>,
    v: Vec<Arr>,
    step: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, a)| Array2::zeros(a.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        let step = vec![0; store.len()];
        Self {
            m,
            v,
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn moments(&self, idx: usize) -> (&Arr, &Arr, u64) {
        (&self.m[idx], &self.v[idx], self.step[idx])
    }

    pub fn set_m(&mut self, idx: usize, m: Arr) {
        self.m[idx] = m;
    }

    pub fn set_v(&mut self, idx: usize, v: Arr) {
        self.v[idx] = v;
    }

    pub fn set_step(&mut self, idx: usize, s: u64) {
        self.step[idx] = s;
    }

    /// One Adam update. Parameters without a gradient this step are left
    /// untouched. Aborts (no state change at all) when any gradient entry is
    /// non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Arr>],
        lr: f64,
    ) -> Result<(), NonFiniteGradient> {
        assert_eq!(grads.len(), store.len(), "gradient vector misaligned");
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NonFiniteGradient {
                        name: store.name(id).to_string(),
                    });
                }
            }
        }
        for (i, (id, g)) in store.ids().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.step[i] += 1;
            let t = self.step[i] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let p = store.value_mut(id);
            let (ms, vs, ps, gs) = (
                m.as_slice_mut().expect("layout"),
                v.as_slice_mut().expect("layout"),
                p.as_slice_mut().expect("layout"),
                g.as_slice().expect("layout"),
            );
            for j in 0..gs.len() {
                ms[j] = b1 * ms[j] + (1.0 - b1) * gs[j];
                vs[j] = b2 * vs[j] + (1.0 - b2) * gs[j] * gs[j];
                let mhat = ms[j] / bc1;
                let vhat = vs[j] / bc2;
                ps[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-image matrices assembled once so the hot loop only re-noises and
/// builds the graph.
pub struct PreparedImage {
    pub camera_index: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub point_desc: Arr,
    pub point_labels: Vec<f64>,
    pub point_reliable: Vec<bool>,
    pub gt_points: Arr,
    pub obs_points: Arr,
    pub line_tokens: Arr,
    pub n_lines: usize,
    pub line_labels: Vec<f64>,
    pub line_reliable: Vec<bool>,
    pub gt_lines: Arr,
    pub obs_lines: Vec<LineSegment2>,
}

pub fn prepare_image(ds: &SceneDataset, index: usize) -> PreparedImage {
    let cam = &ds.cameras[index];
    let fs = &ds.features[index];
    let dim = ds.spec.descriptor_dim;
    let c = ds.spec.line_tokens;

    let point_reliable = fs.point_reliability();
    let reliable_idx: Vec<usize> = (0..fs.points.len()).filter(|&i| point_reliable[i]).collect();
    let mut gt_points = Arr::zeros((reliable_idx.len(), 3));
    let mut obs_points = Arr::zeros((reliable_idx.len(), 2));
    for (r, &i) in reliable_idx.iter().enumerate() {
        let p = &fs.points[i];
        let g = p.gt3d.expect("reliable implies gt");
        gt_points[(r, 0)] = g.x;
        gt_points[(r, 1)] = g.y;
        gt_points[(r, 2)] = g.z;
        obs_points[(r, 0)] = p.location.x;
        obs_points[(r, 1)] = p.location.y;
    }

    let line_reliable = fs.line_reliability();
    let rel_lines: Vec<usize> = (0..fs.lines.len()).filter(|&i| line_reliable[i]).collect();
    let mut gt_lines = Arr::zeros((rel_lines.len(), 6));
    let mut obs_lines = Vec::with_capacity(rel_lines.len());
    for (r, &i) in rel_lines.iter().enumerate() {
        let l = &fs.lines[i];
        let g = l.gt3d.expect("reliable implies gt");
        for (j, v) in [g.a.x, g.a.y, g.a.z, g.b.x, g.b.y, g.b.z].into_iter().enumerate() {
            gt_lines[(r, j)] = v;
        }
        obs_lines.push(l.segment);
    }

    PreparedImage {
        camera_index: index,
        pose: *cam.pose(),
        intrinsics: cam.intrinsics,
        point_desc: fs.point_descriptor_matrix(dim),
        point_labels: point_reliable.iter().map(|&r| r as u8 as f64).collect(),
        point_reliable,
        gt_points,
        obs_points,
        line_tokens: fs.line_token_matrix(dim, c),
        n_lines: fs.lines.len(),
        line_labels: line_reliable.iter().map(|&r| r as u8 as f64).collect(),
        line_reliable,
        gt_lines,
        obs_lines,
    }
}

/// Adds fresh observation noise to unit descriptors and renormalizes
/// (per-epoch augmentation).
fn renoise(desc: &Arr, sigma: f64, rng: &mut impl rand::Rng) -> Arr {
    let mut out = desc.clone();
    for mut row in out.rows_mut() {
        let mut norm_sq = 0.0;
        for x in row.iter_mut() {
            *x += sigma * crate::rng::standard_normal(rng);
            norm_sq += *x * *x;
        }
        let inv = 1.0 / norm_sq.sqrt();
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    out
}

/// Loss components for one image at progress `t`, as tape tensors.
pub struct ImageLoss {
    pub map: f64,
    pub bce: f64,
    pub pi_robust: f64,
    pub total: f64,
}

/// Builds the full per-image loss graph and returns the scalar loss tensor
/// plus its component values.
pub fn image_loss_graph(
    g: &Graph,
    model: &Model,
    img: &PreparedImage,
    point_desc: &Arr,
    line_tokens: &Arr,
    t: f64,
    weights: &LossWeights,
) -> (crate::tensor::Tensor, ImageLoss) {
    let tape = &g.tape;
    let cfg = &model.config;

    let desc = g.constant(point_desc.clone());
    let pg = model
        .points
        .forward_graph(g, &desc, KeepRule::Teacher(&img.point_reliable), 0)
        .expect("teacher keep cannot fail");

    let tokens = g.constant(line_tokens.clone());
    let lg = model
        .lines
        .forward_graph(
            g,
            &tokens,
            img.n_lines,
            cfg.line_tokens,
            KeepRule::Teacher(&img.line_reliable),
        )
        .expect("teacher keep cannot fail");

    let l_map = map_loss(
        tape,
        pg.coords.as_ref().map(|c| (c, &img.gt_points)),
        lg.coords.as_ref().map(|c| (c, &img.gt_lines)),
    );
    let l_bce = bce_loss(&pg.alphas, &img.point_labels, &lg.alphas, &img.line_labels);
    let l_pi = reprojection_loss(
        tape,
        &img.pose,
        &img.intrinsics,
        pg.coords.as_ref().map(|c| (c, &img.obs_points)),
        lg.coords.as_ref().map(|c| (c, &img.obs_lines[..])),
        weights.tau_max,
    );
    let l_rob = robust_reprojection_loss(tape, &l_pi, t, weights);
    let total = total_loss(&l_map, &l_bce, &l_rob, weights);
    let components = ImageLoss {
        map: l_map.scalar_value(),
        bce: l_bce.scalar_value(),
        pi_robust: l_rob.scalar_value(),
        total: total.scalar_value(),
    };
    (total, components)
}

/// One JSONL metrics record per logging interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub t: f64,
    pub lr: f64,
    pub tau: f64,
    pub loss_m: f64,
    pub loss_bce: f64,
    pub loss_pi_robust: f64,
    pub loss_total: f64,
    pub eval_median_t_cm: Option<f64>,
    pub eval_median_r_deg: Option<f64>,
    pub eval_recall: Option<f64>,
}

pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub skipped_steps: usize,
    pub iterations_run: u64,
    pub first_logged_total: f64,
    pub last_logged_total: f64,
}

/// Evaluation hook used for periodic held-out metrics.
pub type EvalHook<'a> = dyn Fn(&Model) -> (f64, f64, f64) + 'a;

pub struct TrainSession<'a> {
    pub dataset: &'a SceneDataset,
    pub config: TrainConfig,
    pub config_hash: String,
    pub out_dir: PathBuf,
    /// Returns (median_t_cm, median_r_deg, recall) on the held-out split.
    pub eval_hook: Option<Box<EvalHook<'a>>>,
}

impl<'a> TrainSession<'a> {
    /// Runs training from `start_iteration` (0 for fresh runs; the stored
    /// iteration when resuming). Appends to the metrics log when resuming.
    pub fn run(
        &self,
        model: &mut Model,
        adam: &mut AdamState,
        start_iteration: u64,
    ) -> Result<TrainReport, TrainError> {
        let cfg = &self.config;
        cfg.weights.validate();
        let train_indices = self.dataset.indices_of(Split::Train);
        if train_indices.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
        std::fs::create_dir_all(&self.out_dir).map_err(|e| TrainError::Io {
            path: self.out_dir.clone(),
            source: e,
        })?;
        let metrics_path = self.out_dir.join("metrics.jsonl");
        let mut metrics = std::io::BufWriter::new(
            std::fs::File::options()
                .create(true)
                .append(true)
                .open(&metrics_path)
                .map_err(|e| TrainError::Io {
                    path: metrics_path.clone(),
                    source: e,
                })?,
        );

        let prepared: Vec<PreparedImage> = train_indices
            .iter()
            .map(|&i| prepare_image(self.dataset, i))
            .collect();
        let sigma = self.dataset.spec.descriptor_noise;
        let per_epoch = prepared.len();
        let total = cfg.total_iterations as u64;
        let mut skipped = 0usize;
        let max_skipped = (cfg.total_iterations / 100).max(1);

        let mut order: Vec<usize> = (0..per_epoch).collect();
        let mut epoch = u64::MAX; // force a shuffle on entry
        let mut iter = start_iteration;
        let mut accum: Vec<Option<Arr>> = vec![None; model.store.len()];
        let mut accum_count = 0usize;
        let mut first_logged_total = f64::NAN;
        let mut last_logged_total = f64::NAN;

        while iter < total {
            let this_epoch = iter / per_epoch as u64;
            if this_epoch != epoch {
                epoch = this_epoch;
                let mut rng = crate::rng::derived(cfg.seed, 10_000 + epoch);
                order.shuffle(&mut rng);
            }
            let img = &prepared[order[(iter % per_epoch as u64) as usize]];
            let t = iter as f64 / total as f64;
            let lr = lr_at(t, cfg.lr_init);
            let tau = tau_schedule(t, cfg.weights.tau_max, cfg.weights.tau_min);

            // descriptor-space augmentation: fresh noise each visit
            let (pd, lt);
            let (point_desc, line_tokens) = if cfg.augment && sigma > 0.0 {
                let mut rng = crate::rng::derived(cfg.seed, (1 << 32) | iter);
                pd = renoise(&img.point_desc, sigma, &mut rng);
                lt = renoise(&img.line_tokens, sigma, &mut rng);
                (&pd, &lt)
            } else {
                (&img.point_desc, &img.line_tokens)
            };

            let g = Graph::new(&model.store, true);
            let (loss, components) =
                image_loss_graph(&g, model, img, point_desc, line_tokens, t, &cfg.weights);
            loss.backward();
            let grads = g.param_grads();

            // gradient accumulation across the batch
            accum_count += 1;
            for (slot, g) in accum.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (Some(acc), Some(g)) => *acc += &g,
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
            if accum_count >= cfg.batch {
                if let Err(err) = adam.step(&mut model.store, &accum, lr) {
                    skipped += 1;
                    if skipped <= 5 {
                        eprintln!("warning: iteration {iter}: step skipped: {err}");
                    }
                    if skipped > max_skipped {
                        return Err(TrainError::TooManySkippedSteps {
                            skipped,
                            total: cfg.total_iterations,
                        });
                    }
                }
                accum = vec![None; model.store.len()];
                accum_count = 0;
            }

            let log_now = cfg.log_every > 0
                && (iter % cfg.log_every as u64 == 0 || iter + 1 == total);
            let eval_now = cfg.eval_every > 0
                && self.eval_hook.is_some()
                && (iter + 1 == total || (iter > 0 && iter % cfg.eval_every as u64 == 0));
            if log_now || eval_now {
                let eval = if eval_now {
                    self.eval_hook.as_ref().map(|h| h(model))
                } else {
                    None
                };
                let rec = MetricsRecord {
                    iter,
                    t,
                    lr,
                    tau,
                    loss_m: components.map,
                    loss_bce: components.bce,
                    loss_pi_robust: components.pi_robust,
                    loss_total: components.total,
                    eval_median_t_cm: eval.map(|e| e.0),
                    eval_median_r_deg: eval.map(|e| e.1),
                    eval_recall: eval.map(|e| e.2),
                };
                if first_logged_total.is_nan() {
                    first_logged_total = components.total;
                }
                last_logged_total = components.total;
                serde_json::to_writer(&mut metrics, &rec).map_err(|e| TrainError::Io {
                    path: metrics_path.clone(),
                    source: e.into(),
                })?;
                metrics.write_all(b"\n").map_err(|e| TrainError::Io {
                    path: metrics_path.clone(),
                    source: e,
                })?;
            }

            iter += 1;
            if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every as u64 == 0 && iter < total {
                let path = self.out_dir.join(format!("checkpoint_{iter:07}.ckpt"));
                save_checkpoint(&path, model, Some(adam), iter, &self.config_hash)?;
            }
        }
        metrics.flush().map_err(|e| TrainError::Io {
            path: metrics_path.clone(),
            source: e,
        })?;

        if skipped > max_skipped {
            return Err(TrainError::TooManySkippedSteps {
                skipped,
                total: cfg.total_iterations,
            });
        }
        let final_path = self.out_dir.join("checkpoint_final.ckpt");
        save_checkpoint(&final_path, model, Some(adam), iter, &self.config_hash)?;
        Ok(TrainReport {
            final_checkpoint: final_path,
            metrics_path,
            skipped_steps: skipped,
            iterations_run: iter - start_iteration,
            first_logged_total,
            last_logged_total,
        })
    }
}

#[cfg(test)]
mod tests;
