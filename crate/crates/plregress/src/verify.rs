//! Finite-difference verification suite: every tensor operator, every model
//! layer, and every loss (composed through projection) is checked against
//! central differences at multiple random points.
//!
//! The CLI `gradcheck` subcommand runs this suite and fails on any result
//! above tolerance; the acceptance tests assert the same.

use ndarray::arr2;
use rand::Rng;

use crate::geometry::{Intrinsics, LineSegment2, Point2, Pose};
use crate::losses::{
    map_loss, reprojection_loss, robust_reprojection_loss, total_loss, LossWeights,
};
use crate::model::{
    Graph, KeepRule, LineTokenEncoder, Mlp, Model, ModelConfig, ParamStore, SelfAttentionLayer,
};
use crate::rng::standard_normal;
use crate::tensor::{concat_cols, concat_rows, gradcheck, Arr, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const POINTS: usize = 10;

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Arr {
    Arr::from_shape_fn((r, c), |_| standard_normal(rng))
}

/// Worst gradcheck error over `POINTS` random inputs.
fn check_op<F>(name: &str, rng: &mut impl Rng, rows: usize, cols: usize, f: F) -> CheckResult
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x = randn(rng, rows, cols);
        worst = worst.max(gradcheck(&f, &x, H));
    }
    CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: TOL,
    }
}

fn operator_checks(results: &mut Vec<CheckResult>) {
    let mut rng = crate::rng::seeded(0x0B5);
    let mut r = |name: &str, f: Box<dyn Fn(&Tape, &Tensor) -> Tensor>, rows: usize, cols: usize| {
        let res = check_op(name, &mut rng, rows, cols, f.as_ref());
        results.push(res);
    };

    let mut wrng = crate::rng::seeded(99);
    let w = randn(&mut wrng, 4, 6);
    let other = randn(&mut wrng, 3, 4);
    let row = randn(&mut wrng, 1, 4);
    let gamma = randn(&mut wrng, 1, 4);
    let beta = randn(&mut wrng, 1, 4);
    let labels = [1.0, 0.0, 1.0];

    r(
        "op.matmul",
        Box::new({
            let w = w.clone();
            move |t, x| x.matmul(&t.constant(w.clone())).sum_row_norms()
        }),
        3,
        4,
    );
    r(
        "op.matmul_nt",
        Box::new({
            let o = other.clone();
            move |t, x| x.matmul_nt(&t.constant(o.clone())).sum_row_norms()
        }),
        3,
        4,
    );
    r(
        "op.add",
        Box::new({
            let o = other.clone();
            move |t, x| x.add(&t.constant(o.clone())).tanh().sum_all()
        }),
        3,
        4,
    );
    r(
        "op.sub",
        Box::new({
            let o = other.clone();
            move |t, x| t.constant(o.clone()).sub(x).tanh().sum_all()
        }),
        3,
        4,
    );
    r(
        "op.mul_elem",
        Box::new(move |_, x| x.mul_elem(x).sum_all()),
        3,
        4,
    );
    r(
        "op.add_row",
        Box::new({
            let row = row.clone();
            move |t, x| x.add_row(&t.constant(row.clone())).tanh().sum_all()
        }),
        3,
        4,
    );
    r("op.scale", Box::new(|_, x| x.scale(-1.7).sum_all()), 3, 4);
    r(
        "op.concat_cols",
        Box::new(|_, x| concat_cols(&[x.clone(), x.tanh()]).sum_row_norms()),
        3,
        4,
    );
    r(
        "op.concat_rows",
        Box::new(|_, x| concat_rows(&[x.clone(), x.tanh()]).sum_row_norms()),
        3,
        4,
    );
    r(
        "op.slice_cols",
        Box::new(|_, x| x.slice_cols(1, 3).sum_row_norms()),
        3,
        4,
    );
    r(
        "op.slice_rows",
        Box::new(|_, x| x.slice_rows(0, 2).sum_row_norms()),
        3,
        4,
    );
    r(
        "op.gather_rows",
        Box::new(|_, x| x.gather_rows(&[2, 0, 2, 1]).sum_row_norms()),
        3,
        4,
    );
    r(
        "op.mean_rows",
        Box::new(|_, x| x.mean_rows().tanh().sum_all()),
        3,
        4,
    );
    r("op.sum_all", Box::new(|_, x| x.sum_all()), 3, 4);
    r("op.relu", Box::new(|_, x| x.relu().sum_all()), 3, 4);
    r("op.sigmoid", Box::new(|_, x| x.sigmoid().sum_all()), 3, 4);
    r("op.tanh", Box::new(|_, x| x.tanh().sum_all()), 3, 4);
    r(
        "op.softmax_rows",
        Box::new(|_, x| x.softmax_rows().mul_elem(&x.sigmoid()).sum_all()),
        3,
        4,
    );
    r(
        "op.layer_norm",
        Box::new({
            let gamma = gamma.clone();
            let beta = beta.clone();
            move |t, x| {
                x.layer_norm_rows(&t.constant(gamma.clone()), &t.constant(beta.clone()), 1e-5)
                    .tanh()
                    .sum_all()
            }
        }),
        3,
        4,
    );
    r(
        "op.sum_row_norms",
        Box::new(|_, x| x.sum_row_norms()),
        3,
        4,
    );
    r(
        "op.bce",
        Box::new(move |_, x| x.sigmoid().bce_sum(&labels)),
        3,
        1,
    );

    let pose = Pose::from_parts(
        crate::geometry::rotation_about(nalgebra::Vector3::new(0.3, -0.8, 0.5), 0.9),
        nalgebra::Vector3::new(0.2, -0.4, 9.0),
    );
    let k = Intrinsics::new(400.0, 380.0, 320.0, 240.0);
    let mut orng = crate::rng::seeded(7);
    let obs = randn(&mut orng, 3, 2) * 30.0 + 300.0;
    r(
        "op.point_reproj",
        Box::new({
            let obs = obs.clone();
            move |_, x| x.point_reproj_residuals(&pose, &k, &obs, 50.0).sum_all()
        }),
        3,
        3,
    );
    let segs: Vec<LineSegment2> = (0..3)
        .map(|i| {
            LineSegment2::new(
                Point2::new(20.0 * i as f64, 10.0),
                Point2::new(20.0 * i as f64 + 40.0, 35.0 + 3.0 * i as f64),
            )
            .unwrap()
        })
        .collect();
    r(
        "op.line_reproj",
        Box::new(move |_, x| x.line_reproj_residuals(&pose, &k, &segs, 50.0).sum_all()),
        3,
        6,
    );
}

fn layer_checks(results: &mut Vec<CheckResult>) {
    let mut rng = crate::rng::seeded(0xA11);

    // MLP input gradient
    {
        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, &mut rng, "mlp", &[6, 12, 12, 3]);
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let x = randn(&mut rng, 4, 6);
            worst = worst.max(gradcheck(
                |tape, xt| {
                    let g = Graph::from_tape(&ps, tape.clone(), false);
                    mlp.forward(&g, xt).sum_row_norms()
                },
                &x,
                H,
            ));
        }
        results.push(CheckResult {
            name: "layer.mlp".into(),
            max_rel_err: worst,
            tolerance: TOL,
        });
    }

    // pruning head: sigmoid over an MLP score
    {
        let mut ps = ParamStore::new();
        let head = Mlp::new(&mut ps, &mut rng, "prune", &[8, 8, 1]);
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let x = randn(&mut rng, 5, 8);
            worst = worst.max(gradcheck(
                |tape, xt| {
                    let g = Graph::from_tape(&ps, tape.clone(), false);
                    head.forward(&g, xt).sigmoid().bce_sum(&[1.0, 0.0, 1.0, 1.0, 0.0])
                },
                &x,
                H,
            ));
        }
        results.push(CheckResult {
            name: "layer.prune_head".into(),
            max_rel_err: worst,
            tolerance: TOL,
        });
    }

    // self-attention layer
    {
        let mut ps = ParamStore::new();
        let layer = SelfAttentionLayer::new(&mut ps, &mut rng, "attn", 8, 2);
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let x = randn(&mut rng, 5, 8);
            worst = worst.max(gradcheck(
                |tape, xt| {
                    let g = Graph::from_tape(&ps, tape.clone(), false);
                    layer.forward(&g, xt).tanh().sum_all()
                },
                &x,
                H,
            ));
        }
        results.push(CheckResult {
            name: "layer.self_attention".into(),
            max_rel_err: worst,
            tolerance: TOL,
        });
    }

    // line transformer encoder (attention + feed-forward + pooling)
    {
        let mut ps = ParamStore::new();
        let enc = LineTokenEncoder::new(&mut ps, &mut rng, "enc", 8, 2, 1e-5);
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let tokens = randn(&mut rng, 4, 8);
            worst = worst.max(gradcheck(
                |tape, xt| {
                    let g = Graph::from_tape(&ps, tape.clone(), false);
                    enc.forward(&g, xt).tanh().sum_all()
                },
                &tokens,
                H,
            ));
        }
        results.push(CheckResult {
            name: "layer.line_encoder".into(),
            max_rel_err: worst,
            tolerance: TOL,
        });
    }
}

fn loss_checks(results: &mut Vec<CheckResult>) {
    let mut rng = crate::rng::seeded(0x105);
    let pose = Pose::from_parts(
        crate::geometry::rotation_about(nalgebra::Vector3::new(-0.2, 0.6, 0.9), -0.7),
        nalgebra::Vector3::new(0.1, 0.3, 8.0),
    );
    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
    let weights = LossWeights::default();

    // map loss wrt predictions
    {
        let gt = randn(&mut rng, 4, 3);
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let pred = randn(&mut rng, 4, 3);
            worst = worst.max(gradcheck(
                |tape, xt| map_loss(tape, Some((xt, &gt)), None),
                &pred,
                H,
            ));
        }
        results.push(CheckResult {
            name: "loss.map".into(),
            max_rel_err: worst,
            tolerance: TOL,
        });
    }

    // reprojection + robust gate composed through the projection
    {
        let obs = randn(&mut rng, 4, 2) * 40.0 + 280.0;
        let segs: Vec<LineSegment2> = (0..2)
            .map(|i| {
                LineSegment2::new(
                    Point2::new(30.0 + 10.0 * i as f64, 15.0),
                    Point2::new(90.0, 60.0 + 20.0 * i as f64),
                )
                .unwrap()
            })
            .collect();
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let pred = randn(&mut rng, 4, 3);
            let pred_l = randn(&mut rng, 2, 6);
            worst = worst.max(gradcheck(
                |tape, xt| {
                    let lines = tape.constant(pred_l.clone());
                    let l_pi = reprojection_loss(
                        tape,
                        &pose,
                        &k,
                        Some((xt, &obs)),
                        Some((&lines, &segs[..])),
                        weights.tau_max,
                    );
                    robust_reprojection_loss(tape, &l_pi, 0.4, &weights)
                },
                &pred,
                H,
            ));
            // and through the line predictions
            let obs_c = obs.clone();
            let segs_c = segs.clone();
            worst = worst.max(gradcheck(
                |tape, xt| {
                    let pts = tape.constant(randn_fixed());
                    fn randn_fixed() -> Arr {
                        arr2(&[[0.1, -0.2, 0.4], [0.5, 0.2, -0.1], [-0.3, 0.1, 0.2], [0.2, 0.0, 0.3]])
                    }
                    let l_pi = reprojection_loss(
                        tape,
                        &pose,
                        &k,
                        Some((&pts, &obs_c)),
                        Some((xt, &segs_c[..])),
                        weights.tau_max,
                    );
                    robust_reprojection_loss(tape, &l_pi, 0.4, &weights)
                },
                &pred_l,
                H,
            ));
        }
        results.push(CheckResult {
            name: "loss.robust_reprojection".into(),
            max_rel_err: worst,
            tolerance: TOL,
        });
    }

    // total loss through the full tiny pipeline, checked on parameters
    results.push(full_pipeline_param_check());
}

/// Builds a tiny two-branch model, computes the combined loss, and verifies
/// the analytic parameter gradients against central differences on a random
/// sample of coordinates from every parameter tensor.
fn full_pipeline_param_check() -> CheckResult {
    let config = ModelConfig {
        descriptor_dim: 12,
        width: 8,
        heads: 2,
        point_attention_layers: 2,
        point_regressor: vec![16, 16, 3],
        line_regressor: vec![16, 16, 6],
        line_tokens: 3,
        ln_eps: 1e-5,
    };
    let Model {
        mut store,
        points,
        lines,
        config: _,
    } = Model::new(config, 123);
    let mut rng = crate::rng::seeded(321);

    let n_pts = 6;
    let n_lines = 3;
    let point_desc = randn(&mut rng, n_pts, 12);
    let tokens = randn(&mut rng, n_lines * 3, 12);
    let point_reliable = vec![true, true, false, true, true, false];
    let line_reliable = vec![true, false, true];
    let point_labels: Vec<f64> = point_reliable.iter().map(|&b| b as u8 as f64).collect();
    let line_labels: Vec<f64> = line_reliable.iter().map(|&b| b as u8 as f64).collect();
    let gt_points = randn(&mut rng, 4, 3);
    let obs_points = randn(&mut rng, 4, 2) * 30.0 + 300.0;
    let gt_lines = randn(&mut rng, 2, 6);
    let obs_lines: Vec<LineSegment2> = (0..2)
        .map(|i| {
            LineSegment2::new(
                Point2::new(10.0, 20.0 + 30.0 * i as f64),
                Point2::new(200.0, 40.0 + 10.0 * i as f64),
            )
            .unwrap()
        })
        .collect();
    let pose = Pose::from_parts(
        crate::geometry::rotation_about(nalgebra::Vector3::new(0.4, 0.1, -0.6), 0.5),
        nalgebra::Vector3::new(-0.2, 0.1, 7.0),
    );
    let k = Intrinsics::new(450.0, 450.0, 320.0, 240.0);
    let weights = LossWeights::default();

    let forward = |store: &ParamStore, trainable: bool| -> (f64, Vec<Option<Arr>>) {
        let g = Graph::new(store, trainable);
        let desc = g.constant(point_desc.clone());
        let pg = points
            .forward_graph(&g, &desc, KeepRule::Teacher(&point_reliable), 0)
            .expect("teacher");
        let toks = g.constant(tokens.clone());
        let lg = lines
            .forward_graph(&g, &toks, n_lines, 3, KeepRule::Teacher(&line_reliable))
            .expect("teacher");
        let l_map = map_loss(
            &g.tape,
            pg.coords.as_ref().map(|c| (c, &gt_points)),
            lg.coords.as_ref().map(|c| (c, &gt_lines)),
        );
        let l_bce = crate::losses::bce_loss(&pg.alphas, &point_labels, &lg.alphas, &line_labels);
        let l_pi = reprojection_loss(
            &g.tape,
            &pose,
            &k,
            pg.coords.as_ref().map(|c| (c, &obs_points)),
            lg.coords.as_ref().map(|c| (c, &obs_lines[..])),
            weights.tau_max,
        );
        let l_rob = robust_reprojection_loss(&g.tape, &l_pi, 0.5, &weights);
        let loss = total_loss(&l_map, &l_bce, &l_rob, &weights);
        let value = loss.scalar_value();
        if trainable {
            loss.backward();
            (value, g.param_grads())
        } else {
            (value, Vec::new())
        }
    };

    let (_, analytic) = forward(&store, true);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let idx = {
            let arr = store.value(id);
            let len = arr.len();
            let mut coords = Vec::new();
            for _ in 0..4.min(len) {
                coords.push(rng.random_range(0..len));
            }
            coords
        };
        let grad = analytic[store.index_of(id)].clone();
        for flat_idx in idx {
            let orig = store.value(id).as_slice().unwrap()[flat_idx];
            store.value_mut(id).as_slice_mut().unwrap()[flat_idx] = orig + H;
            let (fp, _) = forward(&store, false);
            store.value_mut(id).as_slice_mut().unwrap()[flat_idx] = orig - H;
            let (fm, _) = forward(&store, false);
            store.value_mut(id).as_slice_mut().unwrap()[flat_idx] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let a = grad
                .as_ref()
                .map(|g| g.as_slice().unwrap()[flat_idx])
                .unwrap_or(0.0);
            let rel = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    CheckResult {
        name: "loss.total_full_pipeline_params".into(),
        max_rel_err: worst,
        tolerance: TOL,
    }
}

/// The full verification suite.
pub fn gradcheck_suite() -> Vec<CheckResult> {
    let mut results = Vec::new();
    operator_checks(&mut results);
    layer_checks(&mut results);
    loss_checks(&mut results);
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for res in gradcheck_suite() {
            assert!(
                res.pass(),
                "{}: max rel err {} >= {}",
                res.name,
                res.max_rel_err,
                res.tolerance
            );
        }
    }

    #[test]
    fn suite_catches_corruption() {
        crate::tensor::set_backward_corruption_for_tests(true);
        let failed = gradcheck_suite().iter().any(|r| !r.pass());
        crate::tensor::set_backward_corruption_for_tests(false);
        assert!(failed, "corrupted backward must fail the suite");
    }
}
