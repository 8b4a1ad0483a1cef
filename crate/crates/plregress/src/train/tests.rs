use approx::assert_relative_eq;
use ndarray::arr2;

use super::*;
use crate::model::{Model, ModelConfig};
use crate::synth::{generate_scene, SceneSpec};

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        descriptor_dim: 32,
        width: 16,
        heads: 2,
        point_attention_layers: 2,
        point_regressor: vec![32, 32, 3],
        line_regressor: vec![32, 32, 6],
        line_tokens: 4,
        ln_eps: 1e-5,
    }
}

fn tiny_scene() -> SceneSpec {
    SceneSpec {
        n_point_landmarks: 60,
        n_line_landmarks: 10,
        n_train_images: 5,
        n_test_images: 2,
        points_per_image: [25, 35],
        lines_per_image: [3, 6],
        descriptor_dim: 32,
        code_rank: 16,
        line_tokens: 4,
        seed: 3,
        ..SceneSpec::default()
    }
}

#[test]
fn lr_schedule_values() {
    assert_eq!(lr_at(0.0, 2e-4), 2e-4);
    assert_relative_eq!(lr_at(0.999_999, 2e-4), 1.5625e-6);
    assert_relative_eq!(lr_at(1.0, 2e-4), 1.5625e-6);
    assert_relative_eq!(lr_at(0.13, 2e-4), 1e-4);

    // non-increasing, exactly 8 distinct values on [0, 1)
    let mut values = Vec::new();
    let mut prev = f64::INFINITY;
    for i in 0..1000 {
        let lr = lr_at(i as f64 / 1000.0, 2e-4);
        assert!(lr <= prev);
        prev = lr;
        if values.last() != Some(&lr) {
            values.push(lr);
        }
    }
    assert_eq!(values.len(), 8);
}

#[test]
fn adam_first_step_magnitude() {
    let mut store = ParamStore::new();
    let id = store.alloc("w", arr2(&[[1.0, -2.0], [0.5, 3.0]]));
    let mut adam = AdamState::new(&store);
    let grad = arr2(&[[0.3, -0.7], [1.5, 0.01]]);
    let before = store.value(id).clone();
    adam.step(&mut store, &[Some(grad.clone())], 1e-3).unwrap();
    let after = store.value(id);
    for i in 0..2 {
        for j in 0..2 {
            let update = before[(i, j)] - after[(i, j)];
            // first step: m̂/√v̂ = sign(g), so |update| ≈ lr
            assert_relative_eq!(update, 1e-3 * grad[(i, j)].signum(), epsilon = 1e-6);
        }
    }
}

#[test]
fn adam_zero_gradient_and_zero_lr() {
    let mut store = ParamStore::new();
    let id = store.alloc("w", arr2(&[[1.0, 2.0]]));
    let mut adam = AdamState::new(&store);

    let before = store.value(id).clone();
    adam.step(&mut store, &[Some(arr2(&[[0.0, 0.0]]))], 1e-2).unwrap();
    assert_eq!(store.value(id), &before);

    // lr = 0: parameters unchanged, moments still update
    adam.step(&mut store, &[Some(arr2(&[[1.0, -1.0]]))], 0.0).unwrap();
    assert_eq!(store.value(id), &before);
    let (m, v, step) = adam.moments(0);
    assert!(m.iter().any(|&x| x != 0.0));
    assert!(v.iter().any(|&x| x != 0.0));
    assert_eq!(step, 2);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut store = ParamStore::new();
    let id = store.alloc("w", arr2(&[[1.0]]));
    let mut adam = AdamState::new(&store);
    let before = store.value(id).clone();
    let err = adam
        .step(&mut store, &[Some(arr2(&[[f64::NAN]]))], 1e-3)
        .unwrap_err();
    assert_eq!(err.name, "w");
    assert_eq!(store.value(id), &before);
    assert_eq!(adam.moments(0).2, 0, "skipped step must not touch state");
}

fn run_training(out: &std::path::Path, total: usize, theta: f64, seed: u64) -> (Model, TrainReport) {
    let ds = generate_scene(&tiny_scene()).unwrap();
    let mut model = Model::new(tiny_model_config(), seed);
    let mut adam = AdamState::new(&model.store);
    let session = TrainSession {
        dataset: &ds,
        config: TrainConfig {
            total_iterations: total,
            log_every: 1,
            weights: crate::losses::LossWeights {
                theta,
                ..Default::default()
            },
            seed,
            ..TrainConfig::default()
        },
        config_hash: "testhash".into(),
        out_dir: out.to_path_buf(),
        eval_hook: None,
    };
    let report = session.run(&mut model, &mut adam, 0).unwrap();
    (model, report)
}

fn read_metrics(path: &std::path::Path) -> Vec<MetricsRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn reprojection_gate_holds_before_theta() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = run_training(dir.path(), 60, 0.5, 7);
    let recs = read_metrics(&report.metrics_path);
    assert_eq!(recs.len(), 60);
    for r in &recs {
        if r.t < 0.5 {
            assert_eq!(r.loss_pi_robust, 0.0, "iter {}: gate violated", r.iter);
        }
        assert_relative_eq!(
            r.tau,
            crate::losses::tau_schedule(r.t, 50.0, 1.0),
            epsilon = 1e-12
        );
    }
    // the reprojection term engages after theta
    assert!(recs.iter().any(|r| r.t >= 0.5 && r.loss_pi_robust > 0.0));
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (_, report_a) = run_training(dir_a.path(), 120, 0.05, 11);
    let (_, report_b) = run_training(dir_b.path(), 120, 0.05, 11);

    let bytes_a = std::fs::read(&report_a.metrics_path).unwrap();
    let bytes_b = std::fs::read(&report_b.metrics_path).unwrap();
    assert_eq!(bytes_a, bytes_b, "metrics logs differ between identical runs");

    let recs = read_metrics(&report_a.metrics_path);
    let first: f64 = recs[..10].iter().map(|r| r.loss_total).sum::<f64>() / 10.0;
    let last: f64 = recs[recs.len() - 10..]
        .iter()
        .map(|r| r.loss_total)
        .sum::<f64>()
        / 10.0;
    assert!(
        last < first,
        "loss did not decrease: first {first}, last {last}"
    );
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (model, report) = run_training(dir.path(), 30, 0.05, 13);

    let ckpt = load_checkpoint(&report.final_checkpoint).unwrap();
    assert_eq!(ckpt.meta.iteration, 30);
    let (restored, adam, iteration) = restore_model(&ckpt, &report.final_checkpoint).unwrap();
    assert!(adam.is_some());
    assert_eq!(iteration, 30);

    // identical forward outputs on a fixed batch
    let ds = generate_scene(&tiny_scene()).unwrap();
    let img = prepare_image(&ds, 0);
    let run = |m: &Model| {
        let g = Graph::new(&m.store, false);
        let (_, comps) = image_loss_graph(
            &g,
            m,
            &img,
            &img.point_desc,
            &img.line_tokens,
            0.5,
            &LossWeights::default(),
        );
        comps.total
    };
    assert_eq!(run(&model).to_bits(), run(&restored).to_bits());
}

#[test]
fn resume_continues_iteration_counter() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_scene(&tiny_scene()).unwrap();
    let mut model = Model::new(tiny_model_config(), 5);
    let mut adam = AdamState::new(&model.store);
    let mk_session = |total: usize| TrainSession {
        dataset: &ds,
        config: TrainConfig {
            total_iterations: total,
            log_every: 5,
            seed: 5,
            ..TrainConfig::default()
        },
        config_hash: "h".into(),
        out_dir: dir.path().to_path_buf(),
        eval_hook: None,
    };
    let report = mk_session(20).run(&mut model, &mut adam, 0).unwrap();
    assert_eq!(report.iterations_run, 20);

    let ckpt = load_checkpoint(&report.final_checkpoint).unwrap();
    let (mut model2, adam2, start) = restore_model(&ckpt, &report.final_checkpoint).unwrap();
    let mut adam2 = adam2.unwrap();
    assert_eq!(start, 20);
    let report2 = mk_session(35).run(&mut model2, &mut adam2, start).unwrap();
    assert_eq!(report2.iterations_run, 15);
    let recs = read_metrics(&report2.metrics_path);
    assert_eq!(recs.last().unwrap().iter, 34);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = run_training(dir.path(), 10, 0.05, 17);
    let mut bytes = std::fs::read(&report.final_checkpoint).unwrap();
    bytes[0] = b'X';
    let bad_path = dir.path().join("bad.ckpt");
    std::fs::write(&bad_path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&bad_path),
        Err(CheckpointError::Corrupt { .. })
    ));
}
