use plregress::model::{Model, ModelConfig};
use plregress::synth::{generate_scene, SceneSpec};
use plregress::train::{AdamState, TrainConfig, TrainSession};
use std::time::Instant;

fn main() {
    plregress::runtime::init(None, false);
    let spec = SceneSpec { n_train_images: 30, n_test_images: 2, ..SceneSpec::default() };
    let ds = generate_scene(&spec).unwrap();
    let mut model = Model::new(ModelConfig::desk_scale(), 1);
    let mut adam = AdamState::new(&model.store);
    let iters = 90;
    let session = TrainSession {
        dataset: &ds,
        config: TrainConfig { total_iterations: iters, log_every: 30, ..TrainConfig::default() },
        config_hash: "probe".into(),
        out_dir: std::env::temp_dir().join("plr_probe2"),
        eval_hook: None,
    };
    let t1 = Instant::now();
    let report = session.run(&mut model, &mut adam, 0).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    println!(
        "{} iters in {:.2}s -> {:.1} ms/iter; extrapolated 50k: {:.1} min",
        report.iterations_run, dt, 1000.0 * dt / iters as f64,
        dt / iters as f64 * 50_000.0 / 60.0
    );
}
