use comln::embedding::Activation;
use comln::solver::SolverConfig;
use comln::tasks::{sample_episode, TaskGenConfig};
use comln::trainer::{
    evaluate, load_checkpoint_file, meta_test, meta_train, resume, state_from_checkpoint, write_metrics_csv,
    EpisodeSource, TrainConfig, METRICS_HEADER,
};

#[test]
fn mlp_backbone_learns_and_noiseless_episodes_are_solved() {
    let tasks = TaskGenConfig { way: 5, shot: 1, test_shots: 5, input_dim: 16, noise_std: 0.5, seed: 3, ..TaskGenConfig::default() };
    let cfg = TrainConfig {
        iterations: 150,
        meta_batch_size: 4,
        lr: 0.05,
        layers: vec![32, 16],
        activation: Activation::Relu,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let held = TaskGenConfig { seed: 99, ..tasks.clone() };
    let eval: Vec<_> = (0..50).map(|i| sample_episode(&held, i)).collect();
    let before = evaluate(&cfg.init_params(5, 16), &eval, &cfg.loss(), &cfg.solver).unwrap().0;
    let out = meta_train(&cfg, &EpisodeSource::Synthetic(tasks.clone())).unwrap();
    let after = evaluate(&out.state.meta, &eval, &cfg.loss(), &cfg.solver).unwrap().0;
    assert!(after >= 0.9 && after >= before, "accuracy {before} -> {after}");
    assert_eq!(out.metrics.len(), 150);
    assert!(out.metrics.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));

    let noiseless = TaskGenConfig { noise_std: 0.0, seed: 1234, ..tasks };
    for i in 0..5 {
        let (acc, _) = meta_test(&out.state.meta, &sample_episode(&noiseless, i), &cfg.loss(), &cfg.solver).unwrap();
        assert_eq!(acc, 1.0);
    }

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &out.metrics).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with(METRICS_HEADER));
    assert_eq!(text.lines().count(), 151);
}

#[test]
fn periodic_checkpoints_resume_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let tasks = TaskGenConfig { way: 3, shot: 2, test_shots: 2, input_dim: 6, seed: 8, ..TaskGenConfig::default() };
    let base = TrainConfig {
        iterations: 6,
        meta_batch_size: 2,
        solver: SolverConfig::rk4(0.05),
        layers: vec![4],
        ..TrainConfig::default()
    };
    let source = EpisodeSource::Synthetic(tasks);
    let reference = meta_train(&base, &source).unwrap();

    // Interrupted run: checkpoints every 2 iterations, stop after 4.
    let partial = TrainConfig { checkpoint_path: Some(path.clone()), eval_every: 2, ..base.clone() };
    let mut state = comln::trainer::TrainState::fresh(&partial, partial.init_params(3, 6));
    state = resume(&TrainConfig { iterations: 4, lr_schedule: Some(base.milestones()), ..partial.clone() }, &source, state)
        .unwrap()
        .state;
    let ckpt = load_checkpoint_file(&path).unwrap();
    assert_eq!(ckpt.iteration, 4);
    assert_eq!(ckpt.meta, state.meta);
    let restored = state_from_checkpoint(&base, ckpt).unwrap();
    let finished = resume(&base, &source, restored).unwrap();
    assert_eq!(finished.state, reference.state);
}
