use epd_core::datagen::{generate_corpus, write_corpus, DatagenConfig};
use epd_core::diffusion::{generate, ScheduleConfig};
use epd_core::metrics::{compute_report, MetricConfig};
use epd_core::net::{checkpoint_load, checkpoint_save, train, ModelConfig, TrainConfig};
use epd_core::scene::{
    constant_velocity_rollout, samples_io_read, samples_io_write, scene_io_read, SampleSet, Trajectory,
};

fn small(n: usize, seed: u64) -> DatagenConfig {
    DatagenConfig { n_scenes: n, seed, ..DatagenConfig::default() }
}

#[test]
fn corpus_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.jsonl");
    let written = write_corpus(&small(5, 11), &path).unwrap();
    let read = scene_io_read(&path).unwrap();
    assert_eq!(written, read);
    let again: Vec<_> = generate_corpus(&small(5, 11)).unwrap().into_iter().map(|g| g.scene).collect();
    assert_eq!(again, read, "datagen is a pure function of the seed");
}

#[test]
fn constant_velocity_predictions_score_in_range() {
    let cfg = MetricConfig::default();
    for g in generate_corpus(&small(4, 5)).unwrap() {
        let scene = g.scene;
        let cv: Vec<Trajectory> = constant_velocity_rollout(&scene).unwrap().into_iter().map(Trajectory::Poly).collect();
        let report = compute_report(&scene, &[cv.clone(), cv], &cfg).unwrap();
        assert!((0.0..=1.0).contains(&report.realism_meta), "{report:?}");
        assert!(report.minade.is_finite() && report.minade >= 0.0);
        assert_eq!(report.coverage, 0.0, "identical samples cover nothing");
    }
}

#[test]
fn ground_truth_scores_itself_perfectly_on_distance() {
    let cfg = MetricConfig::default();
    let scene = generate_corpus(&small(1, 2)).unwrap().remove(0).scene;
    let gt = scene.ground_truth().unwrap();
    let report = compute_report(&scene, &[gt.clone(), gt], &cfg).unwrap();
    assert!(report.minade < 1e-9, "{}", report.minade);
}

#[test]
fn train_save_load_generate_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let scenes: Vec<_> = generate_corpus(&small(6, 9)).unwrap().into_iter().map(|g| g.scene).collect();
    let mcfg = ModelConfig { hidden_dim: 16, n_enc_blocks: 1, n_denoise_blocks: 1, n_heads: 2, ..ModelConfig::default() };
    let tcfg = TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 3, lr: 1e-3, ..TrainConfig::default() };
    let (params, log) = train(&scenes, &mcfg, &tcfg, &ScheduleConfig::default()).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|e| e.mean_loss.is_finite()));

    let ckpt = dir.path().join("model.ckpt");
    checkpoint_save(&params, &ckpt).unwrap();
    let loaded = checkpoint_load(&ckpt).unwrap();
    let sched = loaded.schedule.build().unwrap();

    let scene = &scenes[0];
    let draw = |seed| generate(scene, &loaded, &sched, 5, 3, seed).unwrap();
    let samples = draw(4);
    assert_eq!(samples, draw(4));
    assert_eq!(samples.len(), 3);
    assert!(samples.iter().all(|s| s.len() == scene.agents.len()));

    let set = SampleSet {
        scene_id: scene.scene_id.clone(),
        agent_ids: scene.agents.iter().map(|a| a.id.clone()).collect(),
        samples: samples.clone(),
    };
    let path = dir.path().join("samples.jsonl");
    samples_io_write(std::slice::from_ref(&set), &path).unwrap();
    let back = samples_io_read(&path).unwrap();
    assert_eq!(back.len(), 1);
    for (a, b) in back[0].samples.iter().flatten().zip(samples.iter().flatten()) {
        for t in [0.0, 1.3, 4.0] {
            assert!((a.position(t) - b.position(t)).norm() < 1e-9);
        }
    }
    let report = compute_report(scene, &back[0].samples, &MetricConfig::default()).unwrap();
    assert!((0.0..=1.0).contains(&report.realism_meta));
}
