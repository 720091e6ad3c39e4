use ctrlcap::harness::{
    evaluate, read_predictions, sweep_threshold, train, train_cached, write_predictions, ControlMode, ExperimentConfig, RunDir,
};
use ctrlcap::synthworld::{build_dataset, DatasetConfig, DatasetManifest, Split};

fn small() -> (ExperimentConfig, DatasetManifest) {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig {
        train_samples: 128,
        val_samples: 16,
        test_samples: 24,
        ..DatasetConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.train.warmup_steps = 2;
    cfg.train.lr = 3e-3;
    let manifest = build_dataset(&cfg.dataset, cfg.dataset_seed).unwrap();
    (cfg, manifest)
}

#[test]
fn training_reduces_loss_and_writes_logs() {
    let (cfg, manifest) = small();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path(), &cfg).unwrap();
    let mut seen = 0;
    let out = train(&cfg, &manifest, Some(&run), &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    let first = out.log.steps.first().unwrap().total;
    let last = out.log.epochs.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
    assert!(out.log.steps.iter().all(|s| s.tag.is_some()));
    assert!(dir.path().join("steps.jsonl").exists());
    assert!(dir.path().join("train_log.json").exists());
}

#[test]
fn training_and_prediction_files_are_reproducible() {
    let (mut cfg, manifest) = small();
    cfg.train.epochs = 1;
    let a = train(&cfg, &manifest, None, &mut |_| {}).unwrap().model;
    let b = train(&cfg, &manifest, None, &mut |_| {}).unwrap().model;
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(a.store.get(a.store.id(&pa.name).unwrap()).data, b.store.get(b.store.id(&pb.name).unwrap()).data);
    }

    let opts = cfg.eval.inference_options(&cfg.model);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (k, model) in [&a, &b].iter().enumerate() {
        let out = evaluate(model, &manifest, Split::Test, ControlMode::Interactive, &opts, None).unwrap();
        let path = dir.path().join(format!("p{k}.jsonl"));
        write_predictions(&path, &out.predictions).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), out.predictions);
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn cache_reuses_checkpoints() {
    let (mut cfg, manifest) = small();
    cfg.train.epochs = 1;
    cfg.train.max_samples = Some(32);
    let dir = tempfile::tempdir().unwrap();
    let mut epochs = 0;
    let (a, path_a) = train_cached(&cfg, &manifest, dir.path(), &mut |_| epochs += 1).unwrap();
    let (b, path_b) = train_cached(&cfg, &manifest, dir.path(), &mut |_| epochs += 1).unwrap();
    assert_eq!(epochs, 1);
    assert_eq!(path_a, path_b);
    let mut rounded = a.clone();
    rounded.store.round_to_f32();
    for ((_, pa), (_, pb)) in rounded.store.iter().zip(b.store.iter()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.value.data, pb.value.data);
    }
    cfg.seed = 9;
    let (_, path_c) = train_cached(&cfg, &manifest, dir.path(), &mut |_| epochs += 1).unwrap();
    assert_ne!(path_a, path_c);
    assert_eq!(epochs, 2);
}

#[test]
fn sweep_above_one_degenerates_to_no_controls() {
    let (mut cfg, manifest) = small();
    cfg.train.epochs = 1;
    let model = train(&cfg, &manifest, None, &mut |_| {}).unwrap().model;
    let opts = cfg.eval.inference_options(&cfg.model);
    let curve = sweep_threshold(&model, &manifest, Split::Test, &[0.0, 0.5, 1.01], &opts, None).unwrap();
    assert!(curve.tags_non_increasing());
    assert_eq!(curve.points[2].mean_tags, 0.0);
    let none = evaluate(&model, &manifest, Split::Test, ControlMode::None, &opts, None).unwrap();
    let high = ctrlcap::model::InferenceOptions { tag_threshold: 1.01, ..opts };
    let selfc = evaluate(&model, &manifest, Split::Test, ControlMode::SelfTags, &high, None).unwrap();
    let caps = |o: &ctrlcap::harness::EvalOutcome| o.predictions.iter().map(|p| p.caption.clone()).collect::<Vec<_>>();
    assert_eq!(caps(&none), caps(&selfc));
    assert_eq!(curve.points[2].map, none.report.dense_map);
}
