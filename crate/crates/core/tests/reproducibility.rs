use dehaze_core::checkpoint::{decode, encode};
use dehaze_core::datagen::{build_dataset, load_dataset, synthesize_dataset, DatasetSpec, ProceduralSource, MANIFEST_FILE};
use dehaze_core::eval::{evaluate, NetworkBundle, SsimConfig};
use dehaze_core::trainer::{Model, ModelConfig, StageSchedule, TrainConfig, Trainer};
use dehaze_core::transmission_net::TransmissionNetConfig;

fn spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_scenes: 3,
        variants_per_scene: 2,
        image_size: [32, 32],
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn dataset_builds_are_byte_identical_and_physically_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let source = ProceduralSource::new(4, 3, 40, 40);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    build_dataset(&spec(4), &source, &a).unwrap();
    build_dataset(&spec(4), &source, &b).unwrap();
    let files = ["manifest.jsonl", "scene00001_v1/hazy.dmap", "scene00002_v0/clean.png", "scene00000_v1/meta.toml"];
    for f in files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let samples = load_dataset(&a).unwrap();
    assert_eq!(samples.len(), 6);
    for s in &samples {
        assert!(s.consistency_error() < 1e-6, "{}", s.consistency_error());
    }

    let c = dir.path().join("c");
    build_dataset(&spec(5), &ProceduralSource::new(5, 3, 40, 40), &c).unwrap();
    assert_ne!(std::fs::read(a.join(MANIFEST_FILE)).unwrap(), std::fs::read(c.join(MANIFEST_FILE)).unwrap());
}

fn small_model() -> ModelConfig {
    ModelConfig {
        transmission: TransmissionNetConfig {
            stem_channels: 8,
            ..TransmissionNetConfig::default()
        },
        init_seed: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = synthesize_dataset(&spec(9), &ProceduralSource::new(9, 3, 32, 32)).unwrap();
    let cfg = TrainConfig {
        image_size: [32, 32],
        seed: 2,
        ..TrainConfig::default()
    };
    let schedule = StageSchedule {
        stage1_iters: 4,
        stage2_iters: 3,
        stage3_iters: 4,
        adversarial: true,
    };
    let mut full = Trainer::new(Model::build(&small_model()).unwrap(), cfg.clone(), &data).unwrap();
    assert!(full.run(&schedule, None, &mut |_| {}).unwrap());

    for cut in [2, 5, 9] {
        let mut first = Trainer::new(Model::build(&small_model()).unwrap(), cfg.clone(), &data).unwrap();
        assert!(!first.run(&schedule, Some(cut), &mut |_| {}).unwrap());
        let state = decode(&encode(&first.checkpoint()).unwrap()).unwrap();
        drop(first);
        let mut second = Trainer::resume(&state, &data).unwrap();
        assert!(second.run(&schedule, None, &mut |_| {}).unwrap());
        assert_eq!(second.history().len(), full.history().len());
        for (x, y) in second.history().iter().zip(full.history()) {
            assert!(x.same_losses(y), "cut {cut}: {x:?} vs {y:?}");
        }
        assert_eq!(second.checkpoint().transmission, full.checkpoint().transmission);
        assert_eq!(second.checkpoint().discriminator, full.checkpoint().discriminator);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let data = synthesize_dataset(&spec(1), &ProceduralSource::new(1, 3, 32, 32)).unwrap();
    let model = Model::build(&small_model()).unwrap();
    let bundle = NetworkBundle {
        model: &model,
        t_floor: 0.05,
        label: "init".into(),
    };
    let a = evaluate(&bundle, &data, &SsimConfig::default()).unwrap();
    let b = evaluate(&bundle, &data, &SsimConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), data.len());
    assert!(a.is_finite());
}
