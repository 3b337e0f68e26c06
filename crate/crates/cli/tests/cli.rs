use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dehaze_core::checkpoint::load_checkpoint;
use dehaze_core::config::{Preset, RunConfig};
use dehaze_core::datagen::{load_dataset, Manifest, MANIFEST_FILE};
use dehaze_core::eval::ssim;
use dehaze_core::imageio;
use dehaze_core::trainer::{Model, StageSchedule};
use dehaze_core::transmission_net::TransmissionNetConfig;

fn dehaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dehaze"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(scenes: usize, variants: usize, schedule: [usize; 3]) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Overfit).with_seed(7);
    cfg.dataset.num_scenes = scenes;
    cfg.dataset.variants_per_scene = variants;
    cfg.dataset.image_size = [32, 32];
    cfg.train.image_size = [32, 32];
    cfg.source = dehaze_core::config::SourceConfig::Procedural { native_size: [48, 48] };
    cfg.model.transmission = TransmissionNetConfig {
        stem_channels: 8,
        ..TransmissionNetConfig::default()
    };
    cfg.schedule = StageSchedule {
        stage1_iters: schedule[0],
        stage2_iters: schedule[1],
        stage3_iters: schedule[2],
        adversarial: true,
    };
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_one_record_per_sample_with_beta_in_range() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(2, 2, [0, 0, 0]));
    let out = tmp.path().join("data");
    let o = dehaze(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert_eq!(printed.trim(), s(&out.join(MANIFEST_FILE)));
    let m = Manifest::read(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.len(), 4);
    for r in &m.records {
        assert!((0.4..=1.6).contains(&r.beta), "beta {}", r.beta);
        assert!((0.5..=1.0).contains(&r.airlight));
        let meta = std::fs::read_to_string(out.join(&r.dir).join("meta.toml")).unwrap();
        assert!(meta.contains(&format!("beta = {}", r.beta)), "{meta}");
    }
}

#[test]
fn synth_rerun_into_fresh_directory_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(2, 2, [0, 0, 0]));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        assert!(dehaze(&["synth", "--config", s(&cfg), "--out", s(d)]).status.success());
    }
    let read = |d: &Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));

    let c = tmp.path().join("c");
    assert!(dehaze(&["synth", "--config", s(&cfg), "--seed", "8", "--out", s(&c)]).status.success());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn empty_schedule_checkpoint_equals_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(1, 1, [0, 0, 0]);
    let path = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let o = dehaze(&["train", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let state = load_checkpoint(&out.join("final.ckpt")).unwrap();
    let init = Model::build(&cfg.model).unwrap();
    assert_eq!(state.transmission, init.transmission_params);
    assert_eq!(state.airlight, init.airlight_params);
    assert_eq!(state.discriminator, init.discriminator_params);
    assert!(state.history.is_empty());
    let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn resume_reproduces_uninterrupted_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(2, 1, [3, 2, 3]);
    cfg.eval.test_fraction = 0.0;
    cfg.output.checkpoint_every = 2;
    let path = write_config(tmp.path(), &cfg);
    let full = tmp.path().join("full");
    let o = dehaze(&["train", "--config", s(&path), "--out", s(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "latest.ckpt", "config.toml"] {
        assert!(full.join(f).exists(), "{f}");
    }

    let resumed = tmp.path().join("resumed");
    let data = full.join("data");
    let o = dehaze(&[
        "train",
        "--config",
        s(&path),
        "--out",
        s(&resumed),
        "--data",
        s(&data),
        "--resume",
        s(&full.join("stage1.ckpt")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = load_checkpoint(&full.join("final.ckpt")).unwrap();
    let b = load_checkpoint(&resumed.join("final.ckpt")).unwrap();
    assert_eq!(a.history.len(), 8);
    assert_eq!(a.history.len(), b.history.len());
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!(x.same_losses(y), "{x:?} vs {y:?}");
    }
    assert_eq!(a.transmission, b.transmission);
    let lines = std::fs::read_to_string(resumed.join("metrics.tsv")).unwrap();
    assert_eq!(lines.lines().count(), 9);
}

#[test]
fn dehaze_with_exact_estimates_recovers_the_clean_image() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(1, 2, [0, 0, 0]));
    let data = tmp.path().join("data");
    assert!(dehaze(&["synth", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let m = Manifest::read(&data.join(MANIFEST_FILE)).unwrap();
    for r in &m.records {
        let dir = data.join(&r.dir);
        let out = tmp.path().join(format!("out_{}", r.variant_id));
        let o = dehaze(&[
            "dehaze",
            "--transmission",
            s(&dir.join("transmission.dmap")),
            "--airlight",
            &r.airlight.to_string(),
            "--out",
            s(&out),
            s(&dir.join("hazy.dmap")),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let j_hat = imageio::read_dmap(&out.join("hazy_dehazed.dmap")).unwrap();
        let clean = imageio::read_rgb(&dir.join("clean.png")).unwrap();
        let score = ssim(&j_hat, clean.tensor()).unwrap();
        assert!((score - 1.0).abs() < 1e-6, "ssim {score}");
        let a: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("hazy_airlight.json")).unwrap()).unwrap();
        assert_eq!(a["airlight"][0].as_f64().unwrap(), r.airlight);
    }
}

#[test]
fn dehaze_with_checkpoint_handles_sizes_off_the_32_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(1, 1, [0, 0, 0]);
    let path = write_config(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    assert!(dehaze(&["train", "--config", s(&path), "--out", s(&run)]).status.success());

    let img = dehaze_core::Tensor::from_fn([1, 3, 40, 27], |_, c, y, x| ((c + y * 3 + x * 7) % 17) as f64 / 16.0);
    let inputs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("in{i}.png"))).collect();
    for p in &inputs {
        imageio::write_png(p, &img).unwrap();
    }
    let out = tmp.path().join("out");
    let o = dehaze(&[
        "dehaze",
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--out",
        s(&out),
        s(&inputs[0]),
        s(&inputs[1]),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stem in ["in0", "in1"] {
        let j = imageio::read_rgb(&out.join(format!("{stem}_dehazed.png"))).unwrap();
        assert_eq!((j.height(), j.width()), (40, 27));
        let t = imageio::read_dmap(&out.join(format!("{stem}_transmission.dmap"))).unwrap();
        assert_eq!(t.shape(), [1, 1, 40, 27]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with("_dehazed.png"))
        .count();
    assert_eq!(pngs, 2);
}

#[test]
fn eval_baselines_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(2, 1, [0, 0, 0]));
    let data = tmp.path().join("data");
    assert!(dehaze(&["synth", "--config", s(&cfg), "--out", s(&data)]).status.success());

    let out = tmp.path().join("oracle");
    let o = dehaze(&["eval", "--baseline", "oracle", "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mean_image"].as_f64(), Some(1.0));
    assert_eq!(report["mean_transmission"].as_f64(), Some(1.0));
    let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("0.9776") && text.contains("0.9560"), "{text}");
    assert_eq!(std::fs::read_dir(out.join("grids")).unwrap().count(), 4);

    let out = tmp.path().join("input");
    let o = dehaze(&["eval", "--baseline", "input", "--split", "test", "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 1);
    assert!(report["mean_image"].as_f64().unwrap() < 1.0);
    assert!(report["mean_transmission"].is_null());
    let reloaded = load_dataset(&data).unwrap();
    assert_eq!(reloaded.len(), 2);
}

#[test]
fn unknown_config_key_exits_1_names_the_key_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let text = tiny_config(1, 1, [0, 0, 0]).to_toml().replace("[schedule]\n", "[schedule]\nstage4_iters = 3\n");
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = tmp.path().join("run");
    let o = dehaze(&["train", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage4_iters"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn invalid_value_exits_1_and_names_the_section() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(1, 1, [0, 0, 0]);
    cfg.train.image_size = [30, 30];
    cfg.dataset.image_size = [30, 30];
    let path = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let o = dehaze(&["synth", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[train]"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn usage_and_runtime_failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(dehaze(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dehaze(&["--help"]).status.code(), Some(0));
    let o = dehaze(&["dehaze", "--out", s(tmp.path()), "x.png"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let missing = tmp.path().join("missing.ckpt");
    let o = dehaze(&["eval", "--checkpoint", s(&missing), "--data", s(tmp.path()), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let garbage = tmp.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = dehaze(&["dehaze", "--checkpoint", s(&garbage), "--out", s(tmp.path()), "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn config_command_prints_a_loadable_preset() {
    let o = dehaze(&["config", "--preset", "desk"]);
    assert!(o.status.success());
    let cfg = RunConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::preset(Preset::Desk));
}
