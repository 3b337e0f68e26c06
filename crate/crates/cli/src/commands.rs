use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dehaze_core::checkpoint::{load_checkpoint, save_checkpoint};
use dehaze_core::config::{Preset, RunConfig};
use dehaze_core::datagen::{build_dataset, load_dataset, HazeSample, MANIFEST_FILE};
use dehaze_core::eval::{
    self, evaluate, hstack, image_triplet, infer, run_ablation, split_by_scene, Estimator, EvalReport,
    IdentityBundle, NetworkBundle, OracleBundle,
};
use dehaze_core::imageio;
use dehaze_core::physics::{recover_radiance, AirlightMap, ImageTensor, TransmissionMap};
use dehaze_core::trainer::{LossRecord, Model, Stage, Trainer};
use dehaze_core::Error as CoreError;
use log::info;

use crate::{AblateArgs, Baseline, ConfigArgs, DehazeArgs, EvalArgs, Invalid, PresetArg, RunArgs, Split, SynthArgs, TrainArgs};

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Overfit => Preset::Overfit,
            PresetArg::Desk => Preset::Desk,
            PresetArg::Full => Preset::Full,
        }
    }
}

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match (&run.config, run.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, p) => RunConfig::preset(p.map_or(Preset::Desk, Preset::from)),
    };
    if let Some(seed) = run.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &run.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Returns a directory holding a dataset, synthesizing one under `<out>/data` if needed.
fn ensure_dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<PathBuf> {
    if let Some(dir) = data {
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(CoreError::Data(format!("{} holds no {MANIFEST_FILE}", dir.display())).into());
        }
        return Ok(dir.to_path_buf());
    }
    let dir = cfg.output.dir.join("data");
    if !dir.join(MANIFEST_FILE).exists() {
        info!("synthesizing {} samples into {}", cfg.dataset.total_samples(), dir.display());
        build_dataset(&cfg.dataset, cfg.depth_source()?.as_ref(), &dir)?;
    }
    Ok(dir)
}

fn training_split(cfg: &RunConfig, data: Vec<HazeSample>) -> Result<(Vec<HazeSample>, Vec<HazeSample>)> {
    let scenes = data.iter().map(|s| s.scene_id).collect::<std::collections::BTreeSet<_>>();
    if cfg.eval.test_fraction > 0.0 && scenes.len() >= 2 {
        Ok(split_by_scene(&data, cfg.eval.test_fraction)?)
    } else {
        Ok((data.clone(), data))
    }
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = resolve(&args.run)?;
    let dir = args.run.out.clone().unwrap_or_else(|| cfg.output.dir.join("data"));
    let source = cfg.depth_source()?;
    let manifest = build_dataset(&cfg.dataset, source.as_ref(), &dir)?;
    info!("wrote {} samples", manifest.len());
    println!("{}", manifest.path.display());
    Ok(())
}

struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    fn create(path: &Path, existing: &[LossRecord]) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut log = MetricsLog {
            out: BufWriter::new(file),
        };
        writeln!(log.out, "{}", LossRecord::LOG_HEADER)?;
        for r in existing {
            log.push(r)?;
        }
        Ok(log)
    }

    fn push(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.out, "{}", r.log_line())?;
        Ok(())
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve(&args.run)?;
    let out = cfg.output.dir.clone();
    let resume_state = args
        .resume
        .as_deref()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let data_dir = ensure_dataset(&cfg, args.data.as_deref())?;
    let (train_set, _) = training_split(&cfg, load_dataset(&data_dir)?)?;
    create_dir(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;

    let mut trainer = match &resume_state {
        Some(state) => Trainer::resume(state, &train_set)?,
        None => Trainer::new(Model::build(&cfg.model)?, cfg.train.clone(), &train_set)?,
    };
    let schedule = cfg.schedule;
    info!(
        "training on {} samples: {}/{}/{} iterations, starting at {} iteration {}",
        train_set.len(),
        schedule.stage1_iters,
        schedule.stage2_iters,
        schedule.stage3_iters,
        trainer.progress().stage,
        trainer.progress().completed
    );
    let mut log = MetricsLog::create(&out.join("metrics.tsv"), trainer.history())?;
    let mut log_err = None;
    let every = cfg.output.checkpoint_every;
    loop {
        let before = trainer.progress();
        let left = schedule.iters(before.stage).saturating_sub(before.completed);
        let chunk = if every > 0 { left.min(every) } else { left };
        let result = trainer.run(&schedule, Some(chunk), &mut |r| {
            if let Err(e) = log.push(r) {
                log_err.get_or_insert(e);
            }
            if r.iteration % 50 == 0 {
                info!("{} iter {:>5}  loss {:.5}", r.stage, r.iteration, r.total);
            }
        });
        log.out.flush()?;
        if let Some(e) = log_err.take() {
            return Err(e.context("writing metrics"));
        }
        let done = match result {
            Ok(done) => done,
            Err(e @ CoreError::Training { .. }) => {
                let diag = out.join("diagnostic.ckpt");
                save_checkpoint(&trainer.checkpoint(), &diag)?;
                return Err(anyhow!(e).context(format!("diagnostic checkpoint written to {}", diag.display())));
            }
            Err(e) => return Err(e.into()),
        };
        let state = trainer.checkpoint();
        save_checkpoint(&state, &out.join("latest.ckpt"))?;
        let now = trainer.progress();
        if now.stage > before.stage || done {
            let name = format!("stage{}.ckpt", before.stage.index());
            save_checkpoint(&state, &out.join(&name))?;
            info!("{} complete, saved {name}", before.stage);
        }
        if done {
            let final_path = out.join("final.ckpt");
            save_checkpoint(&state, &final_path)?;
            println!("{}", final_path.display());
            return Ok(());
        }
    }
}

fn read_input(path: &Path) -> Result<ImageTensor> {
    if path.extension().is_some_and(|e| e == "dmap") {
        Ok(ImageTensor::new(imageio::read_dmap(path)?)?)
    } else {
        Ok(imageio::read_rgb(path)?)
    }
}

fn parse_airlight(text: &str) -> Result<[f64; 3]> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Invalid(format!("--airlight {text:?}: {e}")))?;
    match vals.as_slice() {
        [v] => Ok([*v; 3]),
        [r, g, b] => Ok([*r, *g, *b]),
        _ => Err(Invalid(format!("--airlight takes one value or r,g,b, got {text:?}")).into()),
    }
}

pub fn dehaze(args: &DehazeArgs) -> Result<()> {
    let airlight_override = args.airlight.as_deref().map(parse_airlight).transpose()?;
    let needs_model = args.transmission.is_none() || airlight_override.is_none();
    if needs_model && args.checkpoint.is_none() {
        return Err(Invalid("--checkpoint is required unless both --transmission and --airlight are given".into()).into());
    }
    let model = match (&args.checkpoint, needs_model) {
        (Some(p), true) => Some(Model::from_checkpoint(&load_checkpoint(p)?)?),
        _ => None,
    };
    let inputs: Vec<ImageTensor> = args
        .inputs
        .iter()
        .map(|p| read_input(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    let override_t = args
        .transmission
        .as_deref()
        .map(|p| -> Result<TransmissionMap> { Ok(TransmissionMap::new(imageio::read_dmap(p)?)?) })
        .transpose()?;
    create_dir(&args.out)?;
    for (path, hazy) in args.inputs.iter().zip(&inputs) {
        let (h, w) = (hazy.height(), hazy.width());
        let estimated = model.as_ref().map(|m| infer(m, hazy, args.t_floor)).transpose()?;
        let t = match (&override_t, &estimated) {
            (Some(t), _) => t.clone(),
            (None, Some(p)) => p.transmission.clone().expect("network predicts t"),
            (None, None) => unreachable!("model is loaded when no override is given"),
        };
        let a = match (airlight_override, &estimated) {
            (Some(c), _) => AirlightMap::from_constants(c, h, w)?,
            (None, Some(p)) => p.airlight.clone().expect("network predicts A"),
            (None, None) => unreachable!("model is loaded when no override is given"),
        };
        let j = recover_radiance(hazy, &t, &a, args.t_floor)
            .with_context(|| format!("recovering {}", path.display()))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        imageio::write_png(&args.out.join(format!("{stem}_dehazed.png")), j.tensor())?;
        imageio::write_dmap(&args.out.join(format!("{stem}_dehazed.dmap")), j.tensor())?;
        imageio::write_png(&args.out.join(format!("{stem}_transmission.png")), t.tensor())?;
        imageio::write_dmap(&args.out.join(format!("{stem}_transmission.dmap")), t.tensor())?;
        let json = serde_json::json!({ "airlight": a.constants() });
        std::fs::write(args.out.join(format!("{stem}_airlight.json")), json.to_string())?;
        info!("{} -> {stem}_dehazed.png (A = {:?})", path.display(), a.constants());
    }
    println!("{}", args.out.display());
    Ok(())
}

fn select_split(data: Vec<HazeSample>, split: Split, fraction: f64) -> Result<Vec<HazeSample>> {
    if split == Split::All {
        return Ok(data);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Invalid(format!("--test-fraction must lie in (0, 1), got {fraction}")).into());
    }
    let (train, test) = split_by_scene(&data, fraction)?;
    Ok(if split == Split::Train { train } else { test })
}

fn render_eval(r: &EvalReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"));
    let mut s = format!("config: {}    samples: {}\n", r.config, r.samples.len());
    s.push_str(&format!(
        "{:<14}{:>10}{:>16}{:>16}{:>16}{:>16}\n",
        "", "desk", "ref full TestA", "ref full TestB", "ref input A", "ref input B"
    ));
    s.push_str(&format!(
        "{:<14}{:>10}{:>16}{:>16}{:>16}{:>16}\n",
        "Transmission",
        fmt(r.mean_transmission),
        fmt(Some(eval::reference::TESTA_TRANSMISSION[4])),
        fmt(Some(eval::reference::TESTB_TRANSMISSION[4])),
        "N/A",
        "N/A"
    ));
    s.push_str(&format!(
        "{:<14}{:>10}{:>16}{:>16}{:>16}{:>16}\n",
        "Image",
        fmt(Some(r.mean_image)),
        fmt(Some(eval::reference::TESTA_IMAGE[4])),
        fmt(Some(eval::reference::TESTB_IMAGE[4])),
        fmt(Some(eval::reference::TESTA_INPUT_IMAGE)),
        fmt(Some(eval::reference::TESTB_INPUT_IMAGE))
    ));
    s
}

fn write_grids(dir: &Path, est: &dyn Estimator, data: &[HazeSample], n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    create_dir(dir)?;
    for s in data.iter().take(n) {
        let p = est.predict(s)?;
        let name = format!("scene{:05}_v{}", s.scene_id, s.variant_id);
        let strip = image_triplet(s.hazy.tensor(), p.dehazed.tensor(), s.clean.tensor())?;
        imageio::write_png(&dir.join(format!("{name}_image.png")), &strip)?;
        if let Some(t) = &p.transmission {
            let strip = hstack(&[t.tensor(), s.transmission.tensor()])?;
            imageio::write_png(&dir.join(format!("{name}_transmission.png")), &strip)?;
        }
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let data = select_split(load_dataset(&args.data)?, args.split, args.test_fraction)?;
    let model = args
        .checkpoint
        .as_deref()
        .map(|p| -> Result<Model> { Ok(Model::from_checkpoint(&load_checkpoint(p)?)?) })
        .transpose()?;
    let estimator: Box<dyn Estimator + '_> = match (args.baseline, &model) {
        (Some(Baseline::Oracle), _) => Box::new(OracleBundle),
        (Some(Baseline::Input), _) => Box::new(IdentityBundle),
        (None, Some(m)) => Box::new(NetworkBundle {
            model: m,
            t_floor: args.t_floor,
            label: "checkpoint".into(),
        }),
        (None, None) => bail!(Invalid("either --checkpoint or --baseline is required".into())),
    };
    let report = evaluate(estimator.as_ref(), &data, &Default::default())?;
    create_dir(&args.out)?;
    let text = render_eval(&report);
    std::fs::write(args.out.join("report.txt"), &text)?;
    std::fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_grids(&args.out.join("grids"), estimator.as_ref(), &data, args.grids)?;
    print!("{text}");
    if !report.is_finite() {
        bail!("evaluation produced non-finite SSIM values");
    }
    Ok(())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = resolve(&args.run)?;
    if cfg.eval.test_fraction <= 0.0 {
        bail!(Invalid("[eval] test_fraction must be > 0 for an ablation".into()));
    }
    let data_dir = ensure_dataset(&cfg, args.data.as_deref())?;
    let (train, test) = split_by_scene(&load_dataset(&data_dir)?, cfg.eval.test_fraction)?;
    create_dir(&cfg.output.dir)?;
    info!("ablation: {} train / {} test samples", train.len(), test.len());
    let report = run_ablation(&train, &test, &cfg.model, &cfg.train, &cfg.schedule, &cfg.ssim, &mut |v, r| {
        if r.iteration % 100 == 0 && (r.stage != Stage::Airlight || r.iteration == 0) {
            info!("{:<12} {} iter {:>5}  loss {:.5}", v.label(), r.stage, r.iteration, r.total);
        }
    })?;
    let text = report.render();
    std::fs::write(cfg.output.dir.join("ablation.txt"), &text)?;
    std::fs::write(cfg.output.dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    if !report.is_finite() {
        bail!("ablation produced non-finite SSIM values");
    }
    Ok(())
}

pub fn print_config(args: &ConfigArgs) -> Result<()> {
    print!("{}", RunConfig::preset(args.preset.into()).to_toml());
    Ok(())
}
