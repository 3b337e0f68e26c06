//! Run configuration: one TOML document covering data, model, training,
//! evaluation and output locations, with bundled presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetSpec, DepthSource, FilePairSource, ProceduralSource};
use crate::error::{Error, Result};
use crate::eval::SsimConfig;
use crate::trainer::{ModelConfig, StageSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Generated scenes rendered at `native_size` before resizing.
    Procedural { native_size: [usize; 2] },
    /// `<name>_rgb.png` + `<name>_depth.{png,dmap}` pairs in `dir`.
    Files { dir: PathBuf },
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Procedural { native_size: [96, 96] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of scenes held out for evaluation.
    pub test_fraction: f64,
    /// Write `[input | dehazed | truth]` strips for the first N test samples.
    #[serde(default)]
    pub grids: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_fraction: 0.25,
            grids: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Save a checkpoint every N iterations; 0 saves only at stage ends.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// One 64×64 sample, short stages: a convergence smoke test.
    Overfit,
    /// Small procedural corpus at 64×64 with 500/500/1000 iterations.
    Desk,
    /// The full recipe: 1000 scenes × 4 variants at 512×512, 400k iterations.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overfit" => Ok(Preset::Overfit),
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset {other:?} (overfit, desk, full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: StageSchedule,
    #[serde(default)]
    pub ssim: SsimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Overfit => {
                let size = [64, 64];
                RunConfig {
                    dataset: DatasetSpec {
                        num_scenes: 1,
                        variants_per_scene: 1,
                        image_size: size,
                        ..DatasetSpec::default()
                    },
                    source: SourceConfig::Procedural { native_size: [96, 96] },
                    model: ModelConfig::default(),
                    train: TrainConfig {
                        image_size: size,
                        ..TrainConfig::default()
                    },
                    schedule: StageSchedule {
                        stage1_iters: 200,
                        stage2_iters: 200,
                        stage3_iters: 50,
                        adversarial: true,
                    },
                    ssim: SsimConfig::default(),
                    eval: EvalConfig {
                        test_fraction: 0.0,
                        grids: 1,
                    },
                    output: OutputConfig {
                        dir: "runs/overfit".into(),
                        checkpoint_every: 0,
                    },
                }
            }
            Preset::Desk => {
                let size = [64, 64];
                RunConfig {
                    dataset: DatasetSpec {
                        num_scenes: 24,
                        variants_per_scene: 4,
                        image_size: size,
                        ..DatasetSpec::default()
                    },
                    source: SourceConfig::Procedural { native_size: [96, 96] },
                    model: ModelConfig::default(),
                    train: TrainConfig {
                        image_size: size,
                        ..TrainConfig::default()
                    },
                    schedule: StageSchedule::default(),
                    ssim: SsimConfig::default(),
                    eval: EvalConfig::default(),
                    output: OutputConfig {
                        dir: "runs/desk".into(),
                        checkpoint_every: 250,
                    },
                }
            }
            Preset::Full => {
                let size = [512, 512];
                RunConfig {
                    dataset: DatasetSpec {
                        num_scenes: 1000,
                        variants_per_scene: 4,
                        image_size: size,
                        ..DatasetSpec::default()
                    },
                    source: SourceConfig::Procedural { native_size: [640, 640] },
                    model: ModelConfig::default(),
                    train: TrainConfig {
                        image_size: size,
                        ..TrainConfig::default()
                    },
                    schedule: StageSchedule {
                        stage1_iters: 100_000,
                        stage2_iters: 100_000,
                        stage3_iters: 200_000,
                        adversarial: true,
                    },
                    ssim: SsimConfig::default(),
                    eval: EvalConfig::default(),
                    output: OutputConfig {
                        dir: "runs/full".into(),
                        checkpoint_every: 5000,
                    },
                }
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Overrides every seed derived from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.model.init_seed = seed;
        self
    }

    /// Checks every section, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &'static str| move |e: Error| Error::Config(format!("[{section}] {}", strip(e)));
        self.dataset.validate().map_err(ctx("dataset"))?;
        self.model.transmission.validate().map_err(ctx("model.transmission"))?;
        self.model.airlight.validate().map_err(ctx("model.airlight"))?;
        self.model.discriminator.validate().map_err(ctx("model.discriminator"))?;
        self.train.validate().map_err(ctx("train"))?;
        self.ssim.validate().map_err(ctx("ssim"))?;
        if self.train.image_size != self.dataset.image_size {
            return Err(Error::Config(format!(
                "[train] image_size {:?} differs from [dataset] image_size {:?}",
                self.train.image_size, self.dataset.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.eval.test_fraction) {
            return Err(Error::Config("[eval] test_fraction must lie in [0, 1)".into()));
        }
        if let SourceConfig::Procedural { native_size } = &self.source {
            if native_size.contains(&0) {
                return Err(Error::Config("[source] native_size must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn depth_source(&self) -> Result<Box<dyn DepthSource>> {
        Ok(match &self.source {
            SourceConfig::Procedural { native_size: [h, w] } => Box::new(ProceduralSource::new(
                self.dataset.seed,
                self.dataset.num_scenes,
                *h,
                *w,
            )),
            SourceConfig::Files { dir } => Box::new(FilePairSource::from_dir(dir)?),
        })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
