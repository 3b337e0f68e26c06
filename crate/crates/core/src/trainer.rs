//! Stage-wise training: transmission net alone, airlight net alone, then
//! joint fine-tuning with alternating discriminator and generator updates.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::airlight_net::{build_airlight_net, AirlightNet, AirlightNetConfig};
use crate::datagen::HazeSample;
use crate::discriminator::{build_discriminator, DiscConfig, Discriminator};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::losses::{
    discriminator_loss_on_tape, edge_loss_on_tape, joint_generator_loss_on_tape, EdgeExtractorSpec,
    EdgeExtractors, LossComponents, LossWeights, PixelNorm,
};
use crate::nn::{Bound, ParameterSet};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::physics::DEFAULT_T_FLOOR;
use crate::tensor::Tensor;
use crate::transmission_net::{build_transmission_net, TransmissionNet, TransmissionNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Transmission,
    Airlight,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Transmission, Stage::Airlight, Stage::Joint];

    pub fn index(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.index())
    }
}

/// Which parameter groups a stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub transmission: bool,
    pub airlight: bool,
    pub discriminator: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    /// Train and use the joint discriminator during stage 3.
    #[serde(default = "yes")]
    pub adversarial: bool,
}

fn yes() -> bool {
    true
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            stage1_iters: 500,
            stage2_iters: 500,
            stage3_iters: 1000,
            adversarial: true,
        }
    }
}

impl StageSchedule {
    pub fn iters(&self, stage: Stage) -> usize {
        match stage {
            Stage::Transmission => self.stage1_iters,
            Stage::Airlight => self.stage2_iters,
            Stage::Joint => self.stage3_iters,
        }
    }

    pub fn groups(&self, stage: Stage) -> ParamGroups {
        match stage {
            Stage::Transmission => ParamGroups {
                transmission: true,
                airlight: false,
                discriminator: false,
            },
            Stage::Airlight => ParamGroups {
                transmission: false,
                airlight: true,
                discriminator: false,
            },
            Stage::Joint => ParamGroups {
                transmission: true,
                airlight: true,
                discriminator: self.adversarial,
            },
        }
    }

    pub fn total(&self) -> usize {
        self.stage1_iters + self.stage2_iters + self.stage3_iters
    }
}

/// Multiplies the learning rate by `factor` every `every` iterations of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// `[height, width]`; both divisible by 32.
    pub image_size: [usize; 2],
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub pixel_norm: PixelNorm,
    #[serde(default = "default_floor")]
    pub t_floor: f64,
    pub seed: u64,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
}

fn default_floor() -> f64 {
    DEFAULT_T_FLOOR
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            adam: AdamConfig::default(),
            batch_size: 1,
            image_size: [64, 64],
            weights: LossWeights::default(),
            pixel_norm: PixelNorm::Squared,
            t_floor: DEFAULT_T_FLOOR,
            seed: 0,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image_size must be divisible by 32, got {h}x{w}")));
        }
        if !(self.t_floor > 0.0 && self.t_floor <= 1.0) {
            return Err(Error::Config(format!("t_floor must lie in (0, 1], got {}", self.t_floor)));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(Error::Config("lr_decay needs every > 0 and factor > 0".into()));
            }
        }
        self.adam.validate()?;
        self.weights.validate()
    }

    pub fn lr_at(&self, stage_iteration: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((stage_iteration / d.every) as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub transmission: TransmissionNetConfig,
    #[serde(default)]
    pub airlight: AirlightNetConfig,
    #[serde(default)]
    pub discriminator: DiscConfig,
    #[serde(default)]
    pub edge: EdgeExtractorSpec,
    #[serde(default)]
    pub init_seed: u64,
}

/// All networks with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub transmission: TransmissionNet,
    pub transmission_params: ParameterSet,
    pub airlight: AirlightNet,
    pub airlight_params: ParameterSet,
    pub discriminator: Discriminator,
    pub discriminator_params: ParameterSet,
    pub edge: EdgeExtractors,
}

impl Model {
    /// Seeded initialization; each network draws from its own stream.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let (transmission, transmission_params) = build_transmission_net(&config.transmission, config.init_seed)?;
        let (airlight, airlight_params) = build_airlight_net(&config.airlight, config.init_seed.wrapping_add(1))?;
        let (discriminator, discriminator_params) =
            build_discriminator(&config.discriminator, config.init_seed.wrapping_add(2))?;
        Ok(Model {
            config: config.clone(),
            transmission,
            transmission_params,
            airlight,
            airlight_params,
            discriminator,
            discriminator_params,
            edge: EdgeExtractors::new(config.edge)?,
        })
    }

    /// Rebuilds the architecture and installs the checkpointed arrays.
    pub fn from_checkpoint(state: &CheckpointState) -> Result<Self> {
        let mut m = Model::build(&state.model_config)?;
        install(&mut m.transmission_params, &state.transmission, "transmission")?;
        install(&mut m.airlight_params, &state.airlight, "airlight")?;
        install(&mut m.discriminator_params, &state.discriminator, "discriminator")?;
        Ok(m)
    }
}

fn install(dst: &mut ParameterSet, src: &ParameterSet, what: &str) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::Checkpoint(format!(
            "{what} network has {} arrays, checkpoint holds {}",
            dst.len(),
            src.len()
        )));
    }
    dst.load_matching(src)
        .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
    Ok(())
}

/// One optimisation step's losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    /// Zero-based index within the stage.
    pub iteration: usize,
    /// Stage objective: edge loss (stage 1), airlight L2 (stage 2), or the total objective (stage 3).
    pub total: f64,
    pub components: LossComponents,
    pub edge_l2: f64,
    pub edge_grad: f64,
    pub edge_feat: f64,
    pub disc_loss: Option<f64>,
    pub disc_real: Option<f64>,
    pub disc_fake: Option<f64>,
    pub wall_ms: f64,
}

impl LossRecord {
    /// Same losses, ignoring wall time.
    pub fn same_losses(&self, other: &LossRecord) -> bool {
        let mut a = self.clone();
        a.wall_ms = other.wall_ms;
        &a == other
    }

    /// Tab-separated metrics line.
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
        format!(
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{:.1}",
            self.iteration,
            self.stage,
            self.total,
            self.components.transmission,
            self.components.airlight,
            self.components.dehaze,
            self.components.joint,
            opt(self.disc_loss),
            self.wall_ms
        )
    }

    pub const LOG_HEADER: &'static str = "iteration\tstage\ttotal\tL_t\tL_a\tL_d\tL_j\tL_disc\twall_ms";
}

/// Position inside the schedule: `completed` iterations of `stage` are done.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub completed: usize,
}

/// Everything needed to resume bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointState {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub transmission: ParameterSet,
    pub airlight: ParameterSet,
    pub discriminator: ParameterSet,
    pub optimizers: [AdamState; 3],
    pub rng: ChaCha8Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub progress: Progress,
    pub history: Vec<LossRecord>,
}

/// Stacks the selected samples into batched tensors.
struct Batch {
    hazy: Tensor,
    clean: Tensor,
    transmission: Tensor,
    airlight: Tensor,
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor> + Clone) -> Tensor {
    let n = items.clone().count();
    let first = items.clone().next().expect("nonempty batch");
    let [_, c, h, w] = first.shape();
    let mut data = Vec::with_capacity(n * c * h * w);
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([n, c, h, w], data).expect("stacked sizes agree")
}

fn collect_grads(grads: &Gradients, bound: &Bound) -> Vec<Option<Tensor>> {
    bound.vars().iter().map(|&v| grads.get(v).cloned()).collect()
}

fn grads_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(Tensor::is_finite)
}

/// Root-mean-square of all gradient entries, 0 when none are present.
pub fn grad_rms(grads: &[Option<Tensor>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for g in grads.iter().flatten() {
        s += g.data().iter().map(|v| v * v).sum::<f64>();
        n += g.numel();
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Generator-side tape for a batch: predictions and loss nodes.
struct Forward {
    t_hat: Var,
    j_hat: Var,
    edge_total: Var,
    edge_l2: Var,
    edge_grad: Var,
    edge_feat: Var,
    l_air: Var,
    l_dehaze: Var,
}

pub struct Trainer<'a> {
    model: Model,
    config: TrainConfig,
    data: &'a [HazeSample],
    opt: [AdamState; 3],
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    progress: Progress,
    history: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainConfig, data: &'a [HazeSample]) -> Result<Self> {
        config.validate()?;
        check_data(data, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let opt = [
            AdamState::zeros_like(&model.transmission_params),
            AdamState::zeros_like(&model.airlight_params),
            AdamState::zeros_like(&model.discriminator_params),
        ];
        Ok(Trainer {
            model,
            config,
            data,
            opt,
            rng,
            order,
            cursor: 0,
            progress: Progress {
                stage: Stage::Transmission,
                completed: 0,
            },
            history: Vec::new(),
        })
    }

    /// Restores model, optimizer, data order and history from a checkpoint.
    pub fn resume(state: &CheckpointState, data: &'a [HazeSample]) -> Result<Self> {
        state.train_config.validate()?;
        check_data(data, &state.train_config)?;
        if state.order.len() != data.len() || state.cursor > data.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was taken on {} samples, dataset has {}",
                state.order.len(),
                data.len()
            )));
        }
        let model = Model::from_checkpoint(state)?;
        let groups = [&model.transmission_params, &model.airlight_params, &model.discriminator_params];
        if !state.optimizers.iter().zip(groups).all(|(o, p)| o.matches(p)) {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer {
            model,
            config: state.train_config.clone(),
            data,
            opt: state.optimizers.clone(),
            rng: state.rng.clone(),
            order: state.order.clone(),
            cursor: state.cursor,
            progress: state.progress,
            history: state.history.clone(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn checkpoint(&self) -> CheckpointState {
        CheckpointState {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            transmission: self.model.transmission_params.clone(),
            airlight: self.model.airlight_params.clone(),
            discriminator: self.model.discriminator_params.clone(),
            optimizers: self.opt.clone(),
            rng: self.rng.clone(),
            order: self.order.clone(),
            cursor: self.cursor,
            progress: self.progress,
            history: self.history.clone(),
        }
    }

    /// Runs the schedule from the current position. Stops early after
    /// `max_steps` optimisation steps when given; returns `true` once the
    /// whole schedule is complete.
    pub fn run(
        &mut self,
        schedule: &StageSchedule,
        max_steps: Option<usize>,
        observer: &mut dyn FnMut(&LossRecord),
    ) -> Result<bool> {
        let mut taken = 0;
        for stage in Stage::ALL {
            if stage < self.progress.stage {
                continue;
            }
            if stage > self.progress.stage {
                self.progress = Progress { stage, completed: 0 };
            }
            while self.progress.completed < schedule.iters(stage) {
                if max_steps.is_some_and(|m| taken >= m) {
                    return Ok(false);
                }
                let record = self.step(stage, schedule)?;
                observer(&record);
                self.history.push(record);
                self.progress.completed += 1;
                taken += 1;
            }
        }
        Ok(true)
    }

    /// One iteration of `stage`. On error no state has been modified.
    pub fn step(&mut self, stage: Stage, schedule: &StageSchedule) -> Result<LossRecord> {
        let start = Instant::now();
        let saved = (self.rng.clone(), self.order.clone(), self.cursor);
        let batch = self.next_batch();
        let out = match stage {
            Stage::Transmission => self.step_transmission(&batch),
            Stage::Airlight => self.step_airlight(&batch),
            Stage::Joint => self.step_joint(&batch, schedule.adversarial),
        };
        match out {
            Ok(mut rec) => {
                rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
                Ok(rec)
            }
            Err(e) => {
                (self.rng, self.order, self.cursor) = saved;
                Err(e)
            }
        }
    }

    fn next_batch(&mut self) -> Batch {
        let mut idx = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let data = self.data;
        let pick = |f: fn(&HazeSample) -> &Tensor| stack(idx.iter().map(move |&i| f(&data[i])));
        Batch {
            hazy: pick(|s| s.hazy.tensor()),
            clean: pick(|s| s.clean.tensor()),
            transmission: pick(|s| s.transmission.tensor()),
            airlight: pick(|s| s.airlight.tensor()),
        }
    }

    fn lr(&self) -> f64 {
        self.config.lr_at(self.progress.completed)
    }

    fn abort(&self, stage: Stage, reason: impl Into<String>) -> Error {
        Error::Training {
            stage: stage.to_string(),
            iteration: self.progress.completed,
            reason: reason.into(),
        }
    }

    fn generator_forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        tp: &Bound,
        ap: &Bound,
        weights: &LossWeights,
    ) -> Result<Forward> {
        let m = &self.model;
        let x = g.constant(batch.hazy.clone());
        let t_gt = g.constant(batch.transmission.clone());
        let a_gt = g.constant(batch.airlight.clone());
        let j_gt = g.constant(batch.clean.clone());
        let t_hat = m.transmission.forward(g, tp, x)?;
        let a_hat = m.airlight.forward(g, ap, x)?;
        let a_hom = g.channel_mean(a_hat);
        let j_hat = g.recover(x, t_hat, a_hom, self.config.t_floor);
        let ep = m.edge.bind(g);
        let edge = edge_loss_on_tape(g, &m.edge, &ep, t_hat, t_gt, weights, self.config.pixel_norm);
        let l_air = g.mse(a_hat, a_gt);
        let l_dehaze = g.mse(j_hat, j_gt);
        Ok(Forward {
            t_hat,
            j_hat,
            edge_total: edge.total,
            edge_l2: edge.l2,
            edge_grad: edge.grad,
            edge_feat: edge.feat,
            l_air,
            l_dehaze,
        })
    }

    fn step_transmission(&mut self, batch: &Batch) -> Result<LossRecord> {
        let stage = Stage::Transmission;
        let m = &self.model;
        let mut g = Graph::new();
        let tp = m.transmission_params.bind(&mut g, true);
        let x = g.constant(batch.hazy.clone());
        let t_gt = g.constant(batch.transmission.clone());
        let t_hat = m.transmission.forward(&mut g, &tp, x)?;
        let ep = m.edge.bind(&mut g);
        let edge = edge_loss_on_tape(&mut g, &m.edge, &ep, t_hat, t_gt, &self.config.weights, self.config.pixel_norm);
        let total = g.scalar(edge.total);
        if !total.is_finite() {
            return Err(self.abort(stage, format!("non-finite transmission loss {total}")));
        }
        let grads = collect_grads(&g.backward(edge.total), &tp);
        if !grads_finite(&grads) {
            return Err(self.abort(stage, "non-finite transmission gradient"));
        }
        let lr = self.lr();
        adam_step(&mut self.model.transmission_params, &mut self.opt[0], &grads, lr, &self.config.adam)?;
        Ok(LossRecord {
            stage,
            iteration: self.progress.completed,
            total,
            components: LossComponents {
                transmission: total,
                ..LossComponents::default()
            },
            edge_l2: g.scalar(edge.l2),
            edge_grad: g.scalar(edge.grad),
            edge_feat: g.scalar(edge.feat),
            disc_loss: None,
            disc_real: None,
            disc_fake: None,
            wall_ms: 0.0,
        })
    }

    fn step_airlight(&mut self, batch: &Batch) -> Result<LossRecord> {
        let stage = Stage::Airlight;
        let m = &self.model;
        let mut g = Graph::new();
        let ap = m.airlight_params.bind(&mut g, true);
        let x = g.constant(batch.hazy.clone());
        let a_gt = g.constant(batch.airlight.clone());
        let a_hat = m.airlight.forward(&mut g, &ap, x)?;
        let loss = g.mse(a_hat, a_gt);
        let total = g.scalar(loss);
        if !total.is_finite() {
            return Err(self.abort(stage, format!("non-finite airlight loss {total}")));
        }
        let grads = collect_grads(&g.backward(loss), &ap);
        if !grads_finite(&grads) {
            return Err(self.abort(stage, "non-finite airlight gradient"));
        }
        let lr = self.lr();
        adam_step(&mut self.model.airlight_params, &mut self.opt[1], &grads, lr, &self.config.adam)?;
        Ok(LossRecord {
            stage,
            iteration: self.progress.completed,
            total,
            components: LossComponents {
                airlight: total,
                ..LossComponents::default()
            },
            edge_l2: 0.0,
            edge_grad: 0.0,
            edge_feat: 0.0,
            disc_loss: None,
            disc_real: None,
            disc_fake: None,
            wall_ms: 0.0,
        })
    }

    fn step_joint(&mut self, batch: &Batch, adversarial: bool) -> Result<LossRecord> {
        let stage = Stage::Joint;
        let w = self.config.weights;
        let mut g = Graph::new();
        let tp = self.model.transmission_params.bind(&mut g, true);
        let ap = self.model.airlight_params.bind(&mut g, true);
        let fwd = self.generator_forward(&mut g, batch, &tp, &ap, &w)?;

        // (a) Discriminator update on the real pair and the current fake pair.
        let mut disc = None;
        let mut new_disc_params = None;
        if adversarial {
            let m = &self.model;
            let mut gd = Graph::new();
            let dp = m.discriminator_params.bind(&mut gd, true);
            let j_real = gd.constant(batch.clean.clone());
            let t_real = gd.constant(batch.transmission.clone());
            let j_fake = gd.constant(g.value(fwd.j_hat).clone());
            let t_fake = gd.constant(g.value(fwd.t_hat).clone());
            let real = m.discriminator.score_pair(&mut gd, &dp, j_real, t_real)?;
            let fake = m.discriminator.score_pair(&mut gd, &dp, j_fake, t_fake)?;
            let loss = discriminator_loss_on_tape(&mut gd, real, fake);
            let ld = gd.scalar(loss);
            if !ld.is_finite() {
                return Err(self.abort(stage, format!("non-finite discriminator loss {ld}")));
            }
            let grads = collect_grads(&gd.backward(loss), &dp);
            if !grads_finite(&grads) {
                return Err(self.abort(stage, "non-finite discriminator gradient"));
            }
            let mut params = m.discriminator_params.clone();
            let mut opt = self.opt[2].clone();
            adam_step(&mut params, &mut opt, &grads, self.lr(), &self.config.adam)?;
            disc = Some((ld, gd.value(real).mean(), gd.value(fake).mean()));
            new_disc_params = Some((params, opt));
        }

        // (b) Generator update on the total objective with the refreshed discriminator.
        let mut terms = vec![
            (fwd.edge_total, w.lambda_transmission),
            (fwd.l_air, w.lambda_airlight),
            (fwd.l_dehaze, w.lambda_dehaze),
        ];
        let mut joint = 0.0;
        if let Some((params, _)) = &new_disc_params {
            let dp = params.bind(&mut g, false);
            let fake = self.model.discriminator.score_pair(&mut g, &dp, fwd.j_hat, fwd.t_hat)?;
            let lj = joint_generator_loss_on_tape(&mut g, fake);
            joint = g.scalar(lj);
            terms.push((lj, w.lambda_joint));
        }
        let total_var = g.weighted_sum(&terms);
        let total = g.scalar(total_var);
        if !total.is_finite() {
            return Err(self.abort(stage, format!("non-finite total loss {total}")));
        }
        let grads = g.backward(total_var);
        let gt = collect_grads(&grads, &tp);
        let ga = collect_grads(&grads, &ap);
        if !grads_finite(&gt) || !grads_finite(&ga) {
            return Err(self.abort(stage, "non-finite generator gradient"));
        }
        let lr = self.lr();
        // All checks passed; commit every update.
        if let Some((params, opt)) = new_disc_params {
            self.model.discriminator_params = params;
            self.opt[2] = opt;
        }
        adam_step(&mut self.model.transmission_params, &mut self.opt[0], &gt, lr, &self.config.adam)?;
        adam_step(&mut self.model.airlight_params, &mut self.opt[1], &ga, lr, &self.config.adam)?;
        Ok(LossRecord {
            stage,
            iteration: self.progress.completed,
            total,
            components: LossComponents {
                transmission: g.scalar(fwd.edge_total),
                airlight: g.scalar(fwd.l_air),
                dehaze: g.scalar(fwd.l_dehaze),
                joint,
            },
            edge_l2: g.scalar(fwd.edge_l2),
            edge_grad: g.scalar(fwd.edge_grad),
            edge_feat: g.scalar(fwd.edge_feat),
            disc_loss: disc.map(|d| d.0),
            disc_real: disc.map(|d| d.1),
            disc_fake: disc.map(|d| d.2),
            wall_ms: 0.0,
        })
    }

    /// Gradient RMS reaching each generator under `weights` on one sample.
    pub fn probe_gradients(&self, sample: &HazeSample, weights: &LossWeights) -> Result<GradientProbe> {
        let batch = Batch {
            hazy: sample.hazy.tensor().clone(),
            clean: sample.clean.tensor().clone(),
            transmission: sample.transmission.tensor().clone(),
            airlight: sample.airlight.tensor().clone(),
        };
        let mut g = Graph::new();
        let tp = self.model.transmission_params.bind(&mut g, true);
        let ap = self.model.airlight_params.bind(&mut g, true);
        let fwd = self.generator_forward(&mut g, &batch, &tp, &ap, weights)?;
        let total = g.weighted_sum(&[
            (fwd.edge_total, weights.lambda_transmission),
            (fwd.l_air, weights.lambda_airlight),
            (fwd.l_dehaze, weights.lambda_dehaze),
        ]);
        let grads = g.backward(total);
        Ok(GradientProbe {
            transmission_rms: grad_rms(&collect_grads(&grads, &tp)),
            airlight_rms: grad_rms(&collect_grads(&grads, &ap)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientProbe {
    pub transmission_rms: f64,
    pub airlight_rms: f64,
}

/// Weights with only the dehazing term `L^d` active.
pub fn dehaze_only_weights() -> LossWeights {
    LossWeights {
        lambda_l2: 0.0,
        lambda_grad: 0.0,
        lambda_feat: 0.0,
        lambda_joint: 0.0,
        lambda_transmission: 0.0,
        lambda_airlight: 0.0,
        lambda_dehaze: 1.0,
    }
}

/// Checks that `L^d` alone sends gradient into both generators through the recovery step.
pub fn gradient_path_probe(model: &Model, config: &TrainConfig, sample: &HazeSample) -> Result<GradientProbe> {
    let data = std::slice::from_ref(sample);
    let t = Trainer::new(model.clone(), config.clone(), data)?;
    t.probe_gradients(sample, &dehaze_only_weights())
}

fn check_data(data: &[HazeSample], config: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let [h, w] = config.image_size;
    if let Some(s) = data.iter().find(|s| s.hazy.height() != h || s.hazy.width() != w) {
        return Err(Error::Config(format!(
            "sample {}/{} is {}x{}, training image_size is {h}x{w}",
            s.scene_id,
            s.variant_id,
            s.hazy.height(),
            s.hazy.width()
        )));
    }
    Ok(())
}

fn run_single(
    model: Model,
    data: &[HazeSample],
    config: &TrainConfig,
    stage: Stage,
    iters: usize,
    adversarial: bool,
) -> Result<(Model, CheckpointState)> {
    let mut t = Trainer::new(model, config.clone(), data)?;
    t.progress = Progress { stage, completed: 0 };
    let mut schedule = StageSchedule {
        stage1_iters: 0,
        stage2_iters: 0,
        stage3_iters: 0,
        adversarial,
    };
    match stage {
        Stage::Transmission => schedule.stage1_iters = iters,
        Stage::Airlight => schedule.stage2_iters = iters,
        Stage::Joint => schedule.stage3_iters = iters,
    }
    t.run(&schedule, None, &mut |_| {})?;
    let state = t.checkpoint();
    Ok((t.into_model(), state))
}

/// Stage 1 alone: edge-preserving loss on the transmission net.
pub fn train_stage1_transmission(
    model: Model,
    data: &[HazeSample],
    config: &TrainConfig,
    iters: usize,
) -> Result<(Model, CheckpointState)> {
    run_single(model, data, config, Stage::Transmission, iters, false)
}

/// Stage 2 alone: L2 on the airlight net.
pub fn train_stage2_airlight(
    model: Model,
    data: &[HazeSample],
    config: &TrainConfig,
    iters: usize,
) -> Result<(Model, CheckpointState)> {
    run_single(model, data, config, Stage::Airlight, iters, false)
}

/// Stage 3 alone: joint fine-tuning, adversarial per `schedule`.
pub fn train_stage3_joint(
    model: Model,
    data: &[HazeSample],
    config: &TrainConfig,
    schedule: &StageSchedule,
) -> Result<(Model, CheckpointState)> {
    run_single(model, data, config, Stage::Joint, schedule.stage3_iters, schedule.adversarial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synthesize_dataset, DatasetSpec, ProceduralSource};

    fn small_model() -> ModelConfig {
        ModelConfig {
            transmission: TransmissionNetConfig {
                stem_channels: 8,
                ..TransmissionNetConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn data(n: usize) -> Vec<HazeSample> {
        let spec = DatasetSpec {
            num_scenes: n,
            variants_per_scene: 1,
            image_size: [32, 32],
            seed: 3,
            ..DatasetSpec::default()
        };
        synthesize_dataset(&spec, &ProceduralSource::new(3, n, 32, 32)).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            image_size: [32, 32],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_leave_parameters_unchanged() {
        let d = data(1);
        let m = Model::build(&small_model()).unwrap();
        let before = m.transmission_params.clone();
        let (after, state) = train_stage1_transmission(m, &d, &config(), 0).unwrap();
        assert_eq!(after.transmission_params, before);
        assert!(state.history.is_empty());
    }

    #[test]
    fn stage2_leaves_transmission_bit_identical() {
        let d = data(1);
        let m = Model::build(&small_model()).unwrap();
        let t_before = m.transmission_params.clone();
        let a_before = m.airlight_params.clone();
        let (after, _) = train_stage2_airlight(m, &d, &config(), 3).unwrap();
        assert_eq!(after.transmission_params, t_before);
        assert_ne!(after.airlight_params, a_before);
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let m = Model::build(&small_model()).unwrap();
        assert!(matches!(train_stage1_transmission(m, &[], &config(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_indivisible_size() {
        let c = TrainConfig {
            image_size: [48, 64],
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_gives_identical_histories() {
        let d = data(2);
        let run = || {
            let m = Model::build(&small_model()).unwrap();
            let mut t = Trainer::new(m, config(), &d).unwrap();
            let s = StageSchedule {
                stage1_iters: 2,
                stage2_iters: 1,
                stage3_iters: 2,
                adversarial: true,
            };
            t.run(&s, None, &mut |_| {}).unwrap();
            t.history().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 5);
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_losses(y)));
    }

    #[test]
    fn non_finite_loss_aborts_without_mutation() {
        let d = data(1);
        let mut m = Model::build(&small_model()).unwrap();
        let mut poisoned = m.edge.parameters().clone();
        poisoned.values_mut().next().unwrap().data_mut()[0] = f64::NAN;
        m.edge = m.edge.clone().with_parameters(&poisoned).unwrap();
        let mut t = Trainer::new(m, config(), &d).unwrap();
        let before = t.checkpoint();
        let s = StageSchedule {
            stage1_iters: 1,
            stage2_iters: 0,
            stage3_iters: 0,
            adversarial: false,
        };
        let err = t.run(&s, None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
        assert_eq!(t.checkpoint(), before);
    }

    #[test]
    fn dehaze_term_reaches_both_generators() {
        let d = data(1);
        let m = Model::build(&small_model()).unwrap();
        let p = gradient_path_probe(&m, &config(), &d[0]).unwrap();
        assert!(p.transmission_rms > 0.0, "{p:?}");
        assert!(p.airlight_rms > 0.0, "{p:?}");
    }
}
