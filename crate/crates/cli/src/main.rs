use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Single-image dehazing: synthesize data, train, dehaze, evaluate.
#[derive(Parser, Debug)]
#[command(name = "dehaze", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic hazy dataset.
    Synth(SynthArgs),
    /// Run the stage-wise training schedule.
    Train(TrainArgs),
    /// Dehaze images with a trained checkpoint.
    Dehaze(DehazeArgs),
    /// Score a checkpoint (or a baseline) on a dataset.
    Eval(EvalArgs),
    /// Train and score the five ablation configurations.
    Ablate(AblateArgs),
    /// Print a preset as a TOML configuration file.
    Config(ConfigArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Bundled configuration tier (used when no --config is given; default desk).
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the configured one).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum PresetArg {
    Overfit,
    Desk,
    Full,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset directory; synthesized into `<out>/data` when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DehazeArgs {
    /// Trained checkpoint; optional when both overrides are given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use this float map (`.dmap`) as the transmission instead of estimating it.
    #[arg(long)]
    pub transmission: Option<PathBuf>,
    /// Use this atmospheric light (one value or `r,g,b`) instead of estimating it.
    #[arg(long)]
    pub airlight: Option<String>,
    /// Lower bound on the transmission during recovery.
    #[arg(long, default_value_t = dehaze_core::physics::DEFAULT_T_FLOOR)]
    pub t_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Hazy input images (PNG) or float maps (`.dmap`).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Ground-truth predictions (every score is 1).
    Oracle,
    /// The hazy input as the dehazed result.
    Input,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Score a reference estimator instead of a checkpoint.
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    /// Held-out scene fraction used by `--split train|test`.
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    /// Write image strips for the first N samples.
    #[arg(long, default_value_t = 4)]
    pub grids: usize,
    #[arg(long, default_value_t = dehaze_core::physics::DEFAULT_T_FLOOR)]
    pub t_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset directory; synthesized into `<out>/data` when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
}

/// A problem with the user's input rather than with the run itself.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dehaze_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Dehaze(a) => commands::dehaze(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Config(a) => commands::print_config(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
