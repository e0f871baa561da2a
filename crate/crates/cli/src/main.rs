//! `movad`: synthesize data, train, evaluate, stream-score and sweep ablations.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use movad::ablation::AblationAxis;
use movad::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "movad", version, about = "Online frame-level video anomaly detection")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log filter for standard error, e.g. `info` or `movad=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset in the annotation + image directory layout.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint, metrics and the resolved config.
    Train(TrainArgs),
    /// Stream every video of a dataset and report frame-level AUC.
    Eval(EvalArgs),
    /// Score a directory of frames one frame at a time.
    Score(ScoreArgs),
    /// Train and evaluate every point of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Signal {
    Appearance,
    Motion,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with a full synthetic spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Start from the long-range dependency preset.
    #[arg(long)]
    long_range: bool,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum)]
    signal: Option<Signal>,
}

/// Overrides applied on top of a preset or config file.
#[derive(Debug, Default, Args)]
struct Overrides {
    /// Frames per backbone window.
    #[arg(long)]
    nf: Option<usize>,
    /// Stacked LSTM layers; 0 removes the recurrent memory.
    #[arg(long)]
    lstm_cells: Option<usize>,
    /// Training clip length in frames.
    #[arg(long)]
    vcl: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer steps per epoch; one pass over the frames when absent.
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Carry the recurrent state from one training batch to the next.
    #[arg(long)]
    carry_state: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.nf {
            cfg.model.stmm.nf = v;
        }
        if let Some(v) = self.lstm_cells {
            cfg.model.head.lstm_cells = v;
        }
        if let Some(v) = self.vcl {
            cfg.train.vcl = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.steps_per_epoch {
            cfg.train.steps_per_epoch = Some(v);
        }
        if self.carry_state {
            cfg.train.carry_state = true;
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Preset name (`toy`, `full`) or path to a TOML run config.
    #[arg(long, default_value = "toy")]
    config: String,
    /// Training dataset directory; defaults to the config's `data.train`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset evaluated after every epoch.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    exclude_warmup: bool,
    /// Output directory for the checkpoint, metrics and logs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Leave the first NF-1 frames of every video out of the AUC.
    #[arg(long)]
    exclude_warmup: bool,
    /// Refuse the checkpoint unless its model matches this config.
    #[arg(long)]
    config: Option<String>,
    /// Write the full result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of numbered frame images.
    #[arg(long)]
    input: PathBuf,
    /// Score file (`frame<TAB>score` per line); standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from a recurrent state saved by `--dump-state`.
    #[arg(long)]
    initial_state: Option<PathBuf>,
    /// Directory receiving the recurrent state every `--every` frames.
    /// The frame window is not saved, so a resumed stream warms up again.
    #[arg(long)]
    dump_state: Option<PathBuf>,
    /// Dump interval in frames.
    #[arg(long, default_value_t = 1)]
    every: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// TOML ablation grid. Flags below override its fields.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// `nf`, `lstm_cells`, `vcl` or `memory_onoff`.
    #[arg(long)]
    axis: Option<AblationAxis>,
    /// Comma separated values; memory rows 1-4 for `memory_onoff`.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    /// Comma separated training seeds; `0,1,2` unless `--seed` is given.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Base config preset or file when no grid file is given.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset; the training set when absent.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    exclude_warmup: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
        Command::Ablate(a) => commands::ablate(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
