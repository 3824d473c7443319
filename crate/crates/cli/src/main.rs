//! `fishnet`: build, inspect, analyze and train FishNet models.
//!
//! Exit codes: 0 success, 1 a check failed (`bpcheck`), 2 invalid input
//! (usage, config, data or checkpoint files), 3 runtime failure.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "fishnet", version, about = "Build, analyze and train FishNet models")]
struct Cli {
    /// Output style for tables and numbers.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Tsv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a config and print its layer table.
    Build { config: PathBuf },
    /// Print the number of trainable parameters.
    Params { config: PathBuf },
    /// Print the FLOPs of one forward pass (two per multiply-add).
    Flops {
        config: PathBuf,
        /// Input shape CxHxW; defaults to the config's input_shape.
        #[arg(long, value_parser = parse_shape)]
        input: Option<[usize; 3]>,
    },
    /// Check which stage features receive the loss gradient directly.
    Bpcheck {
        config: PathBuf,
        /// Write the annotated graph in DOT format.
        #[arg(long)]
        dot: Option<PathBuf>,
        /// Features that must be direct, by node name or as tail0, body1,
        /// head2, ... (comma separated). Defaults to every stage feature.
        #[arg(long, value_delimiter = ',')]
        require: Vec<String>,
        /// Skip the numerical zero-residual check of direct verdicts.
        #[arg(long)]
        no_witness: bool,
        /// Seed of the random inputs used by the numerical check.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset, e.g.
    /// `classes=10,per_class=100,shape=3x32x32,seed=0,split=train`.
    Gen {
        spec: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a model and save a checkpoint; metrics go to stdout as TSV.
    Train {
        config: PathBuf,
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        recipe: RecipeArgs,
        /// Also append the metrics to this file.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Evaluate on this dataset after training.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Store optimizer momentum buffers in the checkpoint.
        #[arg(long)]
        save_momentum: bool,
    },
    /// Evaluate a checkpoint: top-1 accuracy and mean loss.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
    },
    /// Write the graph in DOT format, I-convs in red.
    ExportDot {
        config: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
pub struct RecipeArgs {
    /// Start from the ImageNet recipe (lr 0.1, ÷10 every 30 epochs, flip, crop).
    #[arg(long)]
    paper_recipe: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Decay the rate every this many epochs.
    #[arg(long)]
    step_epochs: Option<usize>,
    /// Decay factor, in (0, 1).
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Random horizontal flips.
    #[arg(long)]
    flip: bool,
    /// Random crops after zero padding by this many pixels.
    #[arg(long)]
    crop_pad: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Linear warm-up over this many epochs (off by default).
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Clip the global gradient norm (off by default).
    #[arg(long)]
    clip_norm: Option<f64>,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>().map_err(|_| format!("bad dimension `{d}` in `{s}`")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|_| format!("expected CxHxW, got `{s}`"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build { config } => commands::build(&config, cli.format),
        Command::Params { config } => commands::params(&config, cli.format),
        Command::Flops { config, input } => commands::flops(&config, input, cli.format),
        Command::Bpcheck {
            config,
            dot,
            require,
            no_witness,
            seed,
        } => commands::bpcheck(&config, dot.as_deref(), &require, !no_witness, seed, cli.format),
        Command::Gen { spec, output } => commands::gen(&spec, &output),
        Command::Train {
            config,
            data,
            output,
            recipe,
            metrics,
            eval,
            save_momentum,
        } => commands::train(&config, &data, &output, &recipe, metrics.as_deref(), eval.as_deref(), save_momentum, cli.format),
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => commands::eval(&checkpoint, &data, batch_size, cli.format),
        Command::ExportDot { config, output } => commands::export_dot(&config, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fishnet: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
