//! `speednet`: train, evaluate and inspect the segmentation network.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use speednet_core::ops::OpKind;
use speednet_core::ErrorKind;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "speednet", version, about = "Dilated-involution segmentation network: training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set lr=5e-4`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class and overall Dice, Jaccard, precision and recall.
    Eval {
        /// Repeat to evaluate several checkpoints on the same data.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Dataset root; defaults to the checkpoint's `data_root`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        class: Option<String>,
        #[arg(long, value_enum, default_value_t = commands::Split::Test)]
        split: commands::Split,
        /// CSV destination; defaults to `<checkpoint>.eval.csv`. Single checkpoint only.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Score the ground-truth masks against themselves instead of running the network.
        #[arg(long, hide = true)]
        mask_oracle: bool,
    },
    /// Write a binary mask PNG (255 where probability > 0.5) for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Scale the input to the model size instead of rejecting it.
        #[arg(long)]
        resize: bool,
    },
    /// Parameter counts and checkpoint sizes per variant.
    Params {
        /// full, no-involution or dilated-bottleneck; all three when omitted.
        #[arg(long)]
        variant: Option<String>,
        /// Take model settings other than the variant from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every backward kernel, layer and the toy model.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Coordinates compared in the end-to-end model check.
        #[arg(long, default_value_t = 200)]
        model_samples: usize,
        /// Flip the sign of one op's backward kernel (e.g. `conv2d`) to confirm the suite notices.
        #[arg(long, value_name = "OP")]
        mutate: Option<OpKind>,
    },
    /// Generate a synthetic ellipse dataset in the on-disk class layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Process exit codes. Clap's own usage errors also exit with 2.
fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Format => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            overrides,
            epochs,
            seed,
            resume,
        } => commands::train(&config, &overrides, epochs, seed, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            class,
            split,
            csv,
            mask_oracle,
        } => commands::eval(&commands::EvalArgs {
            checkpoints: checkpoint,
            data,
            class,
            split,
            csv,
            mask_oracle,
        }),
        Command::Predict {
            checkpoint,
            input,
            output,
            resize,
        } => commands::predict(&checkpoint, &input, &output, resize),
        Command::Params { variant, config } => commands::params(variant.as_deref(), config.as_deref()),
        Command::Gradcheck {
            seeds,
            model_samples,
            mutate,
        } => commands::gradcheck(seeds, model_samples, mutate),
        Command::Synth { out, n, size, seed } => commands::synth(&out, n, size, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
