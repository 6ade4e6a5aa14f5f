mod commands;
mod config;
mod figures;
mod record;

use attnguide_core::{Error, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

const AFTER_HELP: &str = "\
Configuration is layered: the --config TOML file, then ATTNGUIDE_* \
environment variables (double underscore nests sections, e.g. \
ATTNGUIDE_TRAIN__LR=1e-4 sets [train] lr), then flags.

Exit codes: 0 success, 1 invalid input, 2 missing backbone capability, \
3 runtime failure.";

#[derive(Parser)]
#[command(name = "attnguide", version, about = "Subject fine-tuning with attention guidance", after_help = AFTER_HELP)]
struct Cli {
    /// TOML config file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override every seed in the config at once
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root directory
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a concept manifest and summarize it
    Prepare {
        /// Manifest path; defaults to dataset.manifest from the config
        manifest: Option<PathBuf>,
        /// Treat soft (non-binary) masks as errors
        #[arg(long)]
        strict: bool,
        /// Generate the built-in two-subject demo dataset under <out>/dataset
        #[arg(long)]
        demo: bool,
    },
    /// Sample class prior images from the frozen model
    Priors {
        /// Single class to generate; defaults to every class in the manifest
        #[arg(long)]
        class: Option<String>,
        /// Images per class; defaults to priors.count from the config
        #[arg(long)]
        count: Option<usize>,
        /// Checkpoint to sample from; defaults to a fresh seeded model
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
    },
    /// Fine-tune subject identifiers with attention guidance
    Train {
        /// Continue from an existing checkpoint instead of a fresh model
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Generate samples for every subject and prompt template
    Sample {
        /// Run name under <out>/runs/
        #[arg(long, default_value = "samples")]
        run: String,
        /// Checkpoint; defaults to <out>/train/model.json
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
    },
    /// Record identifier attention maps along a sampling trajectory
    Attn {
        /// Prompt containing at least one registered identifier
        #[arg(long)]
        prompt: String,
        /// Checkpoint; defaults to <out>/train/model.json
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
    },
    /// Score a sample run against the dataset reference images
    Eval {
        /// Run name under <out>/runs/
        #[arg(long, default_value = "samples")]
        run: String,
    },
    /// Compare trainable parameter sets by weight-change rate
    Ablate {
        /// Comma-separated parameter sets (kv, qv, qkv, all)
        #[arg(long, value_delimiter = ',', default_value = "qkv,qv,kv")]
        sets: Vec<String>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 by default; keep 2 for capability errors and
            // report bad usage as what it is, invalid input
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) => 1,
                Error::Capability(_) => 2,
                _ => 3,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (config, config_hash) = config::load_config(cli.config.as_deref(), cli.seed)?;
    let ctx = commands::Ctx { config, config_hash, out: cli.out };
    let default_weights = || ctx.out.join("train").join("model.json");
    match cli.command {
        Command::Prepare { manifest, strict, demo } => {
            commands::cmd_prepare(&ctx, manifest.as_deref(), strict, demo)
        }
        Command::Priors { class, count, weights } => {
            commands::cmd_priors(&ctx, class.as_deref(), count, weights.as_deref())
        }
        Command::Train { resume } => commands::cmd_train(&ctx, resume.as_deref()),
        Command::Sample { run, weights } => {
            commands::cmd_sample(&ctx, &run, &weights.unwrap_or_else(default_weights))
        }
        Command::Attn { prompt, weights } => {
            commands::cmd_attn(&ctx, &prompt, &weights.unwrap_or_else(default_weights))
        }
        Command::Eval { run } => commands::cmd_eval(&ctx, &run),
        Command::Ablate { sets } => commands::cmd_ablate(&ctx, &sets),
    }
}
