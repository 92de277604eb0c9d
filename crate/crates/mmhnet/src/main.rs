use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mmhnet::bench::{self, Kernel};
use mmhnet::commands::{self, GenerateArgs};
use mmhnet::config::parse_lengths;
use mmhnet::experiment::{Conditioning, Suite};

#[derive(Parser)]
#[command(name = "mmhnet", version, about = "Hierarchical non-causal SSM flow matching on synthetic multimodal episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic episode splits.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Data directory (defaults to paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Sample a latent for one test episode's conditions.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Split directory to take the episode from instead of regenerating it.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric report, one CSV row per test length.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated lengths (defaults to data.test_lengths).
        #[arg(long)]
        lengths: Option<String>,
        /// Generate from the next episode's conditions (control).
        #[arg(long, conflicts_with = "reference")]
        shuffled: bool,
        /// Score the ground-truth audio instead of generating.
        #[arg(long)]
        reference: bool,
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
    },
    /// Train and score the variants of an ablation suite.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Time the SSM kernels across lengths.
    Bench {
        /// noncausal_fast, causal_scan, dense_mask or all.
        #[arg(long, default_value = "all")]
        kernel: String,
        #[arg(long, default_value = "1024,2048,4096,8192,16384,32768,65536")]
        lengths: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Write the train split and one test split per test length.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Data { action: DataAction::Gen { config, seed, out, force } } => {
            let mut loaded = commands::load_config(config.as_deref())?;
            if let Some(s) = seed {
                loaded.config.data.train_seed = s;
                loaded.config.validate()?;
            }
            let out = out.unwrap_or_else(|| loaded.config.data_dir.clone());
            for d in commands::data_gen(&loaded, &out, force)? {
                println!("{}", d.display());
            }
        }
        Command::Train { config, seed, data, out, force } => {
            let loaded = commands::load_config(config.as_deref())?;
            let data = data.unwrap_or_else(|| loaded.config.data_dir.clone());
            commands::train(&loaded, seed, &data, &out, force)?;
            println!("{}", out.join("checkpoint").display());
        }
        Command::Generate { checkpoint, length, episode, split, steps, cfg, seed, out } => {
            let g = commands::generate(&GenerateArgs {
                checkpoint: &checkpoint,
                length,
                episode,
                split: split.as_deref(),
                steps,
                cfg,
                seed,
                out: &out,
            })?;
            println!("{} ({} x {}, seed {}, steps {}, cfg {})", out.display(), g.latent.rows(), g.latent.cols(), g.seed, g.steps, g.cfg_scale);
        }
        Command::Eval { checkpoint, lengths, shuffled, reference, out } => {
            let lengths = lengths.as_deref().map(parse_lengths).transpose()?;
            let mode = if reference {
                Conditioning::Reference
            } else if shuffled {
                Conditioning::Shuffled
            } else {
                Conditioning::Matched
            };
            commands::eval(&checkpoint, lengths, mode, &out)?;
            print!("{}", std::fs::read_to_string(&out)?);
        }
        Command::Ablate { suite, config, seed, out } => {
            let suite: Suite = suite.parse()?;
            let mut loaded = commands::load_config(config.as_deref())?;
            if let Some(s) = seed {
                loaded.config.train.seed = s;
            }
            let path = commands::ablate(&loaded, suite, &out)?;
            print!("{}", std::fs::read_to_string(path)?);
        }
        Command::Bench { kernel, lengths, reps, out } => {
            let kernels = if kernel == "all" { Kernel::ALL.to_vec() } else { vec![kernel.parse()?] };
            let lengths = parse_lengths(&lengths)?;
            if kernels.contains(&Kernel::Dense) && lengths.iter().any(|&l| l > bench::DENSE_MAX_LEN) {
                eprintln!("note: dense_mask is only timed up to L = {}", bench::DENSE_MAX_LEN);
            }
            commands::bench(&kernels, &lengths, reps, &out)?;
            print!("{}", std::fs::read_to_string(&out)?);
        }
    }
    Ok(())
}
