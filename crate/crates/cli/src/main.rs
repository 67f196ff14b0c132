mod commands;
mod config;
mod gradcheck;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use multicenter::data::MixtureSpec;
use multicenter::Error;

#[derive(Parser)]
#[command(
    name = "mcc",
    about = "Train, check, and evaluate multi-center classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        /// Path to the run config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report top-1 accuracy of a checkpoint on one data split.
    Eval {
        /// Path to a .ckpt file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config supplying the data section.
        #[arg(long)]
        config: PathBuf,
        /// Which split to score: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Upper bounds d,C,K,n on the random problem sizes.
        #[arg(long, default_value = "4,3,2,5")]
        dims: String,
        /// Number of random instances to check.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// RNG seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train across sub-center counts and seeds, collecting accuracies.
    SweepK {
        /// Base run config; k and seed are overridden per run.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sub-center counts to sweep.
        #[arg(long, default_value = "0,1,2,4,8")]
        k_list: String,
        /// Seeds per count, starting at the config's seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Sample a Gaussian-mixture dataset and write train/test CSVs.
    GenData {
        #[arg(long)]
        num_classes: usize,
        #[arg(long)]
        clusters_per_class: usize,
        #[arg(long)]
        dim: usize,
        /// Distance scale between cluster means.
        #[arg(long)]
        separation: f64,
        /// Within-cluster standard deviation.
        #[arg(long)]
        scale: f64,
        /// Training samples per class; a fifth more go to the test split.
        #[arg(long)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for train.csv and test.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => 3,
        Error::ShapeMismatch { .. } | Error::StaleExpansion(_) | Error::StaleCache(_) => 1,
        _ => 2,
    }
}

fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, seed, out } => {
            commands::cmd_train(&config, seed, out).map(|()| true)
        }
        Command::Eval {
            checkpoint,
            config,
            split,
        } => commands::cmd_eval(&checkpoint, &config, &split).map(|()| true),
        Command::Gradcheck { dims, trials, seed } => commands::cmd_gradcheck(&dims, trials, seed),
        Command::SweepK {
            config,
            k_list,
            seeds,
        } => commands::cmd_sweep_k(&config, &k_list, seeds),
        Command::GenData {
            num_classes,
            clusters_per_class,
            dim,
            separation,
            scale,
            samples_per_class,
            seed,
            out,
        } => {
            let spec = MixtureSpec {
                num_classes,
                clusters_per_class,
                dim,
                cluster_separation: separation,
                cluster_scale: scale,
                samples_per_class,
                seed,
            };
            commands::cmd_gen_data(&spec, &out).map(|()| true)
        }
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() {
    std::process::exit(run());
}
