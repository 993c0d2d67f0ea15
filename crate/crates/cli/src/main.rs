use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crowdformer_cli::{cmd_cross_eval, cmd_eval, cmd_gen_synth, cmd_gradcheck, cmd_predict, cmd_train, load_config, TrainArgs};

#[derive(Parser)]
#[command(name = "crowdformer", version, about = "Crowd counting by direct count regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = ["sha", "shb", "qnrf", "ucf50"])]
        preset: Option<String>,
        /// Total epoch budget, overriding the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Refuse checkpoints not written for this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = ["sha", "shb", "qnrf", "ucf50"])]
        preset: Option<String>,
    },
    /// Evaluate checkpoints on foreign datasets without fine-tuning.
    CrossEval {
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Matrix file (TSV); a JSON-lines twin is written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Also score each model on its own source dataset.
        #[arg(long)]
        include_diagonal: bool,
    },
    /// Print the predicted count for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Compare every gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        min_count: u64,
        #[arg(long, default_value_t = 50)]
        max_count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            ckpt,
            seed,
            preset,
            epochs,
        } => {
            let outcome = cmd_train(&TrainArgs {
                config,
                data,
                out,
                resume: ckpt,
                seed,
                preset,
                epochs,
            })?;
            println!("{}", outcome.checkpoint.display());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            config,
            seed,
            preset,
        } => {
            let expected = config
                .map(|c| load_config(&c, seed, preset.as_deref()))
                .transpose()?;
            let report = cmd_eval(&ckpt, &data, &out, expected.as_ref())?;
            println!("mae {} mse {} n {}", report.mae, report.mse, report.n);
        }
        Command::CrossEval {
            ckpt,
            data,
            out,
            include_diagonal,
        } => {
            let cells = cmd_cross_eval(&ckpt, &data, &out, include_diagonal)?;
            print!("{}", crowdformer::eval::cross_matrix_tsv(&cells));
        }
        Command::Predict { ckpt, image } => {
            println!("{}", cmd_predict(&ckpt, &image)?);
        }
        Command::Gradcheck {
            config,
            seed,
            trials,
            out,
        } => {
            let run = load_config(&config, None, None)?;
            let result = cmd_gradcheck(&run, seed, trials, out.as_deref());
            let reports = result.context("gradient check")?;
            for r in reports {
                println!("{}\t{:e}\t{}", r.op_name, r.max_relative_error, if r.passed { "pass" } else { "FAIL" });
            }
        }
        Command::GenSynth {
            out,
            n,
            min_count,
            max_count,
            seed,
        } => {
            let manifest = cmd_gen_synth(&out, n, min_count, max_count, seed)?;
            println!("{} images in {}", manifest.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
