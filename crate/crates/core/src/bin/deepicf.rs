use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deepicf::checkpoint::{export_text, load_checkpoint};
use deepicf::cli::{cmd_eval, cmd_recommend, cmd_split, cmd_train_from_file, Scorer};
use deepicf::LineFormat;

#[derive(Parser)]
#[command(name = "deepicf", version, about = "Item-based CF with FISM, DeepICF and DeepICF+a")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-out split of an interaction log
    Split {
        #[arg(long)]
        input: PathBuf,
        /// tab or double_colon
        #[arg(long, default_value = "tab")]
        format: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix for .train/.test/.negatives/.idmap
        #[arg(long)]
        split: PathBuf,
    },
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Train with FISM pre-training forced on
    Pretrain(TrainArgs),
    /// HR@k and NDCG@k on the held-out items
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// model, itempop or itemknn
        #[arg(long, default_value = "model")]
        scorer: String,
        /// Per-user ranks as CSV
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Top-n items for one user
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Dump a checkpoint as text
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Overrides the seed in the config file
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> deepicf::Result<()> {
    match cli.command {
        Command::Split {
            input,
            format,
            seed,
            split,
        } => {
            let format: LineFormat = format.parse()?;
            let s = cmd_split(&input, format, seed, &split)?;
            println!(
                "users={} items={} train={} dropped_users={}",
                s.num_users(),
                s.num_items(),
                s.train.num_interactions(),
                s.dropped_users
            );
        }
        Command::Train(args) => train(args, false)?,
        Command::Pretrain(args) => train(args, true)?,
        Command::Eval {
            checkpoint,
            split,
            k,
            scorer,
            report,
        } => {
            let scorer: Scorer = scorer.parse()?;
            let r = cmd_eval(checkpoint.as_deref(), &split, k, scorer, report.as_deref())?;
            println!("{}", r.summary());
        }
        Command::Recommend {
            checkpoint,
            split,
            user,
            n,
        } => {
            print!("{}", cmd_recommend(&checkpoint, &split, &user, n)?);
        }
        Command::Export { checkpoint } => {
            let (config, params) = load_checkpoint(&checkpoint)?;
            export_text(std::io::stdout().lock(), &config, &params)?;
        }
    }
    Ok(())
}

fn train(args: TrainArgs, force_pretrain: bool) -> deepicf::Result<()> {
    let (_, report) = cmd_train_from_file(
        &args.config,
        &args.split,
        &args.checkpoint,
        args.metrics.as_deref(),
        force_pretrain,
        args.seed,
    )?;
    if let Some(last) = report.epochs.last() {
        println!("epochs={} final_loss={:.6}", last.epoch, last.loss);
    } else {
        println!("epochs=0");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
