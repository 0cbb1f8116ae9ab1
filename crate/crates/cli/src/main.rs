//! Command-line entry point: data generation, parser and masked-LM
//! training, parsing, sequential fine-tuning arms, UD evaluation, and
//! representation-similarity reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arbor", version, about = "Biaffine dependency parsing on a miniature transformer, with intermediate-training pipelines and CKA analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic treebank and toy task data
    GenData {
        /// Output directory (created if absent)
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Sentence counts for the train/dev/test treebank splits
        #[arg(long, default_value_t = 400)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        dev: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        /// Instances per split for each toy task
        #[arg(long, default_value_t = 200)]
        task_size: usize,
    },
    /// Train the biaffine parser on a treebank and evaluate on the test split
    TrainParser {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override schedule.mode (standard | adapter)
        #[arg(long)]
        mode: Option<String>,
        /// Decode the test split with the maximum-arborescence decoder
        #[arg(long)]
        mst: bool,
        /// Reject invalid training trees instead of warn-and-skip
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        strict: bool,
    },
    /// Parse a CoNLL-U file with a trained checkpoint
    Parse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Use the maximum-arborescence decoder instead of greedy
        #[arg(long)]
        mst: bool,
    },
    /// Run sequential fine-tuning arms (none / parsing / mlm) end to end
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override schedule.mode for the intermediate stage
        #[arg(long)]
        mode: Option<String>,
    },
    /// Intermediate masked-LM training on treebank sentences
    MlmTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        /// Masking rate in (0, 1]
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Layer-wise linear-CKA report between two checkpoints
    Cka {
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// CoNLL-U file supplying the sentence set
        #[arg(long)]
        sentences: PathBuf,
        /// Written as <out_prefix>.csv and <out_prefix>.json
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long, default_value = "A")]
        tag_a: String,
        #[arg(long, default_value = "B")]
        tag_b: String,
    },
    /// Attachment scores of a predicted CoNLL-U file against gold
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Optional output path for the report JSON (stdout otherwise)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out_dir,
            seed,
            train,
            dev,
            test,
            task_size,
        } => commands::gen_data(&out_dir, seed, train, dev, test, task_size),
        Command::TrainParser {
            config,
            seed,
            mode,
            mst,
            strict,
        } => commands::train_parser(&config, seed, mode.as_deref(), mst, strict),
        Command::Parse {
            checkpoint,
            vocab,
            input,
            output,
            mst,
        } => commands::parse(&checkpoint, &vocab, &input, &output, mst),
        Command::Finetune { config, seed, mode } => {
            commands::finetune(&config, seed, mode.as_deref())
        }
        Command::MlmTrain {
            config,
            seed,
            mode,
            rate,
        } => commands::mlm_train(&config, seed, mode.as_deref(), rate),
        Command::Cka {
            checkpoint_a,
            checkpoint_b,
            vocab,
            sentences,
            out_prefix,
            tag_a,
            tag_b,
        } => commands::cka(
            &checkpoint_a,
            &checkpoint_b,
            &vocab,
            &sentences,
            &out_prefix,
            &tag_a,
            &tag_b,
        ),
        Command::Eval { pred, gold, out } => commands::eval(&pred, &gold, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if commands::is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
