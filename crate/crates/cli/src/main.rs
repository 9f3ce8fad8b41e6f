use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qembed_cli::commands::{cmd_calibrate, cmd_eval, cmd_search, cmd_train};
use qembed_cli::config::RunConfig;
use qembed_cli::exit_code;
use qembed_cli::ingest::{ingest_file, InputFormat};

#[derive(Parser)]
#[command(name = "qembed", version, about = "Multi-task question embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dataset into canonical pair records.
    Ingest {
        input: PathBuf,
        /// pairs_labeled, pairs_positive, question_topic or question_context_answer
        #[arg(long)]
        format: String,
        /// Directory for the output; the file keeps the input's stem.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint, log and vocabulary.
    Train(RunArgs),
    /// Fit per-task similarity thresholds.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured evaluation protocols.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fixed threshold for every task instead of the calibrated ones.
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
    /// Rank a corpus against one query.
    Search {
        query: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
}

fn load(args: &RunArgs) -> qembed::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.override_seed(s);
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> qembed::Result<()> {
    match cli.command {
        Command::Ingest { input, format, out } => {
            let format: InputFormat = format.parse()?;
            std::fs::create_dir_all(&out)?;
            let stem = input.file_stem().unwrap_or_default();
            let target = out.join(stem).with_extension("jsonl");
            if target == input {
                return Err(qembed::Error::Config("output would overwrite the input".into()));
            }
            let stats = ingest_file(&input, format, &target)?;
            println!("{stats}\t{}", target.display());
        }
        Command::Train(args) => {
            let s = cmd_train(&load(&args)?)?;
            println!(
                "{} steps, vocabulary {}\t{}",
                s.steps,
                s.vocab_size,
                s.checkpoint.display()
            );
        }
        Command::Calibrate { run, checkpoint } => {
            for f in cmd_calibrate(&load(&run)?, checkpoint.as_deref())? {
                println!(
                    "{}\t{}\t{}\taccuracy {}\tprecision {}",
                    f.task, f.policy, f.threshold, f.stats.accuracy, f.stats.precision
                );
            }
        }
        Command::Eval {
            run,
            checkpoint,
            threshold,
        } => {
            for m in cmd_eval(&load(&run)?, checkpoint.as_deref(), threshold)? {
                println!("{}\t{}\t{}", m.task, m.metric, m.value);
            }
        }
        Command::Search {
            query,
            checkpoint,
            corpus,
            k,
            threshold,
        } => {
            let hits = cmd_search(&checkpoint, &corpus, &query, k, threshold)?;
            if hits.is_empty() {
                println!("no answer");
            }
            for h in hits {
                println!("{}\t{}\t{:.6}\t{}", h.rank, h.id, h.similarity, h.text);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
