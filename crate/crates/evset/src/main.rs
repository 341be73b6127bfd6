use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evset::commands::{self, EvalArgs, InferArgs, Options};
use evset::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "evset",
    version,
    about = "Anchored dense event set prediction on synthetic sequences"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for generation, inference and evaluation (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Write per-layer attention maps and relation masks during inference.
    #[arg(long, global = true)]
    dump_attention: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.videos`.
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Position scatter and location-correlation/similarity pairs of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train into the run directory, one checkpoint per epoch.
    Train,
    /// Score a checkpoint, or a predictions file, against a dataset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Report path without extension; `.json` and `.csv` are written.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write ranked, captioned predictions for a dataset.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the ground-truth number of events instead of the counter's.
        #[arg(long)]
        oracle_count: bool,
    },
    /// Finite-difference check of the whole pipeline at toy size.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let opts = Options {
        config: cli.config,
        run_dir: cli.run_dir,
        seed: cli.seed,
        workers: cli.workers,
        dump_attention: cli.dump_attention,
    };
    match cli.command {
        Command::Generate { out, videos } => {
            let n = commands::cmd_generate(&opts, &out, videos)?;
            println!("generated {n} videos -> {}", out.display());
        }
        Command::Stats { data, out } => {
            let s = commands::cmd_stats(&data, &out)?;
            let show = |r: Option<f64>| r.map_or("undefined".to_string(), |r| format!("{r:.4}"));
            println!(
                "{} videos, {} events, {} pairs; r(LC, similarity) = {}; r(duration, |center - 0.5|) = {}",
                s.videos,
                s.events,
                s.pairs,
                show(s.lc_similarity_r),
                show(s.duration_centrality_r)
            );
        }
        Command::Train => {
            let s = commands::cmd_train(&opts)?;
            println!(
                "{} steps over {} epochs, final loss {:.4}; checkpoint {}",
                s.steps,
                s.epochs,
                s.epoch_loss.last().copied().unwrap_or(f64::NAN),
                s.final_checkpoint.display()
            );
        }
        Command::Eval {
            data,
            checkpoint,
            predictions,
            out,
        } => {
            let args = EvalArgs {
                data,
                checkpoint,
                predictions,
                out,
            };
            let r = commands::cmd_eval(&opts, &args)?;
            for t in &r.thresholds {
                println!(
                    "tIoU {:.1}: precision {:.4} recall {:.4}",
                    t.tau, t.precision, t.recall
                );
            }
            println!(
                "precision {:.4} recall {:.4} F1 {:.4} BLEU4 {:.4} over {} matched pairs",
                r.precision, r.recall, r.f1, r.bleu4, r.matched_pairs
            );
        }
        Command::Infer {
            data,
            checkpoint,
            out,
            oracle_count,
        } => {
            let args = InferArgs {
                data,
                checkpoint,
                out,
                oracle_count,
            };
            let p = commands::cmd_infer(&opts, &args)?;
            println!("predictions -> {}", p.display());
        }
        Command::Gradcheck => {
            let r = commands::cmd_gradcheck(&opts)?;
            for p in &r.params {
                println!("{:<40} {:>6} {:.3e}", p.name, p.entries, p.max_rel_err);
            }
            println!(
                "{}: max relative error {:.3e} (tolerance {:.0e}) over {} entries, {} retried at a smaller step, {:.1}s",
                if r.passed { "PASS" } else { "FAIL" },
                r.max_rel_err,
                r.tolerance,
                r.entries,
                r.retried,
                r.seconds
            );
            if !r.passed {
                return Err(CliError::GradCheck {
                    max_rel_err: r.max_rel_err,
                    tolerance: r.tolerance,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
