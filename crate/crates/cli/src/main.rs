//! `progdistill`: synthetic data, teachers, distillation chains, evaluation
//! and FLOPs tables from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use progdistill::distillation::LabelMode;

use config::{parse_dims, RunConfig, Scale};

#[derive(Parser, Debug)]
#[command(name = "progdistill", version, about = "Progressive label distillation for keyword spotting")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat key=value file (sections: synth., data., model., train.).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// desk (4 kHz, small network) or standard (16 kHz, res15).
    #[arg(long, global = true)]
    scale: Option<Scale>,
}

/// Training flags shared by every command that trains.
#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    crops: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic keyword corpus in the ingestion layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Target words (silence and unknown are added).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
    },
    /// Train a network on full-length clips and ground-truth labels.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        ms: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a short-input network directly on raw-label random crops.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        ms: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// One distillation step from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        ms: u32,
        #[arg(long, default_value_t = LabelMode::Soft)]
        mode: LabelMode,
        #[arg(long)]
        out: PathBuf,
        /// Also write the first epoch's distilled crops and labels.
        #[arg(long)]
        dump_dataset: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Teacher plus a chain of distillation steps, e.g. --dims 1000,800,500.
    Chain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1000,800,500")]
        dims: String,
        #[arg(long, default_value_t = LabelMode::Soft)]
        mode: LabelMode,
        /// Run every chain of the progressive table plus soft/hard direct
        /// chains; writes table3.csv, fig2.csv and fig3.csv.
        #[arg(long)]
        sweep: bool,
        /// Reuse matching checkpoints already in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Three-crop evaluation of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        net: PathBuf,
        /// Dataset root (ingestion layout).
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Print a CSV row instead of JSON.
        #[arg(long)]
        csv: bool,
        /// Draw crop offsets at random from this seed.
        #[arg(long)]
        random_offsets: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs per input length, e.g. --dims 500..1000.
    Flops {
        #[arg(long, default_value = "500..1000")]
        dims: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(global: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    cfg.set_opt("seed", global.seed);
    cfg.set_opt("model.scale", global.scale);
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, t: &TrainFlags) {
    cfg.set_opt("train.epochs", t.epochs);
    cfg.set_opt("train.crops_per_source", t.crops);
    cfg.set_opt("train.batch_size", t.batch_size);
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Synth {
            out,
            classes,
            train_per_class,
            test_per_class,
        } => {
            cfg.set_opt("synth.classes", classes);
            cfg.set_opt("synth.train_per_class", train_per_class);
            cfg.set_opt("synth.test_per_class", test_per_class);
            commands::synth(&cfg, &out)
        }
        Command::TrainTeacher { data, ms, out, train } => {
            apply_train(&mut cfg, &train);
            commands::train_teacher_cmd(&cfg, &data, ms, &out)
        }
        Command::Baseline { data, ms, out, train } => {
            apply_train(&mut cfg, &train);
            commands::baseline(&cfg, &data, ms, &out)
        }
        Command::Distill {
            teacher,
            data,
            ms,
            mode,
            out,
            dump_dataset,
            train,
        } => {
            apply_train(&mut cfg, &train);
            cfg.set("distill.ms", ms);
            cfg.set("distill.mode", mode);
            commands::distill(
                &cfg,
                &commands::DistillArgs {
                    teacher: &teacher,
                    data: &data,
                    ms,
                    mode,
                    out: &out,
                    dump_dataset,
                },
            )
        }
        Command::Chain {
            data,
            dims,
            mode,
            sweep,
            resume,
            out,
            train,
        } => {
            apply_train(&mut cfg, &train);
            let dims = parse_dims(&dims)?;
            cfg.set("chain.dims", progdistill::kv::join(&dims));
            cfg.set("chain.mode", mode);
            cfg.set("chain.sweep", sweep);
            commands::chain(
                &cfg,
                &commands::ChainArgs {
                    data: &data,
                    dims,
                    mode,
                    sweep,
                    resume,
                    out: &out,
                },
            )
        }
        Command::Eval {
            net,
            test,
            split,
            csv,
            random_offsets,
            out,
        } => commands::eval(
            &cfg,
            &commands::EvalArgs {
                net: &net,
                test: &test,
                split: &split,
                csv,
                random_offsets,
                out: out.as_deref(),
            },
        ),
        Command::Flops { dims, out } => commands::flops(&cfg, &parse_dims(&dims)?, out.as_deref()),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
