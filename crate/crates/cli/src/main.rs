use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtid_cli::commands::{self, EvalArgs, TrainArgs};
use mtid_cli::config::RunConfig;
use mtid_core::objective::{LossVariant, MaskConvention};
use mtid_core::pipeline::MaskMode;
use mtid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mtid", version, about = "Procedure planning with masked temporal interpolation diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(3..=6))]
    horizon: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory.
    #[arg(long, env = "MTID_DATA_DIR")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (writes to --out, or $MTID_DATA_DIR).
    GenData,
    /// Train the task classifier.
    TrainClassifier {
        #[command(flatten)]
        data: DataArg,
    },
    /// Train the diffusion planner.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Classifier run to bundle into the checkpoint.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Continue from the checkpoint in --out if there is one.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps (a later --resume continues).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_kebab::<LossVariant>)]
        loss: Option<LossVariant>,
        #[arg(long, value_parser = parse_kebab::<MaskConvention>)]
        mask_loss: Option<MaskConvention>,
    },
    /// Sample plans for the test split and score them.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Training run or checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_kebab::<MaskMode>)]
        mask_mode: Option<MaskMode>,
        #[arg(long)]
        ddim_steps: Option<usize>,
        /// Samples per instance for the uncertainty report.
        #[arg(long)]
        uncertainty: Option<usize>,
        /// Condition on ground-truth tasks instead of the classifier.
        #[arg(long)]
        oracle_tasks: bool,
    },
    /// Render report and curve files to SVG.
    Plot {
        /// report.json files.
        reports: Vec<PathBuf>,
        /// CSV curve files.
        #[arg(long, num_args = 1..)]
        curves: Vec<PathBuf>,
    },
    /// Train and evaluate every cell of the configured ablation matrix.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.apply_seed(s);
    }
    if let Some(h) = common.horizon {
        cfg.horizon = h as usize;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| Error::config("no output directory; pass --out"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenData => {
            if cfg.out.is_none() {
                cfg.out = std::env::var_os("MTID_DATA_DIR").map(PathBuf::from);
            }
            commands::gen_data(&cfg, &out_dir(&cfg)?)?;
        }
        Command::TrainClassifier { data } => {
            commands::cmd_train_classifier(&cfg, &data.data, &out_dir(&cfg)?)?;
        }
        Command::Train {
            data,
            classifier,
            resume,
            steps,
            loss,
            mask_loss,
        } => {
            if let Some(l) = loss {
                cfg.train.loss = l;
            }
            if let Some(m) = mask_loss {
                cfg.train.mask_loss = m;
            }
            let out = out_dir(&cfg)?;
            commands::cmd_train(
                &cfg,
                &TrainArgs {
                    data: &data.data,
                    classifier: classifier.as_deref(),
                    resume,
                    stop_at: steps,
                    out: &out,
                },
            )?;
        }
        Command::Eval {
            data,
            checkpoint,
            mask_mode,
            ddim_steps,
            uncertainty,
            oracle_tasks,
        } => {
            if let Some(m) = mask_mode {
                cfg.eval.mask_mode = m;
            }
            if ddim_steps.is_some() {
                cfg.eval.ddim_steps = ddim_steps;
            }
            if uncertainty.is_some() {
                cfg.eval.uncertainty = uncertainty;
            }
            cfg.eval.oracle_tasks |= oracle_tasks;
            let out = out_dir(&cfg)?;
            commands::cmd_eval(
                &cfg,
                &EvalArgs {
                    checkpoint: &checkpoint,
                    data: &data.data,
                    horizon: cli.common.horizon.map(|h| h as usize),
                    out: &out,
                },
            )?;
        }
        Command::Plot { reports, curves } => {
            commands::cmd_plot(&reports, &curves, &out_dir(&cfg)?)?;
        }
        Command::Sweep { data, classifier } => {
            commands::cmd_sweep(&cfg, &data.data, classifier.as_deref(), &out_dir(&cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
