mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use paxnet::ga_isolate::JawType;
use paxnet::Error;

use crate::config::RunConfig;

/// Exit codes by error family.
pub mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const ROI: u8 = 5;
    pub const ISOLATION: u8 = 6;
    pub const NUMERIC: u8 = 7;
    pub const PARAMETER: u8 = 8;
    pub const INTERNAL: u8 = 9;
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Data(_) | Error::NotFound(_) | Error::Format { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Csv(_) => {
            exit::DATA
        }
        Error::Roi { .. } => exit::ROI,
        Error::Isolation(_) => exit::ISOLATION,
        Error::Numeric { .. } => exit::NUMERIC,
        Error::Parameter(_) => exit::PARAMETER,
        Error::Shape(_) | Error::Contract(_) => exit::INTERNAL,
    }
}

#[derive(Parser)]
#[command(name = "paxnet", version, about = "Caries detection on panoramic dental radiographs")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default 1).
    #[arg(long, global = true, env = "PAXNET_THREADS")]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum JawArg {
    Maxilla,
    Mandible,
}

impl From<JawArg> for JawType {
    fn from(j: JawArg) -> Self {
        match j {
            JawArg::Maxilla => JawType::Maxilla,
            JawArg::Mandible => JawType::Mandible,
        }
    }
}

#[derive(Subcommand)]
enum SynthKind {
    /// Labelled single-tooth crops with lesion masks and a manifest.
    Teeth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        caries_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A panoramic-like image with its true ROI.
    Panoramic {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic data.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Cut a panoramic image into single-tooth crops.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat the input as one jaw and skip ROI and separation.
        #[arg(long, value_enum)]
        jaw: Option<JawArg>,
        /// Also write an image per stage.
        #[arg(long)]
        debug_overlays: bool,
    },
    /// Pretrain the autoencoder on the training split of a manifest.
    PretrainAe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the classifier.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained autoencoder weights.
        #[arg(long)]
        ae: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, conflicts_with = "auto_lr")]
        lr: Option<f64>,
        /// Pick the learning rate with a range test first.
        #[arg(long)]
        auto_lr: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split file written by `train`; its test ids are evaluated.
        /// Without it every entry is.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Model configuration; defaults to model_config.json beside the checkpoint.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmaps and an optional robustness sweep for one tooth image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Target class; the predicted one by default.
        #[arg(long)]
        class: Option<usize>,
        /// Layer ids; all provider layers and the fusion layer by default.
        #[arg(long)]
        layer: Vec<String>,
        /// Run the rotation/scale/brightness sweep.
        #[arg(long)]
        sweep: bool,
        /// Lesion mask used as the sweep reference.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Learning-rate range test.
    LrFind {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        /// Curve CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> paxnet::Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed)?;
    let threads = cli.threads.or(cfg.threads).unwrap_or(1);
    if threads == 0 {
        return Err(Error::Config("threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    log::info!("threads: {threads}");
    log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
    match cli.command {
        Command::Synth { kind } => match kind {
            SynthKind::Teeth { n, caries_fraction, out } => commands::synth_teeth(&cfg, n, caries_fraction, &out),
            SynthKind::Panoramic { out } => commands::synth_panoramic(&cfg, &out),
        },
        Command::Extract {
            input,
            out,
            jaw,
            debug_overlays,
        } => commands::extract(&cfg, &input, &out, jaw.map(Into::into), debug_overlays),
        Command::PretrainAe {
            manifest,
            out,
            epochs,
            lr,
        } => commands::pretrain_ae(cfg, &manifest, &out, epochs, lr),
        Command::Train {
            manifest,
            ae,
            out,
            epochs,
            lr,
            auto_lr,
        } => commands::train(cfg, &manifest, &ae, &out, epochs, lr, auto_lr),
        Command::Eval {
            manifest,
            checkpoint,
            split,
            model_config,
            out,
        } => commands::eval(
            &cfg,
            &manifest,
            &checkpoint,
            split.as_deref(),
            model_config.as_deref(),
            out.as_deref(),
        ),
        Command::Explain {
            checkpoint,
            image,
            out,
            model_config,
            class,
            layer,
            sweep,
            mask,
        } => commands::explain(
            &cfg,
            &commands::ExplainArgs {
                checkpoint: &checkpoint,
                image: &image,
                out: &out,
                model_config: model_config.as_deref(),
                class,
                layers: &layer,
                sweep,
                mask: mask.as_deref(),
            },
        ),
        Command::LrFind { manifest, ae, out } => commands::lr_find(&cfg, &manifest, &ae, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
