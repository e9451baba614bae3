use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::RunConfig;

/// Instruction-guided audio editing at desk scale.
#[derive(Debug, Parser)]
#[command(name = "tripledit", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every random choice is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `--set train.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic sound-event corpus (WAV files plus corpus.tsv).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Generate editing triplets from a corpus.
    BuildDataset {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Total number of examples.
        #[arg(long, conflicts_with = "per_task")]
        total: Option<usize>,
        /// Examples per task under a uniform mix.
        #[arg(long)]
        per_task: Option<usize>,
        /// Task weights such as `add=2,drop=1`.
        #[arg(long)]
        mix: Option<String>,
    },
    /// Train the denoiser on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps; also the learning-rate schedule length.
        #[arg(long)]
        steps: Option<usize>,
        /// Stop once this many steps are done; resume later with --resume.
        #[arg(long)]
        until: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Edit one clip with a trained checkpoint.
    Edit(EditArgs),
    /// Score paired output and reference WAV directories.
    Eval {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe a WAV, grid record, checkpoint, loss curve or dataset.
    Inspect { path: PathBuf },
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sampler {
    Ddpm,
    Sdedit,
    Inpaint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Rough,
    Precise,
    WoText,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "")]
    instruction: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Sampler::Ddpm)]
    sampler: Sampler,
    /// Noising depth for sdedit; defaults to half the schedule.
    #[arg(long)]
    sdedit_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = Variant::Precise)]
    variant: Variant,
    /// Mask file for inpainting (`time START END`, `cutoff HZ`, `all`).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Guidance coefficient s >= 1.
    #[arg(long)]
    guidance: Option<f64>,
    /// Resample and pad or trim the input to the configured clip length.
    #[arg(long)]
    conform: bool,
    /// Write intermediate mel grids, latents and the mask here.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::SynthCorpus { out, count } => commands::synth_corpus(&cfg, &out, count),
        Command::BuildDataset {
            corpus,
            out,
            total,
            per_task,
            mix,
        } => commands::build_dataset(&cfg, corpus, &out, total, per_task, mix),
        Command::Train {
            dataset,
            out,
            steps,
            until,
            resume,
        } => commands::train(&cfg, dataset, &out, steps, until, resume),
        Command::Edit(a) => commands::edit(&cfg, a),
        Command::Eval {
            outputs,
            references,
            out,
        } => commands::eval(&cfg, &outputs, &references, out),
        Command::Inspect { path } => commands::inspect(&cfg, &path),
        Command::ShowConfig => {
            print!("{}", cfg.show());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
