use std::path::PathBuf;
use std::process::ExitCode;

use amod_cli::commands::{cmd_eval, cmd_extract, cmd_synth, cmd_train, cmd_visualize, SplitSel};
use amod_cli::error::{EXIT_OK, EXIT_USAGE};
use amod_cli::{init_threads, CliResult, RunConfig};
use amod_core::modality::ModalitySet;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "amod", version, about = "Face liveness from artificial modalities")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "amod-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Modalities {
    Full,
    RawPair,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic protocols and a matching config.toml.
    Synth,
    /// Precompute modality bundles without augmentation.
    Extract {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitSel,
        #[arg(long)]
        protocol: Option<u32>,
    },
    /// Train one fusion model per protocol.
    Train {
        #[arg(long)]
        protocol: Option<u32>,
        /// Overrides train.modalities.
        #[arg(long, value_enum)]
        modalities: Option<Modalities>,
    },
    /// Score dev and test, pick thresholds on dev and report.
    Eval {
        /// Directory holding p<id>/model.fusn; defaults to --out.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<u32>,
    },
    /// Write frames, dynamic images and flow pictures of one track.
    Visualize {
        #[arg(long)]
        track: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Train {
        modalities: Some(m), ..
    } = &cli.command
    {
        cfg.train.modalities = match m {
            Modalities::Full => ModalitySet::Full,
            Modalities::RawPair => ModalitySet::RawPair,
        };
    }
    println!("config sha256 {}", cfg.hash());
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &cli.out).map(|_| ()),
        Command::Extract { split, protocol } => cmd_extract(&cfg, split, protocol, &cli.out).map(|_| ()),
        Command::Train { protocol, .. } => cmd_train(&cfg, protocol, &cli.out).map(|_| ()),
        Command::Eval { models, protocol } => {
            let models = models.unwrap_or_else(|| cli.out.clone());
            cmd_eval(&cfg, &models, protocol, &cli.out).map(|_| ())
        }
        Command::Visualize { track } => cmd_visualize(&cfg, &track, &cli.out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    let threads = match std::env::var("AMOD_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: AMOD_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(EXIT_USAGE as u8);
            }
        },
        Err(_) => None,
    };
    init_threads(threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

