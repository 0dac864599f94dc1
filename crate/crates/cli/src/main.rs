mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const PRECEDENCE: &str = "Settings resolve as: command-line flags, then the --config file, then built-in defaults.
Every run writes resolved_config.toml into its output directory; passing that file
back as --config reproduces the run.
Without --out, output goes to $RADIOGAN_OUT/<command> (or ./runs/<command>).";

#[derive(Parser, Debug)]
#[command(name = "radiogan", version, about = "Gene-conditioned nodule synthesis", after_help = PRECEDENCE)]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the procedural corpus with planted factors.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Build a corpus from CT volumes and a gene table.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// Directory with one sub-directory per subject.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Gene table CSV (subject id column, then one column per gene).
        #[arg(long)]
        genes: Option<PathBuf>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train (or resume from --checkpoint).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Insert a nodule into one background patch.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Background patch (.npy, values in [-1, 1]).
        #[arg(long)]
        background: Option<PathBuf>,
        /// Subject row of the corpus gene matrix.
        #[arg(long)]
        gene_row: Option<usize>,
        /// Corpus (defaults to the one recorded in the checkpoint).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write the gene code of every subject.
    EmbedGenes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Clustering, factor recovery and background preservation report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeSynthetic { .. } => "make-synthetic",
            Command::PrepareData { .. } => "prepare-data",
            Command::Train { .. } => "train",
            Command::Synthesize { .. } => "synthesize",
            Command::EmbedGenes { .. } => "embed-genes",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain().find_map(|c| c.downcast_ref::<radiogan::Error>()).map_or("other", radiogan::Error::kind)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors exit 2; --help and --version exit 0
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let name = cli.command.name();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error command={name} kind={} message={msg:?}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}
