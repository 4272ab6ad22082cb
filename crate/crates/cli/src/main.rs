//! `icbench`: run the caption-evaluation bench from the command line.

mod commands;
mod error;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icbench_core::dataset::LengthClass;

#[derive(Parser, Debug)]
#[command(name = "icbench", version, about = "Caption-evaluation bench: MOS, scoring head, reports")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Bench configuration (JSON).
    #[arg(long, global = true, env = "ICBENCH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the split, training and mock-model seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact cache for reconstructions and features.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Model backend.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    /// Run mos/report/leaderboard/split on this icbench service instead of locally.
    #[arg(long, global = true, env = "ICBENCH_SERVER")]
    pub server: Option<String>,
    /// Log level filter, e.g. `info` or `icbench_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Remote,
    Mock,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Short,
    Long,
}

impl From<Subset> for LengthClass {
    fn from(s: Subset) -> Self {
        match s {
            Subset::Short => LengthClass::Short,
            Subset::Long => LengthClass::Long,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a captions file and write it in canonical form.
    Ingest {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign captions to train/val/test by image.
    Split {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ratios as train:val:test.
        #[arg(long, default_value = "4:1:1")]
        ratios: String,
    },
    /// Screen raw ratings and compute MOS.
    Mos {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Screening report (JSON); defaults to `<out>.screening.json`.
        #[arg(long)]
        screening: Option<PathBuf>,
        /// Captions, needed for the plot-data CSVs below.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// MOS histogram per length class and dimension (CSV).
        #[arg(long, requires = "captions")]
        histogram: Option<PathBuf>,
        /// Per-category, per-model mean MOS (CSV).
        #[arg(long, requires = "captions")]
        by_category: Option<PathBuf>,
    },
    /// Generate reconstructions for every caption.
    Reconstruct {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Extract backbone features for every caption and dimension.
    Extract {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        images_root: PathBuf,
        #[arg(long)]
        recon_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split, reconstruct, extract and train the scoring head.
    Train {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        mos: PathBuf,
        #[arg(long)]
        images_root: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score captions with a trained head.
    Score {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        images_root: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where reconstructions go; defaults to the checkpoint's directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Correlation of metric scores with MOS, per dimension and overall.
    Report {
        /// scores.jsonl, or any JSONL of {caption_id, dimension, score|mu}.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        mos: PathBuf,
        /// Adds per-length-class rows.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-model leaderboard, with SRCC to the human board when both inputs are given.
    Leaderboard {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        mos: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        /// CSV of the metric board if given, else the human board.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Captions to annotate; enables the /api study endpoints.
        #[arg(long, requires = "journal")]
        captions: Option<PathBuf>,
        /// Append-only study journal.
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Study settings (JSON): target, session length, qualification key.
        #[arg(long)]
        study: Option<PathBuf>,
        /// Serve mock /v1/generate and /v1/features.
        #[arg(long)]
        mock_models: bool,
    },
    /// Write a synthetic corpus: captions, images and simulated ratings.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        bad_raters: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.global.log).unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(error::Exit::Internal as u8);
        }
    };
    match rt.block_on(commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
