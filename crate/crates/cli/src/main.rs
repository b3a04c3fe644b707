use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod backends;
mod commands;
mod settings;

/// Errors caused by how the tool was invoked rather than by a failure
/// while running. They exit with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "markprompt",
    version,
    about = "Zero-shot vision-language tasks driven by image markers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run settings shared by every subcommand. Flags override the config file,
/// which overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config file with any subset of the run settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scoring backend: synthetic, random, blind, fixture:<path> or
    /// remote:<url>+<model>. Repeat to ensemble.
    #[arg(long = "backend", global = true)]
    backends: Vec<String>,
    /// Marker as JSON, e.g. '{"shape":"circle","color":[255,0,0],"radius_frac":0.06,"thickness_frac":0.01}'.
    #[arg(long, global = true)]
    marker: Option<String>,
    /// Sinkhorn temperature applied to the cost (kernel exp(-tau C)).
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Grid size M for localization (M x M candidates).
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// PCK threshold as a fraction of the longer box side.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Number of distractor expressions for REC mean subtraction.
    #[arg(long, global = true)]
    distractors: Option<usize>,
    /// Seed for synthetic backends and distractor sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports and images.
    #[arg(long = "out", global = true)]
    output_dir: Option<String>,
    /// Worker threads (default: one per processor).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Keypoint prompt template with {part} and optionally {animal}.
    #[arg(long, global = true)]
    template: Option<String>,
    /// row-argmax, col-argmax or hungarian.
    #[arg(long, global = true)]
    decode: Option<String>,
    /// Score REC proposals by raw similarity.
    #[arg(long, global = true)]
    no_mean_subtract: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match keypoint names to marked locations with optimal transport.
    NameKeypoints {
        /// Dataset JSON file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Find each named keypoint among grid locations and report PCK.
    Localize {
        /// Dataset JSON file.
        #[arg(long)]
        data: PathBuf,
        /// JSON file mapping image paths to saliency mask PNGs.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Referring expression comprehension over box proposals.
    Rec {
        /// Dataset JSON file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Rate of criminal-category predictions with and without markers.
    Bias {
        /// Dataset JSON file.
        #[arg(long)]
        data: PathBuf,
        /// JSON file with positive, neutral and criminal label lists.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Draw a marker on one image and write the marked variants as PNG.
    Annotate {
        #[arg(long)]
        image: PathBuf,
        /// Marker center as x,y.
        #[arg(long, conflicts_with = "bbox", required_unless_present = "bbox")]
        at: Option<String>,
        /// Box to encircle as x,y,w,h.
        #[arg(long)]
        bbox: Option<String>,
        /// Comma list of blur, gray; or all, none.
        #[arg(long, default_value = "all")]
        effects: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Keypoint naming accuracy for every shape x color x size combination.
    SweepMarkers {
        /// Dataset JSON file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "circle,rectangle,cross,arrow")]
        shapes: String,
        /// Comma list of color names or #rrggbb.
        #[arg(long, default_value = "red")]
        colors: String,
        /// Comma list of radius fractions.
        #[arg(long, default_value = "0.06")]
        sizes: String,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<markprompt::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
