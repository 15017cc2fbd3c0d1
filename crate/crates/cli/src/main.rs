//! `scenesynth` command-line entry points.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 data validation,
//! 130 interrupted (completed work is flushed first).

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "scenesynth", version, about = "Deterministic scene-text synthesis")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write final placement heatmaps for every DecompST record.
    GenHeatmap(GenHeatmapArgs),
    /// Build training triplets from DecompST instances.
    Preprocess(PreprocessArgs),
    /// Generate annotated samples from backgrounds.
    Synth(SynthArgs),
    /// Check every DecompST record and list violations.
    Validate(DatasetArgs),
    /// Print per-source image and valid-instance counts.
    Stats(StatsArgs),
    /// Render a single text patch for inspection.
    RenderPatch(RenderPatchArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// DecompST root directory.
    #[arg(long, env = "DECOMPST_ROOT")]
    pub root: PathBuf,
    /// Report broken records and continue instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args, Debug)]
pub struct GenHeatmapArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Disable anchor striding and region caps.
    #[arg(long)]
    pub exact: bool,
    /// Anchor sampling stride.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Only this record id.
    #[arg(long)]
    pub record: Option<String>,
    /// Only this instance index (requires --record).
    #[arg(long, requires = "record")]
    pub instance: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of background images, or a DecompST root (its erased/
    /// images are used).
    #[arg(long)]
    pub backgrounds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Inclusive range of texts drawn per image.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub texts: Option<Vec<usize>>,
    /// Long side of the resized background.
    #[arg(long)]
    pub image_size: Option<u32>,
    /// Required proposal overlap of a sampled square.
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Smallest text height kept, in pixels.
    #[arg(long)]
    pub min_height: Option<f64>,
    /// Use `<dir>/<id>.png` heatmaps as placement proposals.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Label maps `<dir>/<id>.png` for semantic-boundary filtering.
    #[arg(long)]
    pub semantic: Option<PathBuf>,
    /// Skip the color harmonizer.
    #[arg(long)]
    pub no_harmonize: bool,
    /// Skip ids already listed in the output manifest.
    #[arg(long)]
    pub resume: bool,
    /// Process at most this many backgrounds.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Skip the ICDAR-2015 text export.
    #[arg(long)]
    pub no_icdar: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Exit 4 unless the counts equal the full release's.
    #[arg(long)]
    pub expect_release: bool,
}

#[derive(Args, Debug)]
pub struct RenderPatchArgs {
    #[arg(long)]
    pub text: String,
    /// Output PNG (RGBA).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub font: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    /// Fill color as R,G,B.
    #[arg(long, default_value = "0,0,0", value_parser = parse_rgb)]
    pub fill: [u8; 3],
    /// Effects as a JSON list, e.g. '[{"kind":"shadow","dx":2,"dy":2,"opacity":0.4}]'.
    #[arg(long)]
    pub effects: Option<String>,
}

fn parse_rgb(s: &str) -> Result<[u8; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected R,G,B".into());
    }
    let mut out = [0u8; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad channel {p:?}"))?;
    }
    Ok(out)
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(f) = commands::run(cli) {
        eprintln!("scenesynth: {f}");
        std::process::exit(f.exit_code());
    }
}
