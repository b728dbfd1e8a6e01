use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Regional building inventories: ingest, geocode, merge, impute, self-train,
/// rasterize and report.
#[derive(Debug, Parser)]
#[command(name = "bimkit", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads for impute and rasterize [default: available parallelism].
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a metadata or vision CSV into a GeoJSON inventory.
    Ingest(IngestArgs),
    /// Attach coordinates to records that only have an address.
    Geocode(GeocodeArgs),
    /// Merge a metadata inventory with a vision inventory.
    Merge(MergeArgs),
    /// Fill missing values of one attribute by spatial imputation.
    Impute(ImputeArgs),
    /// Score an imputation engine by k-fold cross-validation.
    CrossValidate(CrossValidateArgs),
    /// Train the seed soft-story classifier on expert labels.
    Train(TrainArgs),
    /// Grow the labeled set by self-training.
    Selftrain(SelftrainArgs),
    /// Interpolate a probability attribute onto a raster grid.
    Rasterize(RasterizeArgs),
    /// Precision, recall and F1 of a classifier or prediction file.
    Metrics(MetricsArgs),
    /// JSON summary of an inventory and attached metric files.
    Report(ReportArgs),
    /// Run the whole pipeline from a JSON config.
    Run(RunArgs),
    /// Write the synthetic city inputs and a pipeline config.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceKind {
    Metadata,
    Vision,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "metadata")]
    pub kind: SourceKind,
    /// Column layout as JSON; inferred from the header when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// JSON lines, one rejected row per line.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GeocodeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Offline `address,lat,lon[,quality]` table.
    #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
    pub table: Option<PathBuf>,
    /// Remote geocoding endpoint; the key is read from GEOCODER_API_KEY.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// JSONL cache, created if missing and reused across runs.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// JSON list of record ids that could not be geocoded.
    #[arg(long)]
    pub failures: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Policy {
    MetadataFirst,
    VisionFirst,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long)]
    pub vision: PathBuf,
    #[arg(long, value_enum, default_value = "metadata-first")]
    pub policy: Policy,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EngineArg {
    Kriging,
    NeuralNet,
    NeighborMajority,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Exponential,
    Gaussian,
    Spherical,
}

#[derive(Debug, Args)]
pub struct SurfArgs {
    #[arg(long)]
    pub attribute: String,
    #[arg(long, value_enum, default_value = "kriging")]
    pub engine: EngineArg,
    /// Imputation settings as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Neighbors per prediction.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub surf: SurfArgs,
    /// Clip numeric predictions to the observed range.
    #[arg(long)]
    pub clamp: bool,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CrossValidateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub surf: SurfArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs with only the output layer trainable.
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    /// Epochs with every layer trainable.
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// CSV `id,f1..fd,label`.
    #[arg(long)]
    pub labeled: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Undersample the majority class first.
    #[arg(long)]
    pub balance: bool,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SelftrainArgs {
    #[arg(long)]
    pub labeled: PathBuf,
    /// CSV `id,f1..fd`.
    #[arg(long)]
    pub unlabeled: PathBuf,
    /// Held-out labeled CSV scored after every round.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Confidence threshold in (0.5, 1].
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[arg(long)]
    pub no_balance: bool,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Receives labels.csv, model.json and selftrain.json.
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SurfaceArg {
    Idw,
    Kriging,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub attribute: String,
    #[arg(long, value_enum, default_value = "idw")]
    pub engine: SurfaceArg,
    /// Degrees.
    #[arg(long, default_value_t = 0.001)]
    pub cell_size: f64,
    /// `min_lon,min_lat,max_lon,max_lat`; data extent plus 5% when omitted.
    #[arg(long)]
    pub bbox: Option<String>,
    /// Only export cells at or above this probability to GeoJSON.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Nodata radius in meters [default: 2x mean nearest-neighbor spacing].
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ESRI ASCII grid output.
    #[arg(long)]
    pub ascii: PathBuf,
    /// GeoJSON cell polygons output.
    #[arg(long)]
    pub geojson: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Labeled CSV with ground truth (`id,...,label`).
    #[arg(long)]
    pub data: PathBuf,
    /// Classifier JSON written by `train` or `selftrain`.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub model: Option<PathBuf>,
    /// CSV `id,prediction`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub positive: usize,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub inventory: PathBuf,
    /// Inventory before imputation, for missing rates before/after.
    #[arg(long)]
    pub before: Option<PathBuf>,
    /// JSON metric files to embed, keyed by file stem.
    #[arg(long)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = bimkit::synth::OAKLAND_BUILDINGS)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default_level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match std::panic::catch_unwind(|| commands::dispatch(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal error; please report this with the command line used");
            ExitCode::from(2)
        }
    }
}
