use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "wclear", version, about = "Winding clearness error and point cloud denoising")]
pub struct Cli {
    /// Worker threads for assembly, solves and metrics [default: all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// File of `key = value` lines supplying flag values; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Winding clearness error of a cloud, as JSON.
    Wce(WceArgs),
    /// Denoise a cloud by minimizing the penalized winding clearness loss.
    Denoise(DenoiseArgs),
    /// Winding field on a regular grid (CSV plus JSON sidecar).
    Field(FieldArgs),
    /// Point-level quality metrics against a reference, as one JSON line.
    Metrics(MetricsArgs),
    /// Add Gaussian noise to every coordinate.
    Noise(NoiseArgs),
    /// Sample a synthetic shape.
    Make(MakeArgs),
    /// Time denoising iterations over a range of cloud sizes.
    Bench(BenchArgs),
}

/// Winding system parameters. Defaults that depend on the task are resolved
/// per subcommand.
#[derive(Args, Debug, Clone)]
pub struct WindingArgs {
    /// Kernel width w.
    #[arg(long, default_value_t = 0.04)]
    pub width: f64,

    /// Regularization weight alpha.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,

    /// Box-constraint weight eta [default: 50 for 2D and 200 for 3D
    /// evaluation; 10 for denoising].
    #[arg(long)]
    pub eta: Option<f64>,

    /// Box half extent h [default: 0.7 for evaluation, 0.6 for denoising].
    #[arg(long)]
    pub box_half_extent: Option<f64>,

    /// Number of box samples [default: 2N].
    #[arg(long)]
    pub box_samples: Option<usize>,

    /// Seed for the box samples.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct WceArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub winding: WindingArgs,
    /// Also write the solved surfels as normals of the cloud to this file.
    #[arg(long, value_name = "FILE")]
    pub surfels: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct DenoiseArgs {
    pub input: PathBuf,
    /// Output cloud (.xyz/.xy text or .ply).
    #[arg(short, long)]
    pub output: PathBuf,
    /// Per-iteration trace CSV [default: <output>.trace.csv].
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub winding: WindingArgs,
    /// Weight of the displacement penalty lambda.
    #[arg(long, default_value_t = 20.0)]
    pub lambda: f64,
    /// Adam iterations.
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Process clouds larger than the batch size in batches.
    #[arg(long)]
    pub batch: bool,
    /// Points in the first batch.
    #[arg(long, default_value_t = 5000)]
    pub batch_size: usize,
    /// Undenoised (and anchor) points in each later batch.
    #[arg(long, default_value_t = 2500)]
    pub mix_size: usize,
    /// Seed for batch selection.
    #[arg(long, default_value_t = 0)]
    pub batch_seed: u64,
    /// Attach unit normals from the final solved surfels to the output.
    #[arg(long)]
    pub normals: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct FieldArgs {
    pub input: PathBuf,
    /// Grid CSV; a JSON sidecar is written to <output>.json.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Grid points per axis.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Grid half extent [default: the box half extent].
    #[arg(long)]
    pub extent: Option<f64>,
    #[command(flatten)]
    pub winding: WindingArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormalSource {
    /// Normalized solved surfels of the evaluated cloud.
    Surfels,
    /// Normals stored in the input file.
    File,
    /// Skip normal consistency.
    None,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct MetricsArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub reference: PathBuf,
    /// F-score distance threshold.
    #[arg(long, default_value_t = 7.5e-3)]
    pub tau: f64,
    /// Where the evaluated cloud's normals come from. Reference normals are
    /// always read from the reference file.
    #[arg(long, value_enum, default_value_t = NormalSource::Surfels)]
    pub normals: NormalSource,
    /// Also report the winding clearness error of the input.
    #[arg(long)]
    pub wce: bool,
    #[command(flatten)]
    pub winding: WindingArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct NoiseArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Standard deviation of the per-coordinate noise.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Shape {
    Circle,
    Rectangle,
    Sphere,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct MakeArgs {
    #[arg(value_enum)]
    pub shape: Shape,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Number of points.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Circle or sphere radius.
    #[arg(long, default_value_t = 0.5)]
    pub radius: f64,
    /// Rectangle side along x.
    #[arg(long, default_value_t = 1.0)]
    pub major: f64,
    /// Rectangle side along y.
    #[arg(long, default_value_t = 0.02)]
    pub minor: f64,
    /// Omit the analytic normals.
    #[arg(long)]
    pub no_normals: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    /// Cloud sizes to time.
    #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
    pub sizes: Vec<usize>,
    /// Dimension of the benchmark sphere (or circle).
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    /// Timed denoising iterations per size.
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    /// Noise added to the benchmark shape.
    #[arg(long, default_value_t = 0.005)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
