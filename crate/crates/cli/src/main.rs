//! `beliefscope` command-line driver.
//!
//! Exit codes: 0 on success, 1 when inputs or flags are invalid, 2 when a
//! computation fails.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use beliefscope::Task;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "beliefscope", version, about = "Probe, rank and steer attention heads for belief tracking")]
pub struct Cli {
    /// TOML file with defaults for the flags below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for scans and sweeps.
    #[arg(long, global = true, env = "BELIEFSCOPE_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a probe on every head over several seeded splits.
    Scan(ScanArgs),
    /// Confidence intervals and one-sided tests from a scan.
    Stats(StatsArgs),
    /// Build an intervention spec from the top heads of a scan.
    Directions(DirectionsArgs),
    /// Toy transformer utilities.
    #[command(subcommand)]
    Toylab(ToyCommand),
    /// Grade recorded responses against a benchmark.
    Grade(GradeArgs),
    /// Score a benchmark over a grid of intervention strengths and head counts.
    Sweep(SweepArgs),
    /// Render figures as SVG with CSV companions.
    Report(ReportArgs),
    /// Write probing prompts for a benchmark as JSONL.
    Prompts(PromptsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Binary,
    Multinomial,
    Mlp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Oracle,
    Protagonist,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Random,
    PlusProtagonist,
    MinusOracle,
    PlusTpfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    ForwardBelief,
    ForwardAction,
    BackwardBelief,
    Tomi,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::ForwardBelief => Task::ForwardBelief,
            TaskArg::ForwardAction => Task::ForwardAction,
            TaskArg::BackwardBelief => Task::BackwardBelief,
            TaskArg::Tomi => Task::Tomi,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// ACTV1 activation file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    pub family: FamilyArg,
    #[arg(long, value_enum, default_value = "oracle")]
    pub target: TargetArg,
    /// Number of seeds; seeds are 0..N.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Scan JSON written by `scan`.
    #[arg(long)]
    pub scan: Option<PathBuf>,
    /// Accuracy the one-sided test compares against.
    #[arg(long, default_value_t = 0.75)]
    pub baseline: f64,
    /// Number of top-ranked heads to test.
    #[arg(long, default_value_t = 16)]
    pub top_k: usize,
    /// Bonferroni factor; defaults to the number of tested heads.
    #[arg(long)]
    pub bonferroni_m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DirectionsArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scan used to rank heads; without it a single-seed scan is run.
    #[arg(long)]
    pub scan: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Number of top heads to steer.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seed for the probe split and random directions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Tag the spec as transferred from the dataset's task.
    #[arg(long)]
    pub transferred: bool,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Write freshly initialized weights.
    Init {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Greedy generation, optionally under an intervention.
    Generate(GenerateArgs),
    /// Generate with and without a spec and report both.
    Intervene(GenerateArgs),
    /// Per-token gradient magnitudes for a head direction.
    Attribute(AttributeArgs),
    /// Synthetic activation dataset with planted heads.
    Synth(SynthArgs),
    /// Capture toy-model activations over a benchmark's probing prompts.
    Extract(ExtractArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tokens: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub max_new: usize,
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub tokens: Vec<usize>,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    /// Spec whose entry for this head supplies theta.
    #[arg(long, conflicts_with = "theta")]
    pub spec: Option<PathBuf>,
    /// Comma-separated unit vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, default_value_t = 6)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Planted heads as `layer:head`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub plant: Vec<String>,
    /// Offset of each class mean, in units of the noise scale.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub background: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: TaskArg,
}

#[derive(Debug, Args)]
pub struct GradeArgs {
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Transcript JSONL with scenario_id, task, condition and response.
    #[arg(long, required = true)]
    pub transcripts: PathBuf,
    /// Name used for the output files.
    #[arg(long, default_value = "graded")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunnerArg {
    /// Built-in toy model with a planted belief head.
    Toy,
    /// Recorded responses; steered lines carry `alpha` and `k`.
    Transcripts,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Spec template; optional for the toy runner.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "transcripts")]
    pub runner: RunnerArg,
    #[arg(long)]
    pub transcripts: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Seed of the toy model behind the toy runner.
    #[arg(long, default_value_t = 1234)]
    pub toy_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Grid,
    Curves,
    Scatter,
    Strip,
    Cca,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    /// Scan JSON (grid, scatter x axis).
    #[arg(long)]
    pub scan: Option<PathBuf>,
    /// Second scan JSON (scatter y axis).
    #[arg(long)]
    pub scan_y: Option<PathBuf>,
    /// Sweep JSON (curves).
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Head count whose curve to draw.
    #[arg(long)]
    pub k: Option<usize>,
    /// Attribution JSON (strip).
    #[arg(long)]
    pub attribution: Option<PathBuf>,
    /// Token labels for the strip, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// ACTV1 file (cca).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: TaskArg,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    /// Failures caused by the inputs.
    fn invalid(self) -> CmdResult<T>;
    /// Failures during computation or output.
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Validation(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).invalid()?,
        None => RunConfig::default(),
    };
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        if jobs == 0 {
            return Err(Failure::Validation(anyhow::anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().runtime()?;
    }
    let out = cli.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let ctx = commands::Context { cfg, out };
    match cli.command {
        Command::Scan(a) => commands::scan(&ctx, a),
        Command::Stats(a) => commands::stats(&ctx, a),
        Command::Directions(a) => commands::directions(&ctx, a),
        Command::Toylab(c) => commands::toylab(&ctx, c),
        Command::Grade(a) => commands::grade(&ctx, a),
        Command::Sweep(a) => commands::sweep(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
        Command::Prompts(a) => commands::prompts(&ctx, a),
    }
}
