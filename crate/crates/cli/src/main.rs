use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gmalign::harness::{
    crop_contiguous, run_benchmark_with, synthetic_cloud, BenchmarkRun, BenchmarkSpec, MixtureConstructor,
    MixtureSettings, SCHEMA_VERSION,
};
use gmalign::mixture::{normalize_point_cloud, FrameNormalization, GaussianMixture, PointCloud};
use gmalign::se3::{AngleAxis, RigidTransform};
use gmalign::search::{SearchConfig, SearchStatus};
use gmalign::{load_point_cloud, run_registration, sample_rotations, CloudFormat, RunRecord};
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

const EXIT_ERROR: u8 = 1;
const EXIT_TIME_BUDGET: u8 = 2;
const EXIT_QUEUE_LIMIT: u8 = 3;

#[derive(Parser)]
#[command(name = "gmalign", version, about = "Globally optimal rigid alignment of point clouds via Gaussian mixtures")]
struct Cli {
    /// Worker threads for bound evaluation (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align a source cloud with a target cloud.
    Register(RegisterArgs),
    /// Align a cloud with seeded random rotations of itself and report success rates.
    Benchmark(BenchmarkArgs),
    /// Fit a mixture to a cloud and write it as JSON.
    BuildGmm(BuildGmmArgs),
    /// Print the bound trace stored in a result file.
    Trace(TraceArgs),
    /// Apply a seeded rigid transform to a cloud and save it.
    Synthesize(SynthesizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstructorArg {
    Kde,
    Em,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Xyz,
    Ply,
}

impl From<FormatArg> for CloudFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Xyz => CloudFormat::Xyz,
            FormatArg::Ply => CloudFormat::Ply,
        }
    }
}

#[derive(Args, Default)]
struct MixtureArgs {
    /// Number of mixture components per cloud.
    #[arg(long)]
    components: Option<usize>,
    /// KDE bandwidth in normalised units.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, value_enum)]
    constructor: Option<ConstructorArg>,
    /// Seed for component selection and EM initialisation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct SearchArgs {
    /// Absolute optimality gap.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Optimality gap relative to |f*|; takes precedence over --epsilon.
    #[arg(long)]
    epsilon_relative: Option<f64>,
    /// Translation half-width of the search domain, in normalised units.
    #[arg(long)]
    tau: Option<f64>,
    /// Subdivisions per axis when branching.
    #[arg(long)]
    split: Option<usize>,
    /// Stop after this many seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Stop once this many cubes are queued.
    #[arg(long)]
    max_queue: Option<usize>,
    #[arg(long, overrides_with = "no_batch_init")]
    batch_init: bool,
    /// Subdivisions per axis of the grid of batch-initialisation starts.
    #[arg(long)]
    batch_init_split: Option<usize>,
    #[arg(long, overrides_with = "batch_init")]
    no_batch_init: bool,
}

#[derive(Args)]
struct SettingsArgs {
    /// JSON file with `mixture` and `search` sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    mixture: MixtureArgs,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long, required_unless_present = "self_align", conflicts_with = "self_align")]
    target: Option<PathBuf>,
    /// Use a rotated copy of the source as the target.
    #[arg(long)]
    self_align: bool,
    /// Seed of the uniform random rotation applied with --self-align.
    #[arg(long, requires = "self_align")]
    perturb_seed: Option<u64>,
    /// Fixed rotation angle in degrees for --self-align; the axis comes from --perturb-seed.
    #[arg(long, requires = "self_align")]
    perturb_angle: Option<f64>,
    /// JSON transform mapping the source onto the target, used to report errors.
    #[arg(long, conflicts_with = "self_align")]
    ground_truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Result JSON (stdout when omitted).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write the bound trace as text here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Cloud to benchmark on; a synthetic cloud is used when omitted.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Size of the synthetic cloud.
    #[arg(long, default_value_t = 200, conflicts_with = "source")]
    points: usize,
    #[arg(long, default_value_t = 10)]
    rotations: usize,
    #[arg(long, default_value_t = 0)]
    rotation_seed: u64,
    /// Fraction of each target removed to simulate partial overlap.
    #[arg(long)]
    crop: Option<f64>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Summary JSON (the table is always printed).
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct BuildGmmArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// JSON file with a `mixture` section; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    mixture: MixtureArgs,
}

#[derive(Args)]
struct TraceArgs {
    /// Result JSON written by `register`.
    result: PathBuf,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Cloud to transform; a synthetic cloud is generated when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 200, conflicts_with = "input")]
    points: usize,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rotation angle in degrees; uniform random when omitted.
    #[arg(long)]
    angle: Option<f64>,
    /// Each translation component is drawn from [-t, t], in input units.
    #[arg(long, default_value_t = 0.0)]
    max_translation: f64,
    /// Fraction of the cloud removed before transforming.
    #[arg(long)]
    crop: Option<f64>,
    /// Output cloud (.xyz or .ply).
    #[arg(long, short)]
    output: PathBuf,
    /// Where to write the applied transform as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    mixture: Option<MixtureSettings>,
    search: Option<SearchFile>,
}

/// Search settings as written by hand: the time budget is plain seconds.
#[derive(Default, Deserialize)]
#[serde(default)]
struct SearchFile {
    #[serde(flatten)]
    config: SearchConfig,
    time_budget_seconds: Option<f64>,
}

#[derive(Serialize)]
struct MixtureFile<'a> {
    schema_version: u32,
    input_path: String,
    normalization: FrameNormalization,
    settings: &'a MixtureSettings,
    bandwidth: Option<f64>,
    mixture: &'a GaussianMixture,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    match cli.command {
        Command::Register(args) => register(args),
        Command::Benchmark(args) => benchmark(args),
        Command::BuildGmm(args) => build_gmm(args),
        Command::Trace(args) => trace(args),
        Command::Synthesize(args) => synthesize(args),
    }
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn mixture_settings(base: Option<MixtureSettings>, args: &MixtureArgs) -> MixtureSettings {
    let mut m = base.unwrap_or_default();
    if let Some(c) = args.components {
        m.components = c;
    }
    if let Some(bw) = args.bandwidth {
        m.bandwidth = Some(bw);
    }
    if let Some(c) = args.constructor {
        m.constructor = match c {
            ConstructorArg::Kde => MixtureConstructor::Kde,
            ConstructorArg::Em => MixtureConstructor::Em,
        };
    }
    if let Some(s) = args.seed {
        m.seed = s;
    }
    m
}

fn search_config(base: Option<SearchFile>, args: &SearchArgs) -> Result<SearchConfig> {
    let file = base.unwrap_or_default();
    let mut s = file.config;
    let seconds = args.time_budget.or(file.time_budget_seconds);
    if let Some(secs) = seconds {
        if !(secs.is_finite() && secs > 0.0) {
            bail!("time budget must be a positive number of seconds, got {secs}");
        }
        s.time_budget = Some(Duration::from_secs_f64(secs));
    }
    if let Some(e) = args.epsilon {
        s.epsilon = e;
        s.epsilon_relative = None;
    }
    if let Some(e) = args.epsilon_relative {
        s.epsilon_relative = Some(e);
    }
    if let Some(t) = args.tau {
        s.tau = t;
    }
    if let Some(k) = args.split {
        s.split = k;
    }
    if let Some(q) = args.max_queue {
        s.max_queue = Some(q);
    }
    if let Some(k) = args.batch_init_split {
        s.batch_init_split = k;
    }
    if args.batch_init {
        s.batch_init = true;
    }
    if args.no_batch_init {
        s.batch_init = false;
    }
    s.validate()?;
    Ok(s)
}

fn settings(args: &SettingsArgs) -> Result<(MixtureSettings, SearchConfig)> {
    let file = read_config(args.config.as_deref())?;
    let mixture = mixture_settings(file.mixture, &args.mixture);
    mixture.validate()?;
    let search = search_config(file.search, &args.search)?;
    Ok((mixture, search))
}

fn load(path: &Path, format: Option<FormatArg>) -> Result<PointCloud> {
    Ok(load_point_cloud(path, format.map(Into::into))?)
}

fn load_transform(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing transform {}", path.display()))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn exit_code(status: SearchStatus) -> u8 {
    match status {
        SearchStatus::Optimal => 0,
        SearchStatus::TimeBudget => EXIT_TIME_BUDGET,
        SearchStatus::QueueLimit => EXIT_QUEUE_LIMIT,
    }
}

fn perturbation(seed: Option<u64>, angle_deg: Option<f64>) -> Result<AngleAxis> {
    let seed = seed.unwrap_or(0);
    Ok(match angle_deg {
        Some(a) => {
            if !a.is_finite() {
                bail!("rotation angle must be finite");
            }
            random_axis_rotation(seed, a.to_radians())
        }
        None if seed == 0 => AngleAxis::identity(),
        None => sample_rotations(1, seed)[0],
    })
}

fn random_axis_rotation(seed: u64, angle: f64) -> AngleAxis {
    let axis = sample_rotations(1, seed)[0].0;
    let axis = if axis.norm() > 0.0 { axis.normalize() } else { Vector3::z() };
    AngleAxis::from_axis_angle(&axis, angle)
}

fn register(args: RegisterArgs) -> Result<u8> {
    let (mixture, search) = settings(&args.settings)?;
    let source = load(&args.source, args.format)?;
    let (target, truth) = if args.self_align {
        let r = perturbation(args.perturb_seed, args.perturb_angle)?;
        let truth = RigidTransform::new(r, Vector3::zeros());
        (source.transformed(&truth).with_frame(format!("{} (rotated)", args.source.display())), Some(truth))
    } else {
        let target_path = args.target.as_deref().context("--target is required")?;
        let target = load(target_path, args.format)?;
        let truth = args.ground_truth.as_deref().map(load_transform).transpose()?;
        (target, truth)
    };

    let mut record = run_registration(&source, &target, &mixture, &search, truth.as_ref())?;
    if let Some(p) = &args.trace {
        fs::write(p, record.trace_text()).with_context(|| format!("writing {}", p.display()))?;
        record.trace_path = Some(p.display().to_string());
    }
    write_text(args.output.as_deref(), &to_json(&record)?)?;
    eprintln!(
        "{:?}: f* = {:.6e}, lower = {:.6e}, {} nodes, {:.2} s",
        record.status, record.best_value, record.final_lower, record.nodes_expanded, record.runtime_seconds
    );
    if let Some(e) = &record.errors {
        eprintln!("rotation error {:.4} deg, translation error {:.6}", e.rotation_error, e.translation_error);
    }
    Ok(exit_code(record.status))
}

fn benchmark(args: BenchmarkArgs) -> Result<u8> {
    let (mixture, search) = settings(&args.settings)?;
    let source = match &args.source {
        Some(p) => load(p, args.format)?,
        None => synthetic_cloud(args.points, args.rotation_seed)?,
    };
    let spec = BenchmarkSpec {
        rotations: args.rotations,
        rotation_seed: args.rotation_seed,
        crop_fraction: args.crop,
        mixture,
        search,
    };
    let summary = run_benchmark_with(&source, &spec, |i, run| match run {
        BenchmarkRun::Completed { record, .. } => {
            let rot = record.errors.as_ref().map_or(f64::NAN, |e| e.rotation_error);
            eprintln!("run {i}: {:?}, rotation error {rot:.4} deg, {:.2} s", record.status, record.runtime_seconds);
        }
        BenchmarkRun::Failed { message, .. } => eprintln!("run {i}: failed: {message}"),
    })?;
    if let Some(p) = &args.output {
        fs::write(p, to_json(&summary)?).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", summary.table());
    Ok(0)
}

fn build_gmm(args: BuildGmmArgs) -> Result<u8> {
    let file = read_config(args.config.as_deref())?;
    let settings = mixture_settings(file.mixture, &args.mixture);
    settings.validate()?;
    let cloud = load(&args.input, args.format)?;
    let (normalized, normalization) = normalize_point_cloud(&cloud)?;
    let bandwidth = settings.resolve_bandwidth(&normalized);
    let mixture = settings.build(&normalized, bandwidth)?;
    let out = MixtureFile {
        schema_version: SCHEMA_VERSION,
        input_path: args.input.display().to_string(),
        normalization,
        settings: &settings,
        bandwidth: (settings.constructor == MixtureConstructor::Kde).then_some(bandwidth),
        mixture: &mixture,
    };
    write_text(args.output.as_deref(), &to_json(&out)?)?;
    Ok(0)
}

fn trace(args: TraceArgs) -> Result<u8> {
    let text = fs::read_to_string(&args.result).with_context(|| format!("reading {}", args.result.display()))?;
    let record: RunRecord =
        serde_json::from_str(&text).with_context(|| format!("parsing result {}", args.result.display()))?;
    write_text(args.output.as_deref(), &record.trace_text())?;
    Ok(0)
}

fn synthesize(args: SynthesizeArgs) -> Result<u8> {
    let cloud = match &args.input {
        Some(p) => load(p, args.format)?,
        None => synthetic_cloud(args.points, args.seed)?,
    };
    if !(args.max_translation.is_finite() && args.max_translation >= 0.0) {
        bail!("max translation must be non-negative");
    }
    let base = match args.crop {
        Some(f) => crop_contiguous(&cloud, f, args.seed)?,
        None => cloud,
    };
    let rotation = match args.angle {
        Some(a) if a.is_finite() => random_axis_rotation(args.seed, a.to_radians()),
        Some(_) => bail!("rotation angle must be finite"),
        None => sample_rotations(1, args.seed)[0],
    };
    let mut rng = StdRng::seed_from_u64(args.seed ^ 0x5eed_7a45);
    let t = args.max_translation;
    let translation = if t > 0.0 {
        Vector3::new(rng.random_range(-t..=t), rng.random_range(-t..=t), rng.random_range(-t..=t))
    } else {
        Vector3::zeros()
    };
    let truth = RigidTransform::new(rotation, translation);
    let out = base.transformed(&truth);
    gmalign::io::save_point_cloud(&args.output, &out)?;
    let json = to_json(&truth)?;
    match &args.truth {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(0)
}
