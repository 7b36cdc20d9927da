use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kvstream::config::{parse_needles, ConfigFile};
use kvstream::harness::{gen_stream, StreamSpec};
use kvstream::sim::{self, AblationGrid};
use kvstream::trace::{read_trace, TraceWriter};
use kvstream::{BudgetConfig, BudgetParams, Engine, EngineOptions, Error, FrameGeometry, ModelDims, Policy};

/// Bounded-memory KV cache compression over synthetic or recorded streams.
#[derive(Debug, Parser)]
#[command(name = "kvstream", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run policies over a generated stream and write a report.
    Simulate(SimulateArgs),
    /// Run policies over a KVTR trace and write a report.
    Replay(ReplayArgs),
    /// Sweep alpha / recent / ratio and write one CSV row per cell and seed.
    Ablate(AblateArgs),
    /// Derive CV thresholds from a warmup prefix.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct StreamArgs {
    /// Number of frames to generate.
    #[arg(long)]
    frames: Option<usize>,
    /// Patch grid as ROWSxCOLS.
    #[arg(long, value_name = "RxC")]
    patch_grid: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    static_fraction: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// A needle count, or a list of frame:row:col:boost.
    #[arg(long)]
    needles: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    /// Memory budget M in tokens per layer.
    #[arg(long)]
    budget: Option<usize>,
    /// Target size C in tokens per layer.
    #[arg(long)]
    target: Option<usize>,
    /// Recent frames r.
    #[arg(long)]
    recent: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    tau3: Option<f64>,
    /// Key-value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// Compress layers one at a time.
    #[arg(long)]
    sequential: bool,
    /// Skip the per-frame prefill attention.
    #[arg(long)]
    no_prefill: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Comma-separated policies, or "all".
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    /// Also record the generated stream as a KVTR trace.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Stream flags are optional; given ones must agree with the trace header
    /// and supply ground truth for static-patch and needle metrics.
    #[command(flatten)]
    stream: StreamArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Axis values, e.g. alpha=0,0.5,1 recent=0.125,0.25 ratio=0.75,0.5.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
    /// Seeds per cell, counting up from --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Warm up on the frames of a KVTR trace.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    trace: Option<PathBuf>,
    /// Warm up on a stream described by a key-value config file.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Warmup frames; defaults to one budget window.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 3,
            e if e.is_trace_error() => 4,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn parse_grid(raw: &str) -> CliResult<FrameGeometry> {
    let (r, c) = raw
        .split_once(['x', 'X'])
        .ok_or_else(|| Failure::usage(format!("--patch-grid {raw:?} is not ROWSxCOLS")))?;
    let (r, c) = (r.trim().parse(), c.trim().parse());
    match (r, c) {
        (Ok(r), Ok(c)) => FrameGeometry::new(r, c).map_err(|e| Failure::usage(e.to_string())),
        _ => Err(Failure::usage(format!("--patch-grid {raw:?} is not ROWSxCOLS"))),
    }
}

fn parse_policies(raw: Option<&str>) -> CliResult<Vec<Policy>> {
    match raw {
        None => Ok(vec![Policy::InfinipotV]),
        Some("all") => Ok(Policy::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse().map_err(|e: Error| Failure::usage(e.to_string())))
            .collect(),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        Some(p) => Ok(ConfigFile::load(p)?),
        None => Ok(ConfigFile::default()),
    }
}

const DEFAULT_NEEDLES: usize = 4;
const DEFAULT_BOOST: f64 = 5.0;

fn default_spec() -> StreamSpec {
    StreamSpec::new(
        200,
        FrameGeometry::new(8, 8).expect("static grid"),
        ModelDims::new(2, 2, 16).expect("static dims"),
        0,
    )
}

impl StreamArgs {
    fn any_set(&self) -> bool {
        self.static_fraction.is_some()
            || self.noise_sigma.is_some()
            || self.needles.is_some()
            || self.seed.is_some()
    }

    /// Defaults, then the config file, then explicit flags. `shape` pins the
    /// frame count, geometry and dims (taken from a trace header).
    fn spec(&self, file: &ConfigFile, shape: Option<(usize, FrameGeometry, ModelDims)>) -> CliResult<StreamSpec> {
        let mut spec = default_spec();
        file.apply_stream(&mut spec)?;
        if let Some(n) = self.frames {
            spec.num_frames = n;
        }
        if let Some(g) = &self.patch_grid {
            spec.geometry = parse_grid(g)?;
        }
        spec.dims = ModelDims::new(
            self.layers.unwrap_or(spec.dims.num_layers()),
            self.heads.unwrap_or(spec.dims.num_heads()),
            self.head_dim.unwrap_or(spec.dims.head_dim()),
        )
        .map_err(|e| Failure::usage(e.to_string()))?;
        if let Some((frames, geometry, dims)) = shape {
            spec.num_frames = frames;
            spec.geometry = geometry;
            spec.dims = dims;
        }
        if let Some(s) = self.static_fraction {
            spec.static_fraction = s;
        }
        if let Some(s) = self.noise_sigma {
            spec.noise_sigma = s;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        match self.needles.as_deref().map(str::trim) {
            None => {
                if file.needles.is_none() {
                    spec.needles = spec.scatter_needles(DEFAULT_NEEDLES, DEFAULT_BOOST);
                }
            }
            Some(raw) => {
                spec.needles = match raw.parse::<usize>() {
                    Ok(count) => spec.scatter_needles(count, DEFAULT_BOOST),
                    Err(_) => parse_needles(raw).map_err(|e| Failure::usage(e.to_string()))?,
                }
            }
        }
        Ok(spec)
    }
}

impl BudgetArgs {
    /// Defaults (M = 16 frames), then the config file, then explicit flags.
    fn params(&self, file: &ConfigFile, geometry: &FrameGeometry) -> CliResult<BudgetParams> {
        let mut params = BudgetParams::new(16 * geometry.tokens_per_frame());
        file.apply_budget(&mut params)?;
        if let Some(m) = self.budget {
            params.memory_budget = m;
        }
        if self.target.is_some() {
            params.target_size = self.target;
        }
        if self.recent.is_some() {
            params.recent_frames = self.recent;
        }
        if let Some(a) = self.alpha {
            params.alpha = a;
        }
        let overrides = ConfigFile {
            tau: [self.tau1, self.tau2, self.tau3],
            ..ConfigFile::default()
        };
        if let Some(p) = overrides.pooling(&params.pooling)? {
            params.pooling = p;
        }
        Ok(params)
    }
}

impl EngineArgs {
    fn options(&self) -> EngineOptions {
        EngineOptions {
            parallel: !self.sequential && EngineOptions::default().parallel,
            prefill: !self.no_prefill,
            keep_snapshot: false,
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::from(Error::Io(e))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn render(report: &sim::RunReport, format: Format) -> CliResult<String> {
    Ok(match format {
        Format::Json => report.to_json() + "\n",
        Format::Csv => report.to_csv()?,
    })
}

/// Validate every requested policy's budget before any work starts.
fn check_budgets(params: &BudgetParams, policies: &[Policy], geometry: &FrameGeometry) -> CliResult<()> {
    for &p in policies {
        BudgetConfig::new(&params.clone().policy(p), geometry)?;
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let file = load_config(args.budget.config.as_deref())?;
    let spec = args.stream.spec(&file, None)?;
    let params = args.budget.params(&file, &spec.geometry)?;
    let policies = match (&args.policy, file.policy) {
        (None, Some(p)) => vec![p],
        (raw, _) => parse_policies(raw.as_deref())?,
    };
    spec.validate()?;
    check_budgets(&params, &policies, &spec.geometry)?;
    if let Some(path) = &args.trace_out {
        let mut w = TraceWriter::create(path, spec.dims, spec.geometry)?;
        for frame in gen_stream(&spec)? {
            w.write_frame(&frame)?;
        }
        w.finish()?;
    }
    let report = sim::simulate(&spec, &params, &policies, args.engine.options())?;
    emit(args.out.as_deref(), &render(&report, args.format)?)
}

fn replay(args: &ReplayArgs) -> CliResult<()> {
    let header = *read_trace(&args.trace)?.header();
    let geometry = header.geometry()?;
    let dims = header.dims()?;
    let s = &args.stream;
    if let Some(g) = &s.patch_grid {
        if parse_grid(g)? != geometry {
            return Err(Failure::usage(format!(
                "--patch-grid {g} disagrees with the trace's {}x{} grid",
                header.grid_rows, header.grid_cols
            )));
        }
    }
    for (flag, given, actual) in [
        ("--layers", s.layers, dims.num_layers()),
        ("--heads", s.heads, dims.num_heads()),
        ("--head-dim", s.head_dim, dims.head_dim()),
    ] {
        if given.is_some_and(|v| v != actual) {
            return Err(Failure::usage(format!(
                "{flag} {} disagrees with the trace header value {actual}",
                given.unwrap()
            )));
        }
    }
    if let Some(n) = s.frames {
        if n as u64 != header.num_frames {
            return Err(Failure::usage(format!(
                "--frames {n} disagrees with the trace's {} frames",
                header.num_frames
            )));
        }
    }
    let file = load_config(args.budget.config.as_deref())?;
    let params = args.budget.params(&file, &geometry)?;
    let policies = match (&args.policy, file.policy) {
        (None, Some(p)) => vec![p],
        (raw, _) => parse_policies(raw.as_deref())?,
    };
    check_budgets(&params, &policies, &geometry)?;
    let labels = if s.any_set() {
        let spec = s.spec(&file, Some((header.num_frames as usize, geometry, dims)))?;
        spec.validate()?;
        Some(spec)
    } else {
        None
    };
    let report = sim::replay(&args.trace, &params, &policies, args.engine.options(), labels.as_ref())?;
    emit(args.out.as_deref(), &render(&report, args.format)?)
}

fn ablate(args: &AblateArgs) -> CliResult<()> {
    let file = load_config(args.budget.config.as_deref())?;
    let spec = args.stream.spec(&file, None)?;
    let params = args.budget.params(&file, &spec.geometry)?;
    let grid = AblationGrid::parse(&args.grid).map_err(|e| Failure::usage(e.to_string()))?;
    spec.validate()?;
    let rows = sim::ablate(&spec, &params, &grid, args.seeds, args.engine.options())?;
    emit(args.out.as_deref(), &sim::to_csv(&rows)?)
}

fn calibrate(args: &CalibrateArgs) -> CliResult<()> {
    let file = load_config(args.budget.config.as_deref())?;
    let (frames, geometry, dims) = match (&args.trace, &args.spec) {
        (Some(path), _) => {
            let reader = read_trace(path)?;
            let h = *reader.header();
            let geometry = h.geometry()?;
            let params = args.budget.params(&file, &geometry)?;
            let want = warmup_len(args.warmup, &params, &geometry)?;
            let frames = reader.take(want).collect::<Result<Vec<_>, Error>>()?;
            (frames, geometry, h.dims()?)
        }
        (None, Some(path)) => {
            let mut spec = default_spec();
            ConfigFile::load(path)?.apply_stream(&mut spec)?;
            spec.validate()?;
            let params = args.budget.params(&file, &spec.geometry)?;
            let want = warmup_len(args.warmup, &params, &spec.geometry)?;
            let frames = gen_stream(&spec)?.take(want).collect();
            (frames, spec.geometry, spec.dims)
        }
        (None, None) => return Err(Failure::usage("one of --trace or --spec is required")),
    };
    let params = args.budget.params(&file, &geometry)?;
    let config = BudgetConfig::new(&params, &geometry)?;
    let engine = Engine::new(config, geometry, dims)?;
    let pooling = engine.calibrate_thresholds(&frames).map_err(|e| match e {
        Error::State(m) => Failure::usage(m),
        e => e.into(),
    })?;
    emit(args.out.as_deref(), &ConfigFile::from_pooling(&pooling).to_text())
}

fn warmup_len(requested: Option<usize>, params: &BudgetParams, geometry: &FrameGeometry) -> CliResult<usize> {
    let config = BudgetConfig::new(params, geometry)?;
    Ok(requested.unwrap_or(config.frames_per_budget()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Replay(a) => replay(a),
        Command::Ablate(a) => ablate(a),
        Command::Calibrate(a) => calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("kvstream: {f}");
            ExitCode::from(f.code)
        }
    }
}
