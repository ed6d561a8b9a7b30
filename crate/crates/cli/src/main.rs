//! `sycam`: generate datasets, synthesize CAM expressions, evaluate,
//! render and compare them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use sycam::backend::{Backend, BackendConfig};
use sycam::config::{default_workers, open_backend, ConfigError, RunConfig};
use sycam::dataset::{load_dataset, Dataset};
use sycam::enumerate::GrammarConfig;
use sycam::metrics::{evaluate_metric, MetricError, MetricKind};
use sycam::oracle::{run_classwise, run_synthesis, OracleError};
use sycam::render::render_png;
use sycam::report::{baseline, baselines, per_image_csv, CompareReport, Summary};
use sycam::synthetic::{make_planted_dataset, make_synthetic_dataset, PlantSpec, SyntheticParams};
use sycam::trace::write_trace;
use sycam::{parse_expr, print_expr, Expr, TerminalKind};

#[derive(Parser)]
#[command(name = "sycam", version, about = "Synthesize class activation map expressions")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured grammar (G1 or G2).
    #[arg(long, global = true)]
    grammar: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset labelled by a stub model.
    MakeSynthetic(MakeSynthetic),
    /// Search for the best expression under the configured metric.
    Synth(Synth),
    /// Evaluate one expression and write per-image values as CSV.
    Eval(Eval),
    /// Overlay an expression's heatmap on one image.
    Render(Render),
    /// Tabulate baseline methods and user expressions under several metrics.
    Compare(Compare),
}

#[derive(Args)]
struct MakeSynthetic {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    /// Feature channels.
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    grid_w: usize,
    #[arg(long, default_value_t = 3)]
    grid_h: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 12)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    width: usize,
    /// Plant the optimum of m_GT at a terminal. One name for every class, or
    /// a comma-separated list indexed by predicted class.
    #[arg(long)]
    plant: Option<String>,
    #[arg(long, default_value_t = 0.25)]
    mask_fraction: f64,
}

#[derive(Args)]
struct Synth {
    /// Directory for trace.jsonl and summary.json. Defaults to the config's
    /// `output_dir`, then to the config file's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One expression per predicted class, joined in a guard.
    #[arg(long)]
    classwise: bool,
}

/// Dataset, metric and backend for the evaluation commands. Each falls back
/// to the `--config` file when omitted.
#[derive(Args)]
struct Target {
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Backend configuration (JSON). Defaults to the dataset's stub model.
    #[arg(long)]
    backend: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    /// Expression text or a baseline name (GradCAM, GradCAM++, ScoreCAM,
    /// AblationCAM).
    expr: String,
    #[arg(long)]
    metric: Option<String>,
    #[command(flatten)]
    target: Target,
    /// Per-image CSV output.
    #[arg(long, default_value = "per_image.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct Render {
    expr: String,
    #[arg(long)]
    image_id: String,
    #[command(flatten)]
    target: Target,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Compare {
    /// Extra expressions, appended after the four baselines.
    exprs: Vec<String>,
    /// Comma-separated metrics; defaults to all five.
    #[arg(long)]
    metrics: Option<String>,
    /// Step count for deletion and insertion when `--metrics` is omitted.
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    target: Target,
    /// Table of means (CSV).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Long-form per-image values behind every cell (CSV).
    #[arg(long)]
    per_image: Option<PathBuf>,
}

/// Failure split by exit code.
enum Failure {
    /// Bad input, exit code 2.
    Config(String),
    /// Anything that went wrong while running, exit code 1.
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Capability(_) | MetricError::NoBackend(_) | MetricError::BadSteps { .. } => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Metric(m) => m.into(),
            OracleError::Config { .. } => Failure::Config(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakeSynthetic(a) => make_synthetic(&cli, a),
        Command::Synth(a) => synth(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Render(a) => render(&cli, a),
        Command::Compare(a) => compare(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn make_synthetic(cli: &Cli, a: &MakeSynthetic) -> Result<(), Failure> {
    let p = SyntheticParams {
        n_classes: a.classes,
        images_per_class: a.per_class,
        k: a.k,
        w: a.grid_w,
        h: a.grid_h,
        ch: a.channels,
        height: a.height,
        width: a.width,
        seed: cli.seed.unwrap_or(0),
    };
    let manifest = match &a.plant {
        None => make_synthetic_dataset(&p, &a.out),
        Some(list) => {
            let kinds = list
                .split(',')
                .map(|t| TerminalKind::from_token(t.trim()).ok_or_else(|| Failure::Config(format!("--plant: unknown terminal `{t}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            let per_class = match kinds.as_slice() {
                [one] => vec![*one; a.classes],
                many => many.to_vec(),
            };
            let spec = PlantSpec {
                per_class,
                mask_fraction: a.mask_fraction,
            };
            make_planted_dataset(&p, &spec, &a.out)
        }
    };
    let manifest = manifest.map_err(|e| match e {
        sycam::synthetic::SynthError::InvalidParams(m) => Failure::Config(m),
        other => runtime(other),
    })?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Failure::Config("--workers must be >= 1".into()));
        }
        cfg.synthesis.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.synthesis.seed = s;
    }
    if let Some(g) = &cli.grammar {
        cfg.synthesis.grammar =
            GrammarConfig::named(g).ok_or_else(|| Failure::Config(format!("--grammar: unknown grammar `{g}`")))?;
    }
    Ok(cfg)
}

fn synth(cli: &Cli, a: &Synth) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let (ds, backend) = cfg.open()?;
    let backend = backend.as_deref();
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| cli.config.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let metric = cfg.synthesis.metric;
    let summary = if a.classwise || cfg.classwise {
        let g = run_classwise(&cfg.synthesis, &ds, backend)?;
        for b in &g.branches {
            if let Some(o) = &b.outcome {
                write_trace(&out.join(format!("trace_class{}.jsonl", b.class)), &o.trace).map_err(runtime)?;
            }
            eprintln!(
                "class {}: {}{}",
                b.class,
                print_expr(&b.expr),
                if b.defaulted { " (default)" } else { "" }
            );
        }
        Summary::from_guarded(metric, &g)
    } else {
        let o = run_synthesis(&cfg.synthesis, &ds, backend)?;
        write_file(&out.join("trace.jsonl"), sycam::trace::trace_to_jsonl(&o.trace).as_bytes())?;
        eprintln!(
            "{} candidates evaluated, {} pruned, stopped: {:?}",
            o.stats.evaluated, o.stats.pruned, o.termination
        );
        Summary::from_outcome(metric, &o)
    };
    write_file(&out.join("summary.json"), summary.to_json().as_bytes())?;
    if let Some(m) = summary.mean {
        println!("mean {metric}: {m}");
    }
    println!("best: {}", summary.best_expr.as_deref().unwrap_or("none"));
    Ok(())
}

/// Dataset and backend from explicit flags, falling back to `--config`.
fn open_target(cli: &Cli, t: &Target) -> Result<(Dataset, Option<Arc<dyn Backend>>, Option<RunConfig>), Failure> {
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let manifest = t
        .dataset
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.dataset.clone()))
        .ok_or_else(|| Failure::Config("--dataset is required (or --config)".into()))?;
    let ds = load_dataset(&manifest).map_err(|e| Failure::Config(format!("dataset: {e}")))?;
    let backend_cfg = match &t.backend {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("backend: {}: {e}", p.display())))?;
            let mut b: BackendConfig =
                serde_json::from_str(&text).map_err(|e| Failure::Config(format!("backend: {}: {e}", p.display())))?;
            let base = p.parent().unwrap_or(Path::new("."));
            match &mut b.kind {
                sycam::backend::BackendKind::Onnx { path } => *path = base.join(&*path),
                sycam::backend::BackendKind::Stub { spec_path } => *spec_path = base.join(&*spec_path),
                sycam::backend::BackendKind::Remote { .. } => {}
            }
            Some(b)
        }
        None => cfg.as_ref().and_then(|c| c.backend.clone()),
    };
    let backend = open_backend(backend_cfg.as_ref(), &ds)?;
    Ok((ds, backend, cfg))
}

fn resolve_expr(text: &str) -> Result<Expr, Failure> {
    if let Some(e) = baseline(text) {
        return Ok(e);
    }
    parse_expr(text).map_err(|e| Failure::Config(format!("expression `{text}`: {e}")))
}

fn workers(cli: &Cli, cfg: Option<&RunConfig>) -> usize {
    cli.workers
        .or(cfg.map(|c| c.synthesis.workers))
        .unwrap_or_else(default_workers)
        .max(1)
}

fn eval(cli: &Cli, a: &Eval) -> Result<(), Failure> {
    let (ds, backend, cfg) = open_target(cli, &a.target)?;
    let metric: MetricKind = match (&a.metric, &cfg) {
        (Some(m), _) => m.parse().map_err(|m: String| Failure::Config(format!("--metric: {m}")))?,
        (None, Some(c)) => c.synthesis.metric,
        (None, None) => return Err(Failure::Config("--metric is required (or --config)".into())),
    };
    let e = resolve_expr(&a.expr)?;
    let score = evaluate_metric(metric, &e, &ds, backend.as_deref(), workers(cli, cfg.as_ref()))?;
    let csv = per_image_csv(&ds, &a.expr, &score).map_err(runtime)?;
    write_file(&a.out, csv.as_bytes())?;
    for (id, why) in &score.failures {
        eprintln!("image {id} failed: {why}");
    }
    println!("mean {metric}: {}", score.value);
    Ok(())
}

fn render(cli: &Cli, a: &Render) -> Result<(), Failure> {
    let (ds, _, _) = open_target(cli, &a.target)?;
    let e = resolve_expr(&a.expr)?;
    let rec = ds
        .find(&a.image_id)
        .ok_or_else(|| Failure::Config(format!("unknown image_id `{}`", a.image_id)))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    render_png(&e, rec, &a.out).map_err(|e| match e {
        sycam::render::RenderError::Capability(c) => Failure::Config(c.to_string()),
        other => runtime(other),
    })?;
    println!("{}", a.out.display());
    Ok(())
}

fn compare(cli: &Cli, a: &Compare) -> Result<(), Failure> {
    let (ds, backend, cfg) = open_target(cli, &a.target)?;
    let metrics: Vec<MetricKind> = match &a.metrics {
        Some(list) => list
            .split(',')
            .map(|m| m.parse().map_err(|m: String| Failure::Config(format!("--metrics: {m}"))))
            .collect::<Result<_, _>>()?,
        None => MetricKind::all(a.steps).to_vec(),
    };
    let mut methods: Vec<(String, Expr)> = baselines().into_iter().map(|(n, e)| (n.to_string(), e)).collect();
    for text in &a.exprs {
        methods.push((text.clone(), resolve_expr(text)?));
    }
    let report = CompareReport::build(&methods, &metrics, &ds, backend.as_deref(), workers(cli, cfg.as_ref()))
        .map_err(|e| match e {
            sycam::report::ReportError::Metric(m) => Failure::from(m),
            other => runtime(other),
        })?;
    if let Some(p) = &a.out {
        write_file(p, report.to_csv().map_err(runtime)?.as_bytes())?;
    }
    if let Some(p) = &a.per_image {
        write_file(p, report.per_image_csv.as_bytes())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

