use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dnsspp::benchmark::run_benchmark;
use dnsspp::predict::{expected_test_loglik, intensity_grid, intensity_on, rmse, IntensityGrid};
use dnsspp::simulation::{synth_dataset, synth_protocol, write_dataset, DatasetKind};
use dnsspp::training::{fit, FittedModel, GradientMode};
use dnsspp::window::{load_events, PointPattern, Window};
use serde::Serialize;
use serde_json::json;

mod settings;

use settings::*;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs detected before any work starts.
    Usage(String),
    Runtime(dnsspp::Error),
}

impl From<dnsspp::Error> for CliError {
    fn from(e: dnsspp::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dnsspp",
    version,
    about = "Spectral permanental process intensity estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file with settings for this command; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic event sets and truth grids.
    Simulate(SimulateArgs),
    /// Fit a model to an event file.
    Fit(FitArgs),
    /// Evaluate posterior intensity moments on a grid.
    Predict(PredictArgs),
    /// Compute the expected test log-likelihood and, given a truth grid, the RMSE.
    Evaluate(EvaluateArgs),
    /// Run the synthetic benchmark over several model configurations.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<DatasetKind>,
    /// Number of datasets.
    #[arg(long)]
    seeds: Option<usize>,
    /// Thin every event set from a single latent function.
    #[arg(long)]
    shared_latent: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Events CSV.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Window bounds for one axis as `lo,hi`; repeat per axis.
    #[arg(long, value_parser = parse_bounds)]
    window: Vec<[f64; 2]>,
    /// Comma-separated layer widths, e.g. `50,30`.
    #[arg(long, value_parser = parse_layers)]
    layers: Option<Widths>,
    /// Tie both frequency sets in every layer (stationary layers).
    #[arg(long)]
    tie: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    quadrature_order: Option<usize>,
    #[arg(long)]
    alpha_init: Option<f64>,
    /// `frozen` or `finite_difference`.
    #[arg(long, value_parser = parse_gradient)]
    gradient: Option<GradientMode>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test events CSV; repeat for several sets.
    #[arg(long)]
    test: Vec<PathBuf>,
    /// Truth grid CSV as written by `simulate`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<DatasetKind>,
    #[arg(long)]
    datasets: Option<usize>,
    /// Model names separated by `;`, e.g. `NSSPP;DNSSPP-[50,30]`.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Train on the first dataset only.
    #[arg(long)]
    dry_run: bool,
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    s.parse().map_err(|e: dnsspp::Error| e.to_string())
}

fn parse_gradient(s: &str) -> Result<GradientMode, String> {
    match s {
        "frozen" => Ok(GradientMode::Frozen),
        "finite_difference" | "fd" => Ok(GradientMode::FiniteDifference),
        _ => Err(format!("unknown gradient mode '{s}'")),
    }
}

#[derive(Clone)]
struct Widths(Vec<usize>);

fn parse_layers(s: &str) -> Result<Widths, String> {
    let widths = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid layer width '{t}'"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if widths.is_empty() || widths.contains(&0) {
        return Err("layer widths must be positive integers".into());
    }
    Ok(Widths(widths))
}

fn parse_bounds(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected `lo,hi`, got '{s}'"));
    }
    let lo: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| format!("invalid bound '{}'", parts[0]))?;
    let hi: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| format!("invalid bound '{}'", parts[1]))?;
    Ok([lo, hi])
}

fn apply_common(c: &Common, seed: &mut u64, out_dir: &mut PathBuf) {
    if let Some(s) = c.seed {
        *seed = s;
    }
    if let Some(o) = &c.out_dir {
        *out_dir = o.clone();
    }
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Runtime(dnsspp::Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    settings: &impl Serialize,
    outputs: &[String],
) -> Result<(), CliError> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "settings": settings,
        "outputs": outputs,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&dir.join("manifest.json"), &text)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut s: SimulateSettings = load_config(args.common.config.as_deref())?;
    apply_common(&args.common, &mut s.seed, &mut s.out_dir);
    if let Some(k) = args.kind {
        s.kind = k;
    }
    if let Some(n) = args.seeds {
        s.seeds = n;
    }
    s.shared_latent |= args.shared_latent;
    s.validate()?;
    create_dir(&s.out_dir)?;

    if s.shared_latent {
        let (truth, sets) = synth_protocol(s.kind, s.seed, s.seeds)?;
        let data = write_dataset(&s.out_dir, s.kind, s.seed, &truth, &sets)?;
        let mut outputs = data.event_files.clone();
        outputs.push(data.truth_file.clone());
        let manifest = json!({
            "command": "simulate",
            "version": env!("CARGO_PKG_VERSION"),
            "settings": s,
            "window": data.window,
            "lambda_max": data.lambda_max,
            "event_counts": data.event_counts,
            "outputs": outputs,
        });
        write_text(
            &s.out_dir.join("manifest.json"),
            &serde_json::to_string_pretty(&manifest).expect("serializes"),
        )?;
        println!(
            "wrote {} event sets from one latent function to {}",
            sets.len(),
            s.out_dir.display()
        );
        return Ok(());
    }

    let mut datasets = Vec::new();
    let mut outputs = Vec::new();
    let mut window = None;
    for seed in s.seed..s.seed + s.seeds as u64 {
        let (events, truth) = synth_dataset(s.kind, seed)?;
        let ev = format!("events_{seed}.csv");
        let tr = format!("truth_{seed}.csv");
        events.save(s.out_dir.join(&ev))?;
        truth.as_grid().save_csv(s.out_dir.join(&tr))?;
        datasets.push(json!({
            "seed": seed,
            "events": ev,
            "truth": tr,
            "count": events.len(),
            "lambda_max": truth.lambda_max,
        }));
        outputs.push(ev);
        outputs.push(tr);
        window = Some(truth.window().clone());
    }
    let manifest = json!({
        "command": "simulate",
        "version": env!("CARGO_PKG_VERSION"),
        "settings": s,
        "window": window,
        "datasets": datasets,
        "outputs": outputs,
    });
    write_text(
        &s.out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("serializes"),
    )?;
    println!("wrote {} datasets to {}", s.seeds, s.out_dir.display());
    Ok(())
}

/// Window from the `window` field of a `manifest.json` beside the events file.
fn window_from_manifest(events: &Path) -> Option<Vec<[f64; 2]>> {
    let dir = events.parent()?;
    let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(v.get("window")?.clone()).ok()
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let mut s: FitSettings = load_config(args.common.config.as_deref())?;
    apply_common(&args.common, &mut s.seed, &mut s.out_dir);
    if args.events.is_some() {
        s.events = args.events;
    }
    if !args.window.is_empty() {
        s.window = Some(args.window);
    }
    if let Some(Widths(l)) = args.layers {
        s.layers = l;
    }
    s.tie |= args.tie;
    if let Some(v) = args.epochs {
        s.epochs = v;
    }
    if let Some(v) = args.lr {
        s.learning_rate = v;
    }
    if let Some(v) = args.tol {
        s.tol = v;
    }
    if let Some(v) = args.max_iter {
        s.max_iter = v;
    }
    if args.quadrature_order.is_some() {
        s.quadrature_order = args.quadrature_order;
    }
    if let Some(v) = args.alpha_init {
        s.alpha_init = v;
    }
    if let Some(v) = args.gradient {
        s.gradient = v;
    }
    let events_path = s
        .events
        .clone()
        .ok_or_else(|| CliError::Usage("--events is required".into()))?;
    if s.window.is_none() {
        s.window = window_from_manifest(&events_path);
    }
    let bounds = s.window.clone().ok_or_else(|| {
        CliError::Usage("--window is required (no manifest.json next to the events file)".into())
    })?;
    let window = Window::new(bounds).map_err(|e| CliError::Usage(e.to_string()))?;
    let config = s.fit_config()?;

    let events = load_events(&events_path, window)?;
    create_dir(&s.out_dir)?;
    let start = Instant::now();
    let model = fit(&events, &config)?;
    let elapsed = start.elapsed().as_secs_f64();
    model.save(s.out_dir.join("model.json"))?;
    let mut trace = String::from("epoch,log_marginal\n");
    for (i, v) in model.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v}\n"));
    }
    write_text(&s.out_dir.join("trace.csv"), &trace)?;
    write_manifest(
        &s.out_dir,
        "fit",
        &s,
        &["model.json".into(), "trace.csv".into()],
    )?;
    println!(
        "fitted {} events in {elapsed:.2}s; best epoch {} with log marginal {:.4}",
        events.len(),
        model.best_epoch,
        model.log_marginal()
    );
    Ok(())
}

fn load_model(path: Option<&PathBuf>) -> Result<FittedModel, CliError> {
    let p = path.ok_or_else(|| CliError::Usage("--model is required".into()))?;
    Ok(FittedModel::load(p)?)
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let mut s: PredictSettings = load_config(args.common.config.as_deref())?;
    apply_common(&args.common, &mut s.seed, &mut s.out_dir);
    if args.model.is_some() {
        s.model = args.model;
    }
    if args.resolution.is_some() {
        s.resolution = args.resolution;
    }
    let model = load_model(s.model.as_ref())?;
    let resolution = s
        .resolution
        .unwrap_or(if model.window.dim() == 1 { 1000 } else { 128 });
    if resolution < 2 {
        return Err(CliError::Usage("--resolution must be at least 2".into()));
    }
    s.resolution = Some(resolution);
    create_dir(&s.out_dir)?;
    let grid = intensity_grid(&model, resolution)?;
    grid.save_csv(s.out_dir.join("grid.csv"))?;
    grid.save_json(s.out_dir.join("grid.json"))?;
    write_manifest(
        &s.out_dir,
        "predict",
        &s,
        &["grid.csv".into(), "grid.json".into()],
    )?;
    println!(
        "wrote {} grid nodes to {}",
        grid.mean.len(),
        s.out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut s: EvaluateSettings = load_config(args.common.config.as_deref())?;
    apply_common(&args.common, &mut s.seed, &mut s.out_dir);
    if args.model.is_some() {
        s.model = args.model;
    }
    if !args.test.is_empty() {
        s.test = args.test;
    }
    if args.truth.is_some() {
        s.truth = args.truth;
    }
    if s.test.is_empty() {
        return Err(CliError::Usage(
            "at least one --test events file is required".into(),
        ));
    }
    let model = load_model(s.model.as_ref())?;
    let start = Instant::now();
    let mut per_set = Vec::with_capacity(s.test.len());
    for path in &s.test {
        let test: PointPattern = load_events(path, model.window.clone())?;
        per_set.push(expected_test_loglik(&model, &test)?);
    }
    let l_test = per_set.iter().sum::<f64>() / per_set.len() as f64;
    let rmse_value = match &s.truth {
        Some(path) => {
            let truth = IntensityGrid::load_csv(path)?;
            let grid = intensity_on(&model, truth.lattice.clone())?;
            Some(rmse(&grid, &truth)?)
        }
        None => None,
    };
    let runtime_seconds = start.elapsed().as_secs_f64();
    create_dir(&s.out_dir)?;
    let mut metrics = json!({
        "L_test": l_test,
        "L_test_per_set": per_set,
        "runtime_seconds": runtime_seconds,
        "config": s,
    });
    if let Some(r) = rmse_value {
        metrics["RMSE"] = json!(r);
    }
    write_text(
        &s.out_dir.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics).expect("serializes"),
    )?;
    write_manifest(&s.out_dir, "evaluate", &s, &["metrics.json".into()])?;
    match rmse_value {
        Some(r) => println!("L_test {l_test:.4}  RMSE {r:.4}"),
        None => println!("L_test {l_test:.4}"),
    }
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<(), CliError> {
    let mut s: BenchmarkSettings = load_config(args.common.config.as_deref())?;
    apply_common(&args.common, &mut s.seed, &mut s.out_dir);
    if let Some(k) = args.kind {
        s.kind = k;
    }
    if let Some(v) = args.datasets {
        s.datasets = v;
    }
    if let Some(m) = args.models {
        s.models = m
            .split(';')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
    }
    if let Some(v) = args.epochs {
        s.epochs = v;
    }
    if let Some(v) = args.lr {
        s.learning_rate = v;
    }
    if let Some(v) = args.resolution {
        s.resolution = v;
    }
    if let Some(v) = args.threads {
        s.threads = v;
    }
    s.dry_run |= args.dry_run;
    let config = s.benchmark_config()?;
    create_dir(&s.out_dir)?;
    let report = run_benchmark(&config)?;
    let table = report.table();
    write_text(&s.out_dir.join("report.txt"), &table)?;
    write_text(
        &s.out_dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("serializes"),
    )?;
    write_manifest(
        &s.out_dir,
        "benchmark",
        &s,
        &["report.txt".into(), "report.json".into()],
    )?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
