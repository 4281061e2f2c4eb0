//! Command-line front end: `gen`, `train`, `index`, `eval` and `selftest`.
//!
//! Every command writes its resolved configuration as JSON next to its
//! outputs. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::baselines::ScanContextGrid;
use crate::data::{
    generate_synthetic, read_traversal_dir, write_traversal_dir, IngestRules, PolarImage, SyntheticWorldSpec,
    Traversal, TraversalRole,
};
use crate::error::{Error, Result};
use crate::net::{NetworkConfig, RadarLocModel};
use crate::pipeline::{describe_traversal, Method};
use crate::retrieval::{evaluate, write_descriptors, DescriptorIndex, EvalReport, DEFAULT_RECALL_MAX_N};
use crate::selftest::{injected_gradient_bug, run_checks, standard_checks};
use crate::training::{train, TrainConfig, TripletLossSpec};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;
/// Default dataset root when `--data` is not given.
pub const DATA_DIR_ENV: &str = "PLOC_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ploc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "polarloc", version, about = "Rotation-invariant place recognition for polar radar scans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark (train, map and query traversals).
    Gen(GenArgs),
    /// Train the descriptor network on a dataset's train traversal.
    Train(TrainArgs),
    /// Compute and store map and query descriptors.
    Index(IndexArgs),
    /// Index the map, retrieve every query and write the Recall@N report.
    Eval(EvalArgs),
    /// Run the built-in gradient, invariance and oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads; computation is sequential, so only 1 is meaningful.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    /// Output dataset directory (defaults to $PLOC_DATA_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of landmarks in the synthetic world.
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Dataset directory holding train/, map/ and query/ (defaults to $PLOC_DATA_DIR).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path (defaults to <out>/model.ploc).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size, even and at least 4 [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Triplet margin [default: 0.2].
    #[arg(long)]
    pub margin: Option<f64>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Map traversal directory (defaults to <data>/map).
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Query traversal directory (defaults to <data>/query).
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Descriptor method: radarloc, scancontext or ringkey.
    #[arg(long, default_value = "radarloc")]
    pub method: String,
    /// Trained checkpoint (radarloc only).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for descriptor files and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// ScanContext sectors (defaults to the divisor of A nearest 60).
    #[arg(long)]
    pub sectors: Option<usize>,
    /// ScanContext rings (defaults to the divisor of R nearest 20).
    #[arg(long)]
    pub rings: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub index: IndexArgs,
    /// Largest N reported in Recall@N.
    #[arg(long, default_value_t = DEFAULT_RECALL_MAX_N)]
    pub recall_max_n: usize,
    /// Comma-separated distance thresholds in meters.
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0])]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelftestArgs {
    /// Adds a check with a deliberately wrong gradient (harness self-test).
    #[arg(long, hide = true)]
    pub inject_gradient_bug: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Parses `args` (including the program name) and runs the command,
/// printing to stdout/stderr. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &mut std::io::stdout()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

/// Runs a parsed command, writing progress to `out`. Returns the exit code
/// for commands that report failures without an error (selftest).
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out).map(|_| 0),
        Command::Train(a) => cmd_train(&a, out).map(|_| 0),
        Command::Index(a) => cmd_index(&a, out).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| 0),
        Command::Selftest(a) => cmd_selftest(&a, out),
    }
}

fn data_root(data: &DataArgs) -> Result<PathBuf> {
    data.data
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("no dataset given: pass --data or set {DATA_DIR_ENV}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}

#[derive(Serialize, serde::Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SyntheticWorldSpec,
    pub traversals: Vec<(String, usize)>,
}

/// Ingestion rules for a dataset: resolution from the manifest of a
/// generated dataset, the standard 384 x 128 otherwise.
fn ingest_rules(root: &Path) -> Result<IngestRules> {
    let manifest = root.join(MANIFEST_FILE);
    let mut rules = IngestRules::default();
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::from(e).in_file(&manifest))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(&manifest))?;
        rules.angular_bins = m.spec.angular_bins;
        rules.radial_bins = m.spec.radial_bins;
    }
    Ok(rules)
}

fn load_traversal(dir: &Path, role: TraversalRole, rules: &IngestRules) -> Result<Traversal> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("traversal directory {} not found", dir.display())));
    }
    read_traversal_dir(dir, role, rules)
}

pub fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let dir = args
        .out
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("no output directory: pass --out or set {DATA_DIR_ENV}")))?;
    let mut spec = SyntheticWorldSpec {
        seed: args.common.seed,
        ..SyntheticWorldSpec::default()
    };
    if let Some(n) = args.landmarks {
        spec.landmark_count = n;
    }
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    create_dir(&dir)?;
    let mut counts = Vec::new();
    for t in [&ds.train, &ds.map, &ds.query] {
        write_traversal_dir(&dir.join(t.role.as_str()), t)?;
        counts.push((t.role.as_str().to_string(), t.len()));
        writeln!(out, "{}: {} scans", t.role.as_str(), t.len())?;
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            seed: spec.seed,
            spec: spec.clone(),
            traversals: counts,
        },
    )?;
    write_json(
        &dir.join("config_gen.json"),
        &serde_json::json!({ "command": "gen", "args": args, "spec": spec }),
    )?;
    Ok(())
}

/// Training hyper-parameters after applying the flag overrides.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig {
        seed: args.common.seed,
        ..TrainConfig::default()
    };
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(m) = args.margin {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {m}")));
        }
        config.loss = TripletLossSpec { margin: m };
    }
    if let Some(lr) = args.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        config.lr = lr;
    }
    if config.batch_size < 4 || config.batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size must be even and at least 4, got {}",
            config.batch_size
        )));
    }
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let root = data_root(&args.data)?;
    let config = resolve_train_config(args)?;
    let rules = ingest_rules(&root)?;
    let traversal = load_traversal(&root.join(TraversalRole::Train.as_str()), TraversalRole::Train, &rules)?;
    let images: Vec<PolarImage> = traversal.images().cloned().collect();
    let net_config = NetworkConfig::with_input(rules.angular_bins, rules.radial_bins);
    let mut model = RadarLocModel::build(net_config.clone(), config.seed)?;

    create_dir(&args.out)?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    write_json(
        &args.out.join("config_train.json"),
        &serde_json::json!({
            "command": "train",
            "args": args,
            "data": root,
            "checkpoint": checkpoint,
            "ingest": rules,
            "network": net_config,
            "training": config,
        }),
    )?;
    let log_path = args.out.join(TRAIN_LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::from(e).in_file(&log_path))?;
    writeln!(log, "epoch,mean_loss,active_fraction,wall_seconds")?;
    let mut log_error = None;
    let history = train(&mut model, &images, &traversal.poses, &config, |s| {
        let line = format!("{},{},{},{:.3}", s.epoch + 1, s.mean_loss, s.active_fraction, s.wall_seconds);
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_error.get_or_insert(e);
        }
        let _ = writeln!(
            out,
            "epoch {:>3}  loss {:.5}  active {:.3}  {:.1}s",
            s.epoch + 1,
            s.mean_loss,
            s.active_fraction,
            s.wall_seconds
        );
    });
    if let Some(e) = log_error {
        return Err(Error::from(e).in_file(log_path));
    }
    history?;
    model.save(&checkpoint)?;
    writeln!(out, "checkpoint written to {}", checkpoint.display())?;
    Ok(())
}

struct Prepared {
    method: Method,
    method_id: String,
    model: Option<RadarLocModel<f32>>,
    grid: ScanContextGrid,
    map: Traversal,
    query: Traversal,
    resolved: serde_json::Value,
}

fn prepare(args: &IndexArgs) -> Result<Prepared> {
    let method: Method = args.method.parse()?;
    let model = match (method, &args.checkpoint) {
        (Method::RadarLoc, Some(path)) => Some(RadarLocModel::load(path)?),
        (Method::RadarLoc, None) => return Err(Error::Config("method radarloc needs --checkpoint".into())),
        (_, Some(_)) => return Err(Error::Config(format!("method {method} does not take a checkpoint"))),
        (_, None) => None,
    };
    let (map_dir, query_dir, rules) = match (&args.map, &args.query) {
        (Some(m), Some(q)) => {
            let root = args.data.data.clone().or_else(|| m.parent().map(Path::to_path_buf));
            let rules = root.map_or_else(|| Ok(IngestRules::default()), |r| ingest_rules(&r))?;
            (m.clone(), q.clone(), rules)
        }
        _ => {
            let root = data_root(&args.data)?;
            let rules = ingest_rules(&root)?;
            (
                args.map.clone().unwrap_or_else(|| root.join("map")),
                args.query.clone().unwrap_or_else(|| root.join("query")),
                rules,
            )
        }
    };
    if let Some(m) = &model {
        let c = m.config();
        if (c.angular_bins, c.radial_bins) != (rules.angular_bins, rules.radial_bins) {
            return Err(Error::Config(format!(
                "checkpoint expects {}x{} scans, dataset has {}x{}",
                c.angular_bins, c.radial_bins, rules.angular_bins, rules.radial_bins
            )));
        }
    }
    let default_grid = ScanContextGrid::for_image(rules.angular_bins, rules.radial_bins);
    let grid = ScanContextGrid {
        sectors: args.sectors.unwrap_or(default_grid.sectors),
        rings: args.rings.unwrap_or(default_grid.rings),
    };
    if rules.angular_bins % grid.sectors.max(1) != 0 || rules.radial_bins % grid.rings.max(1) != 0 || grid.is_empty() {
        return Err(Error::Config(format!(
            "ScanContext grid {}x{} does not divide {}x{} scans",
            grid.sectors, grid.rings, rules.angular_bins, rules.radial_bins
        )));
    }
    let map = load_traversal(&map_dir, TraversalRole::Map, &rules)?;
    let query = load_traversal(&query_dir, TraversalRole::Query, &rules)?;
    let resolved = serde_json::json!({
        "method": method,
        "method_id": method.id(grid),
        "checkpoint": args.checkpoint,
        "map": map_dir,
        "query": query_dir,
        "ingest": rules,
        "grid": grid,
        "seed": args.common.seed,
        "threads": args.common.threads,
    });
    Ok(Prepared {
        method,
        method_id: method.id(grid),
        model,
        grid,
        map,
        query,
        resolved,
    })
}

fn write_pdsc(path: &Path, method_id: &str, entries: &[crate::retrieval::Descriptor]) -> Result<()> {
    let mut buf = Vec::new();
    write_descriptors(&mut buf, method_id, entries)?;
    write_file(path, &buf)
}

pub fn cmd_index(args: &IndexArgs, out: &mut dyn Write) -> Result<()> {
    let p = prepare(args)?;
    create_dir(&args.out)?;
    let name = p.method.as_str();
    write_json(
        &args.out.join(format!("config_index_{name}.json")),
        &serde_json::json!({ "command": "index", "resolved": p.resolved }),
    )?;
    for (role, t) in [("map", &p.map), ("query", &p.query)] {
        let desc = describe_traversal(p.method, t, p.model.as_ref(), p.grid)?;
        let path = args.out.join(format!("{name}_{role}.pdsc"));
        write_pdsc(&path, &p.method_id, &desc)?;
        writeln!(out, "{role}: {} descriptors -> {}", desc.len(), path.display())?;
    }
    Ok(())
}

/// Runs retrieval for one method and returns the report after writing
/// descriptors, the CSV report and the resolved config into `args.out`.
pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    if args.recall_max_n == 0 {
        return Err(Error::Config("--recall-max-n must be at least 1".into()));
    }
    if args.thresholds.is_empty() || args.thresholds.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Config("--thresholds must be positive distances".into()));
    }
    let a = &args.index;
    let p = prepare(a)?;
    create_dir(&a.out)?;
    let name = p.method.as_str();
    let mut resolved = p.resolved.clone();
    resolved["recall_max_n"] = args.recall_max_n.into();
    resolved["thresholds"] = serde_json::to_value(&args.thresholds)?;
    write_json(
        &a.out.join(format!("config_eval_{name}.json")),
        &serde_json::json!({ "command": "eval", "resolved": resolved }),
    )?;
    let map = describe_traversal(p.method, &p.map, p.model.as_ref(), p.grid)?;
    let query = describe_traversal(p.method, &p.query, p.model.as_ref(), p.grid)?;
    write_pdsc(&a.out.join(format!("{name}_map.pdsc")), &p.method_id, &map)?;
    write_pdsc(&a.out.join(format!("{name}_query.pdsc")), &p.method_id, &query)?;
    let index = DescriptorIndex::build(&p.method_id, map)?;
    let report = evaluate(&index, &query, args.recall_max_n, &args.thresholds)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&a.out.join(format!("{name}_recall.csv")), &csv)?;
    for (t, d) in report.thresholds.iter().enumerate() {
        writeln!(out, "{name}: Recall@1({d} m) = {:.4}", report.recall[t][0])?;
    }
    Ok(report)
}

pub fn cmd_selftest(args: &SelftestArgs, out: &mut dyn Write) -> Result<i32> {
    let mut checks = standard_checks();
    if args.inject_gradient_bug {
        checks.push(injected_gradient_bug());
    }
    let mut io_error = None;
    let outcomes = run_checks(&checks, |o| {
        let status = if o.passed { "PASS" } else { "FAIL" };
        if let Err(e) = writeln!(out, "{status} {:<28} {} ({:.2}s)", o.name, o.detail, o.seconds) {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", outcomes.len())?;
        Ok(0)
    } else {
        writeln!(out, "{} of {} checks failed: {}", failed.len(), outcomes.len(), failed.join(", "))?;
        Ok(EXIT_FAILURE)
    }
}
