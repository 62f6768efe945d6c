//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{generate_dataset, load_dataset, sample_demands, split_dataset, Dataset, SamplingInfo};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::io;
use crate::metrics;
use crate::mlp::{init_mlp, train, Mlp, TrainConfig};
use crate::network::Network;
use crate::pipeline::{
    evaluate_model, refine_batch, run_pipeline, EvalSettings, FlowsFile, PipelineConfig, RefineSettings,
    RunManifest, Seeds,
};
use crate::routes::{enumerate_routes, RouteSet};
use crate::solver::{frank_wolfe, FwOptions};

#[derive(Debug, Parser)]
#[command(name = "tapflow", version, about = "Learned route-flow prediction for static traffic assignment")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a network file or fixture and print a summary.
    Validate(ValidateArgs),
    /// Enumerate all routes with at most K links.
    Routes(RoutesArgs),
    /// Sample demands and label them with equilibrium arc flows.
    Generate(GenerateArgs),
    /// Solve one equilibrium with Frank-Wolfe.
    Solve(SolveArgs),
    /// Train the route-flow model.
    Train(TrainArgs),
    /// Refine route flows toward equilibrium.
    Refine(RefineArgs),
    /// Score a model on the test split.
    Evaluate(EvaluateArgs),
    /// Run generate, train, refine and evaluate end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Network file or fixture name.
    #[arg(long)]
    network: String,
    /// Also enumerate routes with this bound.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct RoutesArgs {
    #[arg(long)]
    network: String,
    /// Maximum links per route (default: the network's).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    network: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    xmin: Option<f64>,
    #[arg(long)]
    xmax: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    gap_tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    /// Train fraction of the stored split.
    #[arg(long, default_value_t = 0.7)]
    split_ratio: f64,
    /// Split seed (default: seed + 1).
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long)]
    network: String,
    /// File of demands, one per OD pair (JSON array or whitespace/comma separated).
    #[arg(long, conflicts_with = "demands", required_unless_present = "demands")]
    demand_file: Option<PathBuf>,
    /// Comma-separated demands.
    #[arg(long, value_delimiter = ',')]
    demands: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-6)]
    gap_tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    network: String,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    routes: PathBuf,
    #[arg(long, default_value_t = 4000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Mini-batch size (default: full batch).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds initialization (seed) and shuffling (seed + 1).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standardize inputs with training statistics.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[arg(long)]
    out_model: PathBuf,
    /// Per-epoch loss history (CSV).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Copy, Serialize)]
struct RefineFlags {
    /// Step constant (default: 1e-2 over the largest free-flow route cost).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
}

impl RefineFlags {
    fn settings(&self) -> RefineSettings {
        RefineSettings {
            alpha: self.alpha,
            tol: self.tol,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[arg(long)]
    network: String,
    #[arg(long)]
    routes: PathBuf,
    /// Route flows and demands to refine.
    #[arg(long, visible_alias = "model-output", conflicts_with_all = ["model", "dataset"])]
    flows_file: Option<PathBuf>,
    /// Model whose test-split predictions are refined (with --dataset).
    #[arg(long, requires = "dataset", required_unless_present = "flows_file")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    refine: RefineFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    network: String,
    #[arg(long)]
    model: PathBuf,
    /// Dataset whose test split is scored.
    #[arg(long)]
    dataset: PathBuf,
    /// Route file (default: enumerate with the model's bound).
    #[arg(long)]
    routes: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = metrics::DEFAULT_EPS)]
    eps: Vec<f64>,
    #[arg(long, default_value_t = metrics::ZERO_TOL)]
    zero_tol: f64,
    #[command(flatten)]
    refine: RefineFlags,
    /// Report path (JSON); a CSV is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// TOML or JSON file (or a run manifest) whose values override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "nguyen-dupuis")]
    network: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    xmin: Option<f64>,
    #[arg(long)]
    xmax: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    gap_tol: f64,
    #[arg(long, default_value_t = 5000)]
    fw_max_iters: usize,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 4000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[command(flatten)]
    refine: RefineFlags,
    #[arg(long, value_delimiter = ',', default_values_t = metrics::DEFAULT_EPS)]
    eps: Vec<f64>,
    #[arg(long, default_value_t = metrics::ZERO_TOL)]
    zero_tol: f64,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Evaluate the model given by --model instead of training.
    #[arg(long, requires = "model")]
    skip_train: bool,
    #[arg(long)]
    model: Option<PathBuf>,
}

impl PipelineArgs {
    fn to_config(&self) -> PipelineConfig {
        PipelineConfig {
            network: self.network.clone(),
            n: self.n,
            x_min: self.xmin,
            x_max: self.xmax,
            seed: self.seed,
            gap_tol: self.gap_tol,
            max_iters: self.fw_max_iters,
            split_ratio: 0.7,
            k: self.k,
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            normalize: self.normalize,
            refine: self.refine.settings(),
            eps: self.eps.clone(),
            zero_tol: self.zero_tol,
            out: self.out.clone(),
            skip_train: self.skip_train,
            model: self.model.clone(),
        }
    }
}

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Validate(a) => validate(a),
        Command::Routes(a) => routes(a),
        Command::Generate(a) => generate(a),
        Command::Solve(a) => solve(a),
        Command::Train(a) => train_cmd(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::json)?;
    text.push('\n');
    emit(&text);
    Ok(())
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn validate(a: ValidateArgs) -> Result<()> {
    let net = fixtures::resolve(&a.network)?;
    let mut summary = json!({
        "network": net.name(),
        "nodes": net.num_nodes(),
        "links": net.num_links(),
        "od_pairs": net.num_od_pairs(),
        "cost_family": net.cost_family(),
        "fingerprint": net.fingerprint(),
    });
    if let Some(k) = a.k.or(net.route_bound()) {
        let rs = enumerate_routes(&net, k)?;
        summary["k"] = json!(k);
        summary["routes"] = json!(rs.len());
    }
    print_json(&summary)
}

fn routes(a: RoutesArgs) -> Result<()> {
    let net = fixtures::resolve(&a.network)?;
    let k = a
        .k
        .or(net.route_bound())
        .ok_or_else(|| Error::Config("network has no default route bound; pass --k".into()))?;
    let rs = enumerate_routes(&net, k)?;
    rs.save(&net, &a.out)?;
    print_json(&json!({ "routes": rs.len(), "k": k, "fingerprint": rs.fingerprint() }))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let net = fixtures::resolve(&a.network)?;
    let fallback = net.demand_interval();
    let interval = match (a.xmin.or(fallback.map(|i| i[0])), a.xmax.or(fallback.map(|i| i[1]))) {
        (Some(lo), Some(hi)) => [lo, hi],
        _ => return Err(Error::Config("network has no default demand interval; pass --xmin and --xmax".into())),
    };
    let fw = FwOptions {
        gap_tol: a.gap_tol,
        max_iters: a.max_iters,
    };
    let x = sample_demands(a.n, net.num_od_pairs(), interval, a.seed)?;
    let mut ds = generate_dataset(&net, &x, SamplingInfo { interval, seed: a.seed }, &fw)?;
    let split_seed = a.split_seed.unwrap_or(Seeds::from_base(a.seed).split);
    let split = split_dataset(&ds, a.split_ratio, split_seed)?;
    ds.set_split(split)?;
    ds.save(&a.out)?;
    let mut m = RunManifest::new("generate", &a)?;
    m.seeds.insert("sample".into(), a.seed);
    m.seeds.insert("split".into(), split_seed);
    m.fingerprints.insert("network".into(), net.fingerprint().into());
    m.finish(started);
    m.save(manifest_path(&a.out))?;
    print_json(&json!({
        "rows": ds.len(),
        "excluded": ds.meta.excluded.len(),
        "interval": interval,
        "out": a.out,
    }))
}

fn read_demands(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(Error::json);
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| {
            t.parse::<f64>().map_err(|e| Error::Parse {
                line: None,
                column: None,
                message: format!("demand entry {i} ({t:?}): {e}"),
            })
        })
        .collect()
}

fn solve(a: SolveArgs) -> Result<()> {
    let net = fixtures::resolve(&a.network)?;
    let demands = match (&a.demand_file, &a.demands) {
        (Some(p), _) => read_demands(p)?,
        (None, Some(d)) => d.clone(),
        (None, None) => unreachable!("clap requires one demand source"),
    };
    let opts = FwOptions {
        gap_tol: a.gap_tol,
        max_iters: a.max_iters,
    };
    let sol = frank_wolfe(&net, &demands, &opts)?;
    let times = net.link_times(&sol.flows)?;
    let links: Vec<Value> = net
        .links()
        .iter()
        .zip(sol.flows.iter().zip(&times))
        .map(|(l, (f, t))| json!({ "id": l.id, "tail": l.tail, "head": l.head, "flow": f, "time": t }))
        .collect();
    print_json(&json!({
        "network": net.name(),
        "relative_gap": sol.relative_gap,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "objective": sol.objective,
        "links": links,
    }))
}

fn load_inputs(network: &str, dataset: &Path) -> Result<(Network, Dataset)> {
    let net = fixtures::resolve(network)?;
    let ds = load_dataset(dataset, &net)?;
    Ok((net, ds))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let (net, ds) = load_inputs(&a.network, &a.dataset)?;
    let rs = RouteSet::load(&net, &a.routes)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        seed: a.seed.wrapping_add(1),
        ..TrainConfig::default()
    };
    let mut model = init_mlp(net.num_od_pairs(), rs.len(), a.seed, a.normalize)?;
    let history = train(&mut model, &ds.train()?, &rs, &cfg)?;
    model.save(&a.out_model)?;
    if let Some(p) = &a.history {
        std::fs::write(p, history.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    let mut m = RunManifest::new("train", &json!({ "args": &a, "train": cfg }))?;
    m.seeds.insert("init".into(), a.seed);
    m.seeds.insert("train".into(), cfg.seed);
    m.fingerprints.insert("network".into(), net.fingerprint().into());
    m.fingerprints.insert("routes".into(), rs.fingerprint().into());
    m.finish(started);
    m.save(manifest_path(&a.out_model))?;
    let last = history.epochs.last().expect("epochs >= 2");
    print_json(&json!({ "epochs": cfg.epochs, "switch_epoch": history.switch_epoch, "final": last }))
}

fn refine_cmd(a: RefineArgs) -> Result<()> {
    let net = fixtures::resolve(&a.network)?;
    let rs = RouteSet::load(&net, &a.routes)?;
    let (x, h0) = match (&a.flows_file, &a.model, &a.dataset) {
        (Some(p), _, _) => FlowsFile::load(p, &rs)?,
        (None, Some(m), Some(d)) => {
            let model = Mlp::load(m)?;
            model.ensure_routes(&rs)?;
            let ds = load_dataset(d, &net)?;
            let test = ds.test()?;
            let h = model.forward_batch(&test.x)?;
            (test.x, h)
        }
        _ => unreachable!("clap enforces one input mode"),
    };
    let opts = a.refine.settings().resolve(&net, &rs);
    opts.validate()?;
    let (flows, summary) = refine_batch(&h0, &x, &net, &rs, &opts)?;
    io::write_json(&a.out, &FlowsFile::new(&rs, &x, &flows))?;
    print_json(&summary)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let (net, ds) = load_inputs(&a.network, &a.dataset)?;
    let model = Mlp::load(&a.model)?;
    let rs = match (&a.routes, &model.routes) {
        (Some(p), _) => RouteSet::load(&net, p)?,
        (None, Some(b)) => enumerate_routes(&net, b.k_bound)?,
        (None, None) => return Err(Error::Config("model carries no route bound; pass --routes".into())),
    };
    let eval = EvalSettings {
        eps: &a.eps,
        zero_tol: a.zero_tol,
    };
    let (report, _) = evaluate_model(&net, &rs, &model, &ds.test()?, &a.refine.settings(), eval)?;
    let csv = a.report.with_extension("csv");
    report.save(&a.report, &csv)?;
    let mut m = RunManifest::new(
        "evaluate",
        &json!({
            "network": a.network, "model": a.model, "dataset": a.dataset, "routes": a.routes,
            "eps": a.eps, "zero_tol": a.zero_tol, "refine": a.refine, "report": a.report,
        }),
    )?;
    m.fingerprints.insert("network".into(), net.fingerprint().into());
    m.fingerprints.insert("routes".into(), rs.fingerprint().into());
    m.finish(started);
    m.save(manifest_path(&a.report))?;
    emit(&report.to_csv());
    Ok(())
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a TOML or JSON configuration; a run manifest contributes its
/// `config` section.
fn read_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(Error::json)?
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Parse {
            line: None,
            column: None,
            message: e.to_string(),
        })?;
        serde_json::to_value(table).map_err(Error::json)?
    };
    match value {
        Value::Object(mut o) if o.contains_key("subcommand") && o.contains_key("config") => {
            Ok(o.remove("config").expect("checked"))
        }
        v => Ok(v),
    }
}

pub fn resolve_pipeline_config(flags: PipelineConfig, file: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = file else {
        return Ok(flags);
    };
    let mut value = serde_json::to_value(&flags).map_err(Error::json)?;
    merge(&mut value, read_config(path)?);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = resolve_pipeline_config(a.to_config(), a.config.as_deref())?;
    let out = run_pipeline(&cfg)?;
    emit(&out.report.to_csv());
    Ok(())
}
