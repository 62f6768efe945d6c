//! End-to-end workflow: generate, split, enumerate routes, train, refine,
//! evaluate. Every stage writes its artifact into one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, sample_demands, split_dataset, Dataset, Samples, SamplingInfo};
use crate::error::{Error, Result};
use crate::fixed_point::{free_flow_alpha, refine, RefineOptions, Refined};
use crate::fixtures;
use crate::io::{self, DenseMatrix};
use crate::metrics::{self, aggregate, evaluate_batch, Aggregate};
use crate::mlp::{init_mlp, train, Mlp, TrainConfig};
use crate::network::Network;
use crate::routes::{enumerate_routes, RouteSet};
use crate::solver::FwOptions;

pub const FLOWS_FORMAT: &str = "tapflow-flows";
pub const REPORT_FORMAT: &str = "tapflow-report";

/// Refinement settings; `alpha = None` uses `1e-2` over the largest
/// free-flow route cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSettings {
    pub alpha: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            alpha: None,
            tol: 1e-9,
            max_iters: 100_000,
        }
    }
}

impl RefineSettings {
    pub fn resolve(&self, net: &Network, rs: &RouteSet) -> RefineOptions {
        RefineOptions {
            alpha: self.alpha.unwrap_or_else(|| free_flow_alpha(net, rs)),
            tol: self.tol,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub converged: usize,
    pub samples: usize,
    pub max_residual: f64,
    pub mean_iterations: f64,
    pub max_iterations: usize,
}

/// Refines each row of `h0` against the matching demand row, in parallel.
pub fn refine_batch(
    h0: &Array2<f64>,
    x: &Array2<f64>,
    net: &Network,
    rs: &RouteSet,
    opts: &RefineOptions,
) -> Result<(Array2<f64>, RefineSummary)> {
    if h0.nrows() != x.nrows() {
        return Err(Error::Shape("prediction and demand row counts differ".into()));
    }
    let out: Vec<Refined> = (0..h0.nrows())
        .into_par_iter()
        .map(|i| refine(&h0.row(i).to_vec(), &x.row(i).to_vec(), net, rs, opts))
        .collect::<Result<_>>()?;
    let mut flows = Array2::zeros(h0.dim());
    for (i, r) in out.iter().enumerate() {
        flows.row_mut(i).assign(&ndarray::ArrayView1::from(&r.flows));
    }
    let n = out.len().max(1) as f64;
    let summary = RefineSummary {
        alpha: opts.alpha,
        tol: opts.tol,
        max_iters: opts.max_iters,
        converged: out.iter().filter(|r| r.converged).count(),
        samples: out.len(),
        max_residual: out.iter().map(|r| r.residual).fold(0.0, f64::max),
        mean_iterations: out.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        max_iterations: out.iter().map(|r| r.iterations).max().unwrap_or(0),
    };
    Ok((flows, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format: String,
    pub network: String,
    pub network_fingerprint: String,
    pub routes_fingerprint: String,
    pub samples: usize,
    pub zero_tol: f64,
    pub eps_rule: String,
    pub refinement: RefineSummary,
    /// Metrics of the network output before refinement.
    pub raw: Aggregate,
    /// Metrics after refinement.
    pub refined: Aggregate,
}

impl EvaluationReport {
    /// Header and the refined row.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.refined.csv_header(), self.refined.csv_row())
    }

    pub fn save(&self, json: impl AsRef<Path>, csv: impl AsRef<Path>) -> Result<()> {
        io::write_json(json, self)?;
        let csv = csv.as_ref();
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings<'a> {
    pub eps: &'a [f64],
    pub zero_tol: f64,
}

/// Runs the model on `samples`, refines, and scores both outputs.
pub fn evaluate_model(
    net: &Network,
    rs: &RouteSet,
    model: &Mlp,
    samples: &Samples,
    refine: &RefineSettings,
    eval: EvalSettings<'_>,
) -> Result<(EvaluationReport, Array2<f64>)> {
    model.ensure_routes(rs)?;
    rs.ensure_network(net)?;
    if samples.network_fingerprint != net.fingerprint() {
        return Err(Error::Fingerprint {
            what: "network",
            expected: net.fingerprint().to_string(),
            found: samples.network_fingerprint.clone(),
        });
    }
    let raw = model.forward_batch(&samples.x)?;
    let opts = refine.resolve(net, rs);
    opts.validate()?;
    let (refined, summary) = refine_batch(&raw, &samples.x, net, rs, &opts)?;
    let score = |h: &Array2<f64>| -> Result<Aggregate> {
        let recs = evaluate_batch(h, &samples.x, &samples.y, net, rs, eval.eps, eval.zero_tol)?;
        aggregate(&recs, net.num_od_pairs())
    };
    let report = EvaluationReport {
        format: REPORT_FORMAT.into(),
        network: net.name().to_string(),
        network_fingerprint: net.fingerprint().to_string(),
        routes_fingerprint: rs.fingerprint().to_string(),
        samples: samples.len(),
        zero_tol: eval.zero_tol,
        eps_rule: metrics::EPS_RULE.into(),
        refinement: summary,
        raw: score(&raw)?,
        refined: score(&refined)?,
    };
    Ok((report, refined))
}

/// Route flows paired with the demands they serve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowsFile {
    pub format: String,
    pub version: u32,
    pub network_fingerprint: String,
    pub routes_fingerprint: String,
    pub demands: DenseMatrix,
    pub flows: DenseMatrix,
}

impl FlowsFile {
    pub fn new(rs: &RouteSet, demands: &Array2<f64>, flows: &Array2<f64>) -> Self {
        Self {
            format: FLOWS_FORMAT.into(),
            version: 1,
            network_fingerprint: rs.network_fingerprint().to_string(),
            routes_fingerprint: rs.fingerprint().to_string(),
            demands: DenseMatrix::from_array(demands),
            flows: DenseMatrix::from_array(flows),
        }
    }

    pub fn load(path: impl AsRef<Path>, rs: &RouteSet) -> Result<(Array2<f64>, Array2<f64>)> {
        let file: FlowsFile = io::read_json(path)?;
        io::check_format(&file.format, FLOWS_FORMAT)?;
        if file.routes_fingerprint != rs.fingerprint() {
            return Err(Error::Fingerprint {
                what: "route set",
                expected: rs.fingerprint().to_string(),
                found: file.routes_fingerprint,
            });
        }
        let x = file.demands.into_array()?;
        let h = file.flows.into_array()?;
        if x.nrows() != h.nrows() || x.ncols() != rs.num_od_pairs() || h.ncols() != rs.len() {
            return Err(Error::Shape("flows file blocks do not match the route set".into()));
        }
        Ok((x, h))
    }
}

/// Full configuration of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Fixture name or network file.
    pub network: String,
    pub n: usize,
    /// Defaults to the network's demand interval.
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub seed: u64,
    pub gap_tol: f64,
    pub max_iters: usize,
    pub split_ratio: f64,
    /// Route length bound; defaults to the network's.
    pub k: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: Option<usize>,
    pub normalize: bool,
    pub refine: RefineSettings,
    pub eps: Vec<f64>,
    pub zero_tol: f64,
    pub out: PathBuf,
    pub skip_train: bool,
    /// Model to evaluate when `skip_train` is set.
    pub model: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            network: "nguyen-dupuis".into(),
            n: 1000,
            x_min: None,
            x_max: None,
            seed: 0,
            gap_tol: 1e-6,
            max_iters: 5000,
            split_ratio: 0.7,
            k: None,
            epochs: 4000,
            lr: 0.01,
            weight_decay: 0.01,
            batch_size: None,
            normalize: true,
            refine: RefineSettings::default(),
            eps: metrics::DEFAULT_EPS.to_vec(),
            zero_tol: metrics::ZERO_TOL,
            out: PathBuf::from("run"),
            skip_train: false,
            model: None,
        }
    }
}

/// Seeds derived from the run seed, one per random stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub sample: u64,
    pub split: u64,
    pub init: u64,
    pub train: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Self {
            sample: seed,
            split: seed.wrapping_add(1),
            init: seed.wrapping_add(2),
            train: seed.wrapping_add(3),
        }
    }

    pub fn to_map(self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("sample".into(), self.sample),
            ("split".into(), self.split),
            ("init".into(), self.init),
            ("train".into(), self.train),
        ])
    }
}

impl PipelineConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: Seeds::from_base(self.seed).train,
            ..TrainConfig::default()
        }
    }

    pub fn interval(&self, net: &Network) -> Result<[f64; 2]> {
        let fallback = net.demand_interval();
        match (self.x_min.or(fallback.map(|i| i[0])), self.x_max.or(fallback.map(|i| i[1]))) {
            (Some(lo), Some(hi)) => Ok([lo, hi]),
            _ => Err(Error::Config(format!(
                "network {} has no default demand interval; set x_min and x_max",
                net.name()
            ))),
        }
    }

    pub fn route_bound(&self, net: &Network) -> Result<usize> {
        self.k.or(net.route_bound()).ok_or_else(|| {
            Error::Config(format!("network {} has no default route bound; set k", net.name()))
        })
    }
}

/// Record of a run, enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub fingerprints: BTreeMap<String, String>,
    pub version: String,
    pub threads: usize,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new<C: Serialize>(subcommand: &str, config: &C) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.into(),
            config: serde_json::to_value(config).map_err(Error::json)?,
            seeds: BTreeMap::new(),
            fingerprints: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
            duration_secs: 0.0,
        })
    }

    pub fn finish(&mut self, started: Instant) {
        self.duration_secs = started.elapsed().as_secs_f64();
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Paths of the artifacts a pipeline run writes.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineArtifacts {
    pub dataset: PathBuf,
    pub routes: PathBuf,
    pub model: PathBuf,
    pub history: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub manifest: PathBuf,
}

impl PipelineArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dataset: dir.join("dataset.json"),
            routes: dir.join("routes.json"),
            model: dir.join("model.json"),
            history: dir.join("history.csv"),
            report_json: dir.join("report.json"),
            report_csv: dir.join("report.csv"),
            manifest: dir.join("manifest.json"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: EvaluationReport,
    pub dataset: Dataset,
    pub artifacts: PipelineArtifacts,
    pub manifest: RunManifest,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let started = Instant::now();
    let net = fixtures::resolve(&cfg.network)?;
    let seeds = Seeds::from_base(cfg.seed);
    let interval = cfg.interval(&net)?;
    let fw = FwOptions {
        gap_tol: cfg.gap_tol,
        max_iters: cfg.max_iters,
    };
    if !(cfg.gap_tol > 0.0) {
        return Err(Error::Config("gap_tol must be > 0".into()));
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let paths = PipelineArtifacts::in_dir(&cfg.out);

    let x = sample_demands(cfg.n, net.num_od_pairs(), interval, seeds.sample)?;
    let sampling = SamplingInfo {
        interval,
        seed: seeds.sample,
    };
    let mut dataset = generate_dataset(&net, &x, sampling, &fw)?;
    let split = split_dataset(&dataset, cfg.split_ratio, seeds.split)?;
    dataset.set_split(split)?;
    dataset.save(&paths.dataset)?;

    let rs = enumerate_routes(&net, cfg.route_bound(&net)?)?;
    rs.save(&net, &paths.routes)?;

    let model = if cfg.skip_train {
        let path = cfg
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("skip_train needs a model path".into()))?;
        let model = Mlp::load(path)?;
        if path != &paths.model {
            model.save(&paths.model)?;
        }
        model
    } else {
        let mut model = init_mlp(net.num_od_pairs(), rs.len(), seeds.init, cfg.normalize)?;
        let history = train(&mut model, &dataset.train()?, &rs, &cfg.train_config())?;
        std::fs::write(&paths.history, history.to_csv()).map_err(|e| Error::io(&paths.history, e))?;
        model.save(&paths.model)?;
        model
    };

    let eval = EvalSettings {
        eps: &cfg.eps,
        zero_tol: cfg.zero_tol,
    };
    let (report, _) = evaluate_model(&net, &rs, &model, &dataset.test()?, &cfg.refine, eval)?;
    report.save(&paths.report_json, &paths.report_csv)?;

    let mut manifest = RunManifest::new("pipeline", cfg)?;
    manifest.seeds = seeds.to_map();
    manifest.fingerprints = BTreeMap::from([
        ("network".into(), net.fingerprint().to_string()),
        ("routes".into(), rs.fingerprint().to_string()),
    ]);
    manifest.finish(started);
    manifest.save(&paths.manifest)?;
    Ok(PipelineOutcome {
        report,
        dataset,
        artifacts: paths,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct() {
        let s = Seeds::from_base(7);
        assert_eq!((s.sample, s.split, s.init, s.train), (7, 8, 9, 10));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn small_pipeline_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            network: "pigou".into(),
            n: 20,
            epochs: 50,
            out: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.report.samples, 6);
        assert!(out.report.refined.e2 <= 1e-8);
        for p in [&out.artifacts.dataset, &out.artifacts.model, &out.artifacts.manifest] {
            assert!(p.exists());
        }
    }
}
