//! Subcommand implementations behind the `seqwarp` binary.
//!
//! Every subcommand reads an optional JSON config, writes its artifacts under
//! `--out`, and finishes with a `manifest.json` recording the resolved
//! config, seed and tool version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use seqwarp_core::conformal::{
    conformal_interval, coverage_eval, residual_scores, split_quantile, weighted_quantile, Interval,
};
use seqwarp_core::identify::{check_assumptions, identify_with, IdentifyOptions};
use seqwarp_core::model::{predict_mc, rmse_by_horizon, unit_posterior, PosteriorWindow};
use seqwarp_core::protocol::{run_bench, BenchConfig};
use seqwarp_core::sim::{generate_dataset, SimConfig};
use seqwarp_core::train::{fit, fit_from, init_bundle, TrainConfig};
use seqwarp_core::{load_dataset, save_dataset, BasisParams, Dataset, LevelShape, ModelBundle};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] seqwarp_core::Error),
    #[error("{path}: {msg}")]
    Input { path: PathBuf, msg: String },
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 usage, 2 data or assumption failure, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "seqwarp", version, about = "Sequential-intervention modelling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "seqwarp-out")]
    pub out: PathBuf,
    /// Worker threads; 1 gives a fully sequential run.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset with known ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Check identifiability assumptions and recover parameters constructively.
    Identify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// JSON holding basis parameters (a bare basis, a model bundle, a fit
        /// result or simulator ground truth).
        #[arg(long)]
        basis: PathBuf,
    },
    /// Fit by marginal-likelihood maximization.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Rank of the model; defaults to the dataset's hint.
        #[arg(long)]
        rank: Option<usize>,
        /// Hold this basis fixed instead of learning one.
        #[arg(long)]
        basis: Option<PathBuf>,
    },
    /// Monte-Carlo forecasts under each unit's recorded future actions.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Fit result or model bundle JSON.
        #[arg(long)]
        model: PathBuf,
    },
    /// Conformal intervals from calibration residuals.
    Conformal {
        #[command(flatten)]
        common: Common,
        /// CSV with columns `pred,actual` and optionally `weight`.
        #[arg(long)]
        calibration: PathBuf,
        /// CSV with column `pred` and optionally `actual`.
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Structured model vs recurrent baseline on unseen-level forecasts.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common }
            | Command::Identify { common, .. }
            | Command::Fit { common, .. }
            | Command::Predict { common, .. }
            | Command::Conformal { common, .. }
            | Command::Bench { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Identify { .. } => "identify",
            Command::Fit { .. } => "fit",
            Command::Predict { .. } => "predict",
            Command::Conformal { .. } => "conformal",
            Command::Bench { .. } => "bench",
        }
    }

    fn stochastic(&self) -> bool {
        matches!(
            self,
            Command::Simulate { .. } | Command::Fit { .. } | Command::Predict { .. } | Command::Bench { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Rank; defaults to the basis width.
    pub r: Option<usize>,
    pub levels: BTreeMap<usize, LevelShape>,
    pub allow_inversion_failure: bool,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            r: None,
            levels: BTreeMap::new(),
            allow_inversion_failure: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Forecast origin; defaults to `T − horizon` so realized values exist.
    pub origin: Option<usize>,
    pub horizon: usize,
    pub samples: usize,
    pub window: PosteriorWindow,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            origin: None,
            horizon: 5,
            samples: 200,
            window: PosteriorWindow::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    pub alpha: f64,
    /// Miscoverage levels for the coverage curve.
    pub alpha_grid: Vec<f64>,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        ConformalConfig {
            alpha: 0.05,
            alpha_grid: vec![0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

/// Artifact writer that remembers what it wrote for the manifest.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Output {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, body: &str) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, body).map_err(|source| CliError::Output { path, source })
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut body = serde_json::to_string_pretty(value).expect("serializable artifact");
        body.push('\n');
        self.text(name, &body)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let path = self.path(name);
        let err = |e: csv::Error| CliError::Output {
            path: path.clone(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    threads: Option<usize>,
    config: Value,
    inputs: BTreeMap<&'static str, String>,
    outputs: Vec<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

/// Pulls a value of type `T` out of a JSON document that is either `T` itself
/// or nests it under one of `keys` (searched in order, one level at a time).
fn extract<T: DeserializeOwned>(path: &Path, keys: &[&str]) -> CliResult<T> {
    let mut v: Value = read_json(path)?;
    loop {
        if let Ok(t) = serde_json::from_value::<T>(v.clone()) {
            return Ok(t);
        }
        match keys.iter().find_map(|k| v.get(*k).cloned()) {
            Some(inner) => v = inner,
            None => {
                return Err(CliError::Input {
                    path: path.to_path_buf(),
                    msg: format!("no {} found", std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")),
                })
            }
        }
    }
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(path)?)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run_from<I, S>(argv: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

pub fn run(cmd: &Command) -> CliResult<()> {
    let common = cmd.common();
    if cmd.stochastic() && common.seed.is_none() {
        return Err(CliError::Usage(format!("{} needs --seed", cmd.name())));
    }
    match common.threads {
        Some(0) => return Err(CliError::Usage("--threads must be ≥ 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            pool.install(|| dispatch(cmd))
        }
        None => dispatch(cmd),
    }
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    let common = cmd.common();
    let cfg_path = common.config.as_deref();
    let mut out = Outputs::new(&common.out)?;
    let mut inputs = BTreeMap::new();
    if let Some(p) = cfg_path {
        inputs.insert("config", p.display().to_string());
    }
    let config = match cmd {
        Command::Simulate { .. } => {
            let mut cfg: SimConfig = load_config(cfg_path)?;
            cfg.seed = common.seed.expect("checked");
            cmd_simulate(&cfg, &mut out)?;
            serde_json::to_value(&cfg)
        }
        Command::Identify { data, basis, .. } => {
            let cfg: IdentifyConfig = load_config(cfg_path)?;
            inputs.insert("data", data.display().to_string());
            inputs.insert("basis", basis.display().to_string());
            cmd_identify(&cfg, data, basis, &mut out)?;
            serde_json::to_value(&cfg)
        }
        Command::Fit { data, rank, basis, .. } => {
            let mut cfg: TrainConfig = load_config(cfg_path)?;
            cfg.seed = common.seed.expect("checked");
            inputs.insert("data", data.display().to_string());
            if let Some(b) = basis {
                inputs.insert("basis", b.display().to_string());
            }
            cmd_fit(&cfg, data, *rank, basis.as_deref(), &mut out)?;
            serde_json::to_value(&cfg)
        }
        Command::Predict { data, model, .. } => {
            let cfg: PredictConfig = load_config(cfg_path)?;
            inputs.insert("data", data.display().to_string());
            inputs.insert("model", model.display().to_string());
            cmd_predict(&cfg, data, model, common.seed.expect("checked"), &mut out)?;
            serde_json::to_value(&cfg)
        }
        Command::Conformal {
            calibration,
            predictions,
            ..
        } => {
            let cfg: ConformalConfig = load_config(cfg_path)?;
            inputs.insert("calibration", calibration.display().to_string());
            inputs.insert("predictions", predictions.display().to_string());
            cmd_conformal(&cfg, calibration, predictions, &mut out)?;
            serde_json::to_value(&cfg)
        }
        Command::Bench { .. } => {
            let cfg: BenchConfig = load_config(cfg_path)?;
            let cfg = cfg.with_seed(common.seed.expect("checked"));
            cmd_bench(&cfg, &mut out)?;
            serde_json::to_value(&cfg)
        }
    }
    .expect("serializable config");
    let outputs = out.written.clone();
    out.json(
        "manifest.json",
        &Manifest {
            tool: "seqwarp",
            version: env!("CARGO_PKG_VERSION"),
            command: cmd.name(),
            seed: common.seed,
            threads: common.threads,
            config,
            inputs,
            outputs,
        },
    )
}

fn cmd_simulate(cfg: &SimConfig, out: &mut Outputs) -> CliResult<()> {
    let (ds, truth) = generate_dataset(cfg)?;
    let path = out.path("dataset.jsonl");
    save_dataset(&ds, &path)?;
    out.json("truth.json", &truth)?;
    let report = check_assumptions(&ds, cfg.r, &BTreeMap::new(), &truth.basis)?;
    out.json("assumptions.json", &report)?;
    if !report.passed() {
        return Err(seqwarp_core::Error::AssumptionFailed(report.failures.join("; ")).into());
    }
    Ok(())
}

fn cmd_identify(cfg: &IdentifyConfig, data: &Path, basis: &Path, out: &mut Outputs) -> CliResult<()> {
    let ds = load_data(data)?;
    let bp: BasisParams = extract(basis, &["bundle", "basis"])?;
    let r = cfg.r.unwrap_or(bp.r);
    let report = check_assumptions(&ds, r, &cfg.levels, &bp)?;
    out.json("assumptions.json", &report)?;
    if !report.passed() {
        return Err(seqwarp_core::Error::AssumptionFailed(report.failures.join("; ")).into());
    }
    let opts = IdentifyOptions {
        allow_inversion_failure: cfg.allow_inversion_failure,
        skip_check: true,
    };
    let res = identify_with(&ds, &bp, r, &cfg.levels, opts)?;
    out.json("identify.json", &res)?;
    let rows: Vec<Vec<String>> = res
        .beta_hat
        .iter()
        .map(|b| {
            let mut row = vec![b.unit_id.clone(), b.rank.rank.to_string(), fmt(b.residual_norm)];
            row.extend(b.beta.iter().map(|v| fmt(*v)));
            row
        })
        .collect();
    let mut header = vec!["unit_id".to_string(), "rank".into(), "residual_norm".into()];
    header.extend((0..r).map(|l| format!("beta_{l}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("beta_hat.csv", &header, &rows)
}

fn cmd_fit(cfg: &TrainConfig, data: &Path, rank: Option<usize>, basis: Option<&Path>, out: &mut Outputs) -> CliResult<()> {
    let ds = load_data(data)?;
    let r = rank
        .or(ds.meta.r_hint)
        .ok_or_else(|| CliError::Usage("dataset has no rank hint; pass --rank".into()))?;
    let res = match basis {
        None => fit(&ds, r, cfg)?,
        Some(p) => {
            let bp: BasisParams = extract(p, &["bundle", "basis"])?;
            if bp.r != r {
                return Err(CliError::Usage(format!("basis has rank {}, --rank is {r}", bp.r)));
            }
            let mut init: ModelBundle = init_bundle(&ds, r, cfg)?;
            init.basis = bp;
            let cfg = TrainConfig {
                optimize_basis: false,
                ..cfg.clone()
            };
            fit_from(&ds, init, &cfg)?
        }
    };
    out.json("fit.json", &res)?;
    let rows: Vec<Vec<String>> = res
        .curve
        .iter()
        .map(|e| vec![e.epoch.to_string(), fmt(e.train), fmt(e.holdout)])
        .collect();
    out.csv("learning_curve.csv", &["epoch", "train_evidence", "holdout_evidence"], &rows)
}

fn cmd_predict(cfg: &PredictConfig, data: &Path, model: &Path, seed: u64, out: &mut Outputs) -> CliResult<()> {
    if cfg.horizon == 0 || cfg.samples == 0 {
        return Err(CliError::Usage("horizon and samples must be ≥ 1".into()));
    }
    let ds = load_data(data)?;
    let bundle: ModelBundle = extract(model, &["bundle"])?;
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    let mut actuals = Vec::new();
    let mut jsonl = String::new();
    for u in &ds.units {
        let t = u.horizon();
        let origin = match cfg.origin {
            Some(o) => o,
            None => t.checked_sub(cfg.horizon).ok_or_else(|| seqwarp_core::Error::InvalidUnit {
                unit_id: u.unit_id.clone(),
                msg: format!("shorter than the horizon {}", cfg.horizon),
            })?,
        };
        if origin + cfg.horizon > t {
            return Err(seqwarp_core::Error::InvalidUnit {
                unit_id: u.unit_id.clone(),
                msg: format!("origin {origin} + horizon {} exceeds T = {t}", cfg.horizon),
            }
            .into());
        }
        let post = unit_posterior(u, &bundle, cfg.window, ds.meta.t0, origin)?;
        let future = &u.d[origin..origin + cfg.horizon];
        let mut p = predict_mc(u, origin, &bundle, &post, future, cfg.samples, seed)?;
        let actual = u.x[origin + 1..=origin + cfg.horizon].to_vec();
        for h in 0..cfg.horizon {
            rows.push(vec![
                u.unit_id.clone(),
                (origin + h + 1).to_string(),
                (h + 1).to_string(),
                fmt(p.mean[h]),
                fmt(p.sample_std[h]),
                fmt(actual[h]),
            ]);
        }
        preds.push(p.mean.clone());
        actuals.push(actual);
        p.samples.clear();
        jsonl.push_str(&serde_json::to_string(&p).expect("serializable prediction"));
        jsonl.push('\n');
    }
    out.text("predictions.jsonl", &jsonl)?;
    out.csv("predictions.csv", &["unit_id", "t", "step", "mean", "std", "actual"], &rows)?;
    let rmse = rmse_by_horizon(&preds, &actuals)?;
    let rows: Vec<Vec<String>> = rmse.iter().enumerate().map(|(h, v)| vec![(h + 1).to_string(), fmt(*v)]).collect();
    out.csv("rmse_by_horizon.csv", &["step", "rmse"], &rows)
}

#[derive(Debug, Deserialize)]
struct CalRow {
    pred: f64,
    actual: f64,
    weight: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct PredRow {
    pred: f64,
    actual: Option<f64>,
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let bad = |msg: String| CliError::Input {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    rdr.deserialize().map(|r| r.map_err(|e| bad(e.to_string()))).collect()
}

#[derive(Serialize)]
struct ConformalSummary {
    alpha: f64,
    n_calibration: usize,
    weighted: bool,
    q_hat: f64,
    coverage: Option<f64>,
}

fn cmd_conformal(cfg: &ConformalConfig, calibration: &Path, predictions: &Path, out: &mut Outputs) -> CliResult<()> {
    let cal: Vec<CalRow> = read_csv(calibration)?;
    let test: Vec<PredRow> = read_csv(predictions)?;
    if cal.is_empty() {
        return Err(CliError::Input {
            path: calibration.to_path_buf(),
            msg: "no calibration rows".into(),
        });
    }
    let n_weighted = cal.iter().filter(|c| c.weight.is_some()).count();
    if n_weighted != 0 && n_weighted != cal.len() {
        return Err(CliError::Input {
            path: calibration.to_path_buf(),
            msg: "weights must be given for every row or none".into(),
        });
    }
    let scores = residual_scores(
        &cal.iter().map(|c| c.pred).collect::<Vec<_>>(),
        &cal.iter().map(|c| c.actual).collect::<Vec<_>>(),
    )?;
    let weights: Option<Vec<f64>> = (n_weighted > 0).then(|| cal.iter().map(|c| c.weight.unwrap_or(1.0)).collect());
    let quantile = |alpha: f64| -> CliResult<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::Usage(format!("alpha {alpha} must lie in (0, 1)")));
        }
        Ok(match &weights {
            Some(w) => weighted_quantile(&scores, w, alpha)?,
            None => split_quantile(&scores, alpha),
        })
    };
    let q = quantile(cfg.alpha)?;
    let intervals: Vec<Interval> = test.iter().map(|p| conformal_interval(p.pred, q)).collect();
    let actuals: Option<Vec<f64>> = test.iter().map(|p| p.actual).collect();
    let rows: Vec<Vec<String>> = test
        .iter()
        .zip(&intervals)
        .enumerate()
        .map(|(i, (p, iv))| {
            let mut row = vec![i.to_string(), fmt(p.pred), fmt(iv.lower), fmt(iv.upper)];
            if let Some(a) = p.actual {
                row.push(fmt(a));
                row.push(u8::from(iv.contains(a)).to_string());
            } else {
                row.extend([String::new(), String::new()]);
            }
            row
        })
        .collect();
    out.csv("intervals.csv", &["row", "pred", "lower", "upper", "actual", "covered"], &rows)?;
    let coverage = match &actuals {
        Some(a) if !a.is_empty() => Some(coverage_eval(&intervals, a)?),
        _ => None,
    };
    if let Some(a) = actuals.as_ref().filter(|a| !a.is_empty()) {
        let mut rows = Vec::new();
        for &alpha in &cfg.alpha_grid {
            let q = quantile(alpha)?;
            let iv: Vec<Interval> = test.iter().map(|p| conformal_interval(p.pred, q)).collect();
            rows.push(vec![fmt(alpha), fmt(q), fmt(coverage_eval(&iv, a)?)]);
        }
        out.csv("coverage_curve.csv", &["alpha", "q_hat", "coverage"], &rows)?;
    }
    out.json(
        "summary.json",
        &ConformalSummary {
            alpha: cfg.alpha,
            n_calibration: cal.len(),
            weighted: weights.is_some(),
            q_hat: q,
            coverage,
        },
    )
}

fn cmd_bench(cfg: &BenchConfig, out: &mut Outputs) -> CliResult<()> {
    let res = run_bench(cfg)?;
    out.text("bench.csv", &res.to_csv())?;
    out.json("bench.json", &res)
}
