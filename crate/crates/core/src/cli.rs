//! Command-line front end: a JSON experiment config merged with flags, and
//! one subcommand per artifact kind.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::evaluation::{
    mse, mae, pinball_risk, rate_fit, run_trials, write_table, CvSpec, ExperimentSpec, MeanStderr,
    Method, REPORT_SCHEMA, SUMMARY_SCHEMA, TRIALS_SCHEMA,
};
use crate::landscape::{direction_pair, full_loss, surface, BiasMode, LandscapeSpec};
use crate::losses::{pinball, KernelKind, LossSpec};
use crate::network::{Architecture, MlpModel};
use crate::numerics::Rng;
use crate::scenarios::{load_csv, split_with, Dataset, RowFilter, Scenario, SplitSpec, Standardizer};
use crate::trainer::{
    cv_bandwidth, train_noncrossing, train_single, EpochRecord, FittedQuantileModel, TrainConfig,
    DEFAULT_CV_GRID,
};

pub const DETERMINISTIC_ENV: &str = "CONQUER_DETERMINISTIC";
pub const DEFAULT_TAUS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Bandwidth used when neither `bandwidth` nor `cv` is given: the value for
/// the nearest of n = 1000, 5000, 10000 on a log scale.
pub fn default_bandwidth(n: usize) -> f64 {
    const TABLE: [(f64, f64); 3] = [(1000.0, 0.01), (5000.0, 0.005), (10000.0, 0.001)];
    let ln = (n.max(1) as f64).ln();
    TABLE
        .iter()
        .min_by(|a, b| (a.0.ln() - ln).abs().total_cmp(&(b.0.ln() - ln).abs()))
        .unwrap()
        .1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPreset {
    #[default]
    A,
    B,
    #[serde(rename = "landscape")]
    Landscape,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub features: Vec<String>,
    pub target: String,
    /// `column=value`; rows that differ are dropped.
    pub filter: Option<String>,
    pub test_fraction: f64,
    /// Standardize features with training-split moments.
    pub standardize: bool,
}

impl Default for CsvSource {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            features: Vec::new(),
            target: String::new(),
            filter: None,
            test_fraction: 0.2,
            standardize: true,
        }
    }
}

/// Synthetic MSE `c·n^(−γ)` used in place of training by `rate` in test mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateInjection {
    pub constant: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Option<Scenario>,
    pub csv: Option<CsvSource>,
    pub model: ModelPreset,
    /// Hidden widths for `model = "custom"`.
    pub widths: Option<Vec<usize>>,
    pub residual: bool,
    pub taus: Vec<f64>,
    pub method: Method,
    pub bandwidth: Option<f64>,
    pub cv: bool,
    pub cv_grid: Vec<f64>,
    pub cv_folds: usize,
    pub joint: bool,
    /// `None` enables early stopping for smoothed losses only.
    pub early_stop: Option<bool>,
    pub train: TrainConfig,
    pub n: usize,
    pub n_grid: Vec<usize>,
    pub n_trials: usize,
    pub test_size: usize,
    pub seed: u64,
    pub workers: usize,
    pub deterministic: bool,
    pub landscape: LandscapeSpec,
    /// Existing model for `landscape`; trained from the config when absent.
    pub model_file: Option<PathBuf>,
    pub rate_injection: Option<RateInjection>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            csv: None,
            model: ModelPreset::A,
            widths: None,
            residual: false,
            taus: DEFAULT_TAUS.to_vec(),
            method: Method::Gaussian,
            bandwidth: None,
            cv: false,
            cv_grid: DEFAULT_CV_GRID.to_vec(),
            cv_folds: 5,
            joint: false,
            early_stop: None,
            train: TrainConfig::default(),
            n: 1000,
            n_grid: vec![1000, 5000, 10000],
            n_trials: 5,
            test_size: 10000,
            seed: 0,
            workers: 1,
            deterministic: false,
            landscape: LandscapeSpec::default(),
            model_file: None,
            rate_injection: None,
            out: PathBuf::from("conquer-out"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Train,
    Bench,
    Cv,
    Rate,
    Landscape,
}

impl CommandKind {
    pub const ALL: [CommandKind; 6] = [
        CommandKind::Simulate,
        CommandKind::Train,
        CommandKind::Bench,
        CommandKind::Cv,
        CommandKind::Rate,
        CommandKind::Landscape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Train => "train",
            CommandKind::Bench => "bench",
            CommandKind::Cv => "cv",
            CommandKind::Rate => "rate",
            CommandKind::Landscape => "landscape",
        }
    }
}

impl std::str::FromStr for CommandKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CommandKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown command {s:?}")))
    }
}

impl ExperimentConfig {
    pub fn input_dim(&self) -> usize {
        match (&self.scenario, &self.csv) {
            (Some(s), _) => s.dim(),
            (None, Some(c)) => c.features.len(),
            _ => 0,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let d = self.input_dim();
        let arch = match self.model {
            ModelPreset::A => Architecture::model_a(d),
            ModelPreset::B => Architecture::model_b(d),
            ModelPreset::Landscape => Architecture::landscape(d),
            ModelPreset::Custom => Architecture::new(d, self.widths.clone().unwrap_or_default(), 1),
        }
        .with_residual(self.residual);
        if self.joint && self.train.heads == crate::trainer::HeadLayout::Shared {
            arch.with_outputs(self.taus.len())
        } else {
            arch
        }
    }

    /// Training settings after the method-dependent early-stop default.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        let enabled = self.early_stop.unwrap_or(self.method != Method::Baseline);
        t.early_stop = if enabled {
            Some(t.early_stop.unwrap_or_default())
        } else {
            None
        };
        t.deterministic = t.deterministic || self.deterministic;
        t
    }

    /// Every violated constraint for `command`, in a stable order.
    pub fn violations(&self, command: CommandKind) -> Vec<String> {
        let mut v = Vec::new();
        match (&self.scenario, &self.csv) {
            (Some(_), Some(_)) => v.push("set exactly one data source: scenario or csv".into()),
            (None, None) => v.push("a data source is required: scenario or csv".into()),
            (None, Some(c)) => {
                if matches!(command, CommandKind::Simulate | CommandKind::Bench | CommandKind::Rate) {
                    v.push(format!("{} needs a scenario; csv data is not supported", command.name()));
                }
                if c.path.as_os_str().is_empty() {
                    v.push("csv.path is required".into());
                }
                if c.features.is_empty() {
                    v.push("csv.features must list at least one column".into());
                }
                if c.target.is_empty() {
                    v.push("csv.target is required".into());
                }
                if let Some(f) = &c.filter {
                    if let Err(e) = f.parse::<RowFilter>() {
                        v.push(e.to_string());
                    }
                }
                if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
                    v.push(format!("csv.test_fraction must lie in (0, 1), got {}", c.test_fraction));
                }
            }
            (Some(_), None) => {}
        }
        match (self.model, &self.widths) {
            (ModelPreset::Custom, None) => v.push("model=custom needs widths".into()),
            (ModelPreset::Custom, Some(w)) if w.contains(&0) => {
                v.push("widths must be positive".into())
            }
            (ModelPreset::Custom, Some(_)) | (_, None) => {}
            (_, Some(_)) => v.push("widths are only allowed with model=custom".into()),
        }
        if self.taus.is_empty() {
            v.push("at least one quantile level is required".into());
        }
        if self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            v.push(format!("taus must lie in (0, 1), got {:?}", self.taus));
        }
        if self.taus.windows(2).any(|w| !(w[0] < w[1])) {
            v.push("taus must be strictly increasing".into());
        }
        if self.joint && self.taus.len() < 2 {
            v.push("joint estimation needs at least two taus".into());
        }
        if self.method == Method::Baseline {
            if self.bandwidth.is_some() {
                v.push("method=baseline forbids bandwidth".into());
            }
            if self.cv {
                v.push("method=baseline forbids cv".into());
            }
            if command == CommandKind::Cv {
                v.push("cv needs a smoothed method".into());
            }
        }
        if self.cv && self.bandwidth.is_some() {
            v.push("set either bandwidth or cv, not both".into());
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                v.push(format!("bandwidth must be positive, got {h}"));
            }
        }
        if self.cv || command == CommandKind::Cv {
            if self.cv_folds < 2 {
                v.push("cv_folds must be at least 2".into());
            }
            if self.cv_grid.is_empty() || self.cv_grid.iter().any(|h| !(*h > 0.0)) {
                v.push("cv_grid must be non-empty and positive".into());
            }
            if self.joint {
                v.push("cv is only available for single-quantile fits".into());
            }
        }
        if self.n < 2 {
            v.push("n must be at least 2".into());
        }
        if self.n_trials == 0 {
            v.push("n_trials must be at least 1".into());
        }
        if self.test_size == 0 {
            v.push("test_size must be positive".into());
        }
        if self.workers == 0 {
            v.push("workers must be at least 1".into());
        }
        if command == CommandKind::Rate {
            let mut ns = self.n_grid.clone();
            ns.sort_unstable();
            ns.dedup();
            if ns.len() < 2 || ns.contains(&0) || ns.contains(&1) {
                v.push("n_grid needs at least two distinct sizes of 2 or more".into());
            }
            if let Some(inj) = self.rate_injection {
                if !(inj.constant > 0.0) {
                    v.push("rate_injection.constant must be positive".into());
                }
            }
        }
        if command == CommandKind::Landscape {
            if self.taus.len() != 1 {
                v.push("landscape needs exactly one tau".into());
            }
            if self.joint {
                v.push("landscape does not support joint models".into());
            }
            if let Err(Error::Config(l)) = self.landscape.validate() {
                v.extend(l.into_iter().map(|s| format!("landscape.{s}")));
            }
        }
        v.extend(self.train_config().violations().into_iter().map(|s| format!("train.{s}")));
        v
    }

    /// Fills defaults that depend on other keys and validates the result.
    pub fn resolve(&self, command: CommandKind) -> Result<ExperimentConfig> {
        let v = self.violations(command);
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let mut r = self.clone();
        // `rate` picks the default per sample size instead.
        let per_n = matches!(command, CommandKind::Cv | CommandKind::Rate);
        if r.method != Method::Baseline && r.bandwidth.is_none() && !r.cv && !per_n {
            r.bandwidth = Some(default_bandwidth(r.n));
        }
        r.train = r.train_config();
        r.early_stop = Some(r.train.early_stop.is_some());
        if r.deterministic {
            r.workers = 1;
        }
        Ok(r)
    }

    pub fn experiment_spec(&self, n: usize) -> Result<ExperimentSpec> {
        let scenario = self
            .scenario
            .ok_or_else(|| Error::Config(vec!["a scenario is required".into()]))?;
        Ok(ExperimentSpec {
            scenario,
            n,
            test_size: self.test_size,
            arch: self.architecture(),
            taus: self.taus.clone(),
            method: self.method,
            bandwidth: if self.cv { None } else { self.bandwidth },
            cv: self.cv.then(|| CvSpec {
                candidates: self.cv_grid.clone(),
                folds: self.cv_folds,
            }),
            joint: self.joint,
            config: self.train.clone(),
        })
    }

    /// Config with output location removed, for embedding in artifacts.
    fn audit_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out");
        }
        v.to_string()
    }
}

/// Overlays `value` at a dotted key path, creating objects as needed.
fn set_key(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let m = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            m.insert(p.to_string(), value);
            return;
        }
        cur = m.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

#[derive(Parser, Debug)]
#[command(name = "conquer", version, about = "Smoothed quantile ReLU networks and their simulation harness")]
pub struct Cli {
    /// Single worker and reproducible output (also CONQUER_DETERMINISTIC=1).
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a scenario sample to CSV.
    Simulate(ExpArgs),
    /// Fit one model per tau (or one joint model) and save it.
    Train(ExpArgs),
    /// Repeated trials with fresh data, per-trial and summary tables.
    Bench(ExpArgs),
    /// K-fold bandwidth selection.
    Cv(ExpArgs),
    /// Bench over a grid of n and fit log MSE against log n.
    Rate(ExpArgs),
    /// Loss surface along two filter-normalized random directions.
    Landscape(ExpArgs),
    /// Tabulate the check loss and smoothed losses on a grid of residuals.
    LossCurve(LossCurveArgs),
}

/// Flags mirror config keys and take precedence over the config file.
#[derive(Args, Debug, Default)]
pub struct ExpArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<String>,
    /// Real-data CSV file (use with --features and --target).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    #[arg(long)]
    pub target: Option<String>,
    /// Keep only rows where column=value.
    #[arg(long)]
    pub filter: Option<String>,
    /// A, B, landscape or custom.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub residual: Option<bool>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub taus: Option<Vec<f64>>,
    /// baseline, gaussian, uniform or epanechnikov.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub cv: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub cv_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    #[arg(long)]
    pub joint: Option<bool>,
    /// shared or separate.
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub early_stop: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub restore_best: Option<bool>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub n_trials: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent trials for bench and rate.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alpha_range: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta_range: Option<Vec<f64>>,
    #[arg(long)]
    pub direction_seed: Option<u64>,
    /// Leave biases out of the landscape directions.
    #[arg(long)]
    pub exclude_bias: bool,
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    /// Test mode for `rate`: replace training with mse = c·n^(−γ), given as `c,γ`.
    #[arg(long, hide = true, value_delimiter = ',')]
    pub inject_mse: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn pair(name: &str, v: &[f64]) -> Result<Value> {
    match v {
        [a, b] => Ok(json!([a, b])),
        _ => Err(Error::Config(vec![format!("{name} takes two values lo,hi")])),
    }
}

impl ExpArgs {
    /// Config file (if any) with the flags applied on top.
    pub fn to_config(&self, deterministic: bool) -> Result<ExperimentConfig> {
        let mut root = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<Value>(&text)?
            }
            None => json!({}),
        };
        if !root.is_object() {
            return Err(Error::Config(vec!["config file must hold a JSON object".into()]));
        }
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                set_key(&mut root, k, v);
            }
        };
        put("scenario", self.scenario.as_ref().map(|s| json!(s.to_ascii_uppercase())));
        put("csv.path", self.csv.as_ref().map(|p| json!(p)));
        put("csv.features", self.features.as_ref().map(|v| json!(v)));
        put("csv.target", self.target.as_ref().map(|v| json!(v)));
        put("csv.filter", self.filter.as_ref().map(|v| json!(v)));
        put("model", self.model.as_ref().map(|m| match m.as_str() {
            "a" => json!("A"),
            "b" => json!("B"),
            other => json!(other),
        }));
        put("widths", self.widths.as_ref().map(|v| json!(v)));
        put("residual", self.residual.map(|v| json!(v)));
        put("taus", self.taus.as_ref().map(|v| json!(v)));
        put("method", self.method.as_ref().map(|v| json!(v)));
        put("bandwidth", self.bandwidth.map(|v| json!(v)));
        put("cv", self.cv.map(|v| json!(v)));
        put("cv_grid", self.cv_grid.as_ref().map(|v| json!(v)));
        put("cv_folds", self.cv_folds.map(|v| json!(v)));
        put("joint", self.joint.map(|v| json!(v)));
        put("train.heads", self.heads.as_ref().map(|v| json!(v)));
        put("early_stop", self.early_stop.map(|v| json!(v)));
        put("train.max_epochs", self.epochs.map(|v| json!(v)));
        put("train.batch_size", self.batch_size.map(|v| json!(v)));
        put("train.lr", self.lr.map(|v| json!(v)));
        put("train.restore_best", self.restore_best.map(|v| json!(v)));
        put("n", self.n.map(|v| json!(v)));
        put("n_grid", self.n_grid.as_ref().map(|v| json!(v)));
        put("n_trials", self.n_trials.map(|v| json!(v)));
        put("test_size", self.test_size.map(|v| json!(v)));
        put("seed", self.seed.map(|v| json!(v)));
        put("workers", self.workers.map(|v| json!(v)));
        put("landscape.resolution", self.resolution.map(|v| json!(v)));
        put("landscape.seed", self.direction_seed.map(|v| json!(v)));
        put("landscape.bias", self.exclude_bias.then(|| json!("exclude")));
        put("model_file", self.model_file.as_ref().map(|v| json!(v)));
        put("out", self.out.as_ref().map(|v| json!(v)));
        if deterministic {
            put("deterministic", Some(json!(true)));
        }
        if let Some(r) = &self.alpha_range {
            set_key(&mut root, "landscape.alpha_range", pair("alpha_range", r)?);
        }
        if let Some(r) = &self.beta_range {
            set_key(&mut root, "landscape.beta_range", pair("beta_range", r)?);
        }
        if let Some(inj) = &self.inject_mse {
            match inj.as_slice() {
                [c, g] => set_key(&mut root, "rate_injection", json!({"constant": c, "exponent": g})),
                _ => return Err(Error::Config(vec!["inject_mse takes c,gamma".into()])),
            }
        }
        serde_json::from_value(root).map_err(|e| Error::Config(vec![e.to_string()]))
    }
}

#[derive(Args, Debug)]
pub struct LossCurveArgs {
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.2, 0.1])]
    pub bandwidths: Vec<f64>,
    /// Residual grid is [−range, range].
    #[arg(long, default_value_t = 1.0)]
    pub range: f64,
    #[arg(long, default_value_t = 401)]
    pub points: usize,
    #[arg(long, default_value = "conquer-out")]
    pub out: PathBuf,
}

/// Parses `argv`, runs the command and maps failures to one stderr line and
/// a non-zero status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return 2;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let mut line = json!({"error": e.kind(), "message": e.to_string()});
            if let Error::Config(v) = &e {
                line["violations"] = json!(v);
            }
            eprintln!("{line}");
            1
        }
    }
}

fn env_deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

pub fn run(cli: Cli) -> Result<Value> {
    let det = cli.deterministic || env_deterministic();
    let (kind, args) = match &cli.command {
        Command::LossCurve(a) => return loss_curve(a),
        Command::Simulate(a) => (CommandKind::Simulate, a),
        Command::Train(a) => (CommandKind::Train, a),
        Command::Bench(a) => (CommandKind::Bench, a),
        Command::Cv(a) => (CommandKind::Cv, a),
        Command::Rate(a) => (CommandKind::Rate, a),
        Command::Landscape(a) => (CommandKind::Landscape, a),
    };
    run_config(kind, &args.to_config(det)?)
}

/// Resolves `cfg` for `kind`, runs it and returns the JSON summary.
pub fn run_config(kind: CommandKind, cfg: &ExperimentConfig) -> Result<Value> {
    let cfg = cfg.resolve(kind)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| match kind {
        CommandKind::Simulate => simulate(&cfg),
        CommandKind::Train => train(&cfg),
        CommandKind::Bench => bench(&cfg),
        CommandKind::Cv => cv(&cfg),
        CommandKind::Rate => rate(&cfg),
        CommandKind::Landscape => landscape(&cfg),
    })
}

fn comments(schema: &str, cfg: &ExperimentConfig) -> Vec<String> {
    vec![format!("schema: {schema}"), format!("config: {}", cfg.audit_json())]
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn config_value(cfg: &ExperimentConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut().unwrap().remove("out");
    v
}

fn now_unix() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn simulate(cfg: &ExperimentConfig) -> Result<Value> {
    let scenario = cfg.scenario.expect("validated");
    let data = scenario.generate(cfg.n, cfg.seed)?;
    let path = cfg.out.join("data.csv");
    data.write_csv_annotated(&path, &comments("conquer.data/1", cfg))?;
    Ok(json!({"command": "simulate", "rows": data.len(), "outputs": [path]}))
}

/// Training and test data for single-fit commands. The test part carries the
/// true quantiles when the data are simulated.
struct Prepared {
    train: Dataset,
    test: Dataset,
    truth: Option<Vec<Vec<f64>>>,
    source: Value,
}

fn prepare(cfg: &ExperimentConfig, root: &Rng) -> Result<Prepared> {
    if let Some(s) = cfg.scenario {
        let train = s.generate_with(&mut root.split(0), cfg.n)?;
        let test = s.generate_with(&mut root.split(1), cfg.test_size)?;
        let truth = cfg
            .taus
            .iter()
            .map(|&t| s.true_quantiles(&test.x, t))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Prepared {
            train,
            test,
            truth: Some(truth),
            source: json!({"scenario": s.name(), "n": cfg.n, "test_size": cfg.test_size}),
        });
    }
    let c = cfg.csv.as_ref().expect("validated");
    let filter = c.filter.as_deref().map(str::parse::<RowFilter>).transpose()?;
    let (data, report) = load_csv(&c.path, &c.features, &c.target, filter.as_ref())?;
    let parts = split_with(data.len(), &SplitSpec::validation(c.test_fraction), &mut root.split(0))?;
    let (mut train, mut test) = (data.subset(&parts.train), data.subset(&parts.held_out[0]));
    if c.standardize {
        let st = Standardizer::fit(&train);
        train = st.apply(&train);
        test = st.apply(&test);
    }
    Ok(Prepared {
        source: json!({
            "csv": c.path,
            "rows": data.len(),
            "train_rows": train.len(),
            "test_rows": test.len(),
            "load": report,
        }),
        train,
        test,
        truth: None,
    })
}

fn history_csv(path: &Path, history: &[EpochRecord], comments: &[String]) -> Result<()> {
    let rows = history.iter().map(|r| {
        vec![r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.lr.to_string()]
    });
    write_table(path, comments, &["epoch", "train_loss", "val_loss", "lr"], rows)
}

fn test_metrics(fitted: &FittedQuantileModel, p: &Prepared, cols: &[usize]) -> Result<Vec<Value>> {
    let pred = fitted.predict(p.test.x.view())?;
    let y = p.test.y.as_slice().unwrap();
    cols.iter()
        .enumerate()
        .map(|(k, &j)| {
            let col = pred.column(k).to_vec();
            let tau = fitted.losses[k].tau;
            let mut m = json!({"tau": tau, "test_pinball": pinball_risk(&col, y, tau)?});
            if let Some(truth) = &p.truth {
                m["test_mse"] = json!(mse(&col, &truth[j])?);
                m["test_mae"] = json!(mae(&col, &truth[j])?);
            }
            Ok(m)
        })
        .collect()
}

fn loss_for(cfg: &ExperimentConfig, tau: f64, h: Option<f64>) -> Result<LossSpec> {
    cfg.method.loss(tau, h)
}

fn train(cfg: &ExperimentConfig) -> Result<Value> {
    let root = Rng::stream(cfg.seed, 0);
    let p = prepare(cfg, &root)?;
    let arch = cfg.architecture();
    let com = comments("conquer.history/1", cfg);
    let mut outputs = Vec::new();
    let mut fits = Vec::new();
    if cfg.joint {
        let family = loss_for(cfg, cfg.taus[0], cfg.bandwidth)?;
        let fitted = train_noncrossing(&p.train, &arch, &cfg.taus, &family, &cfg.train, root.split(2).key())?;
        for (k, m) in fitted.models.iter().enumerate() {
            let path = cfg.out.join(format!("model_joint_{k}.json"));
            m.save(&path)?;
            outputs.push(path);
        }
        let h = cfg.out.join("history_joint.csv");
        history_csv(&h, &fitted.history, &com)?;
        outputs.push(h);
        let idx: Vec<usize> = (0..cfg.taus.len()).collect();
        fits.push(json!({"joint": true, "epochs": fitted.epochs_run(), "metrics": test_metrics(&fitted, &p, &idx)?}));
    } else {
        for (j, &tau) in cfg.taus.iter().enumerate() {
            let h = if cfg.cv {
                let kernel = cfg.method.kernel().expect("validated");
                Some(
                    cv_bandwidth(&p.train, &arch, tau, kernel, &cfg.cv_grid, cfg.cv_folds, &cfg.train,
                        root.split(1000 + j as u64).key())?
                    .selected,
                )
            } else {
                cfg.bandwidth
            };
            let loss = loss_for(cfg, tau, h)?;
            let fitted = train_single(&p.train, &arch, &loss, &cfg.train, root.split(2 + j as u64).key())?;
            let path = cfg.out.join(format!("model_tau{tau}.json"));
            fitted.models[0].save(&path)?;
            let hist = cfg.out.join(format!("history_tau{tau}.csv"));
            history_csv(&hist, &fitted.history, &com)?;
            outputs.extend([path, hist]);
            let mut m = test_metrics(&fitted, &p, &[j])?.remove(0);
            m["bandwidth"] = json!(h);
            m["epochs"] = json!(fitted.epochs_run());
            fits.push(m);
        }
    }
    let summary = cfg.out.join("train.json");
    write_json(&summary, &json!({
        "schema": "conquer.train/1",
        "config": config_value(cfg),
        "data": p.source,
        "fits": fits,
    }))?;
    outputs.push(summary);
    Ok(json!({"command": "train", "outputs": outputs}))
}

fn bench(cfg: &ExperimentConfig) -> Result<Value> {
    let spec = cfg.experiment_spec(cfg.n)?;
    let started = std::time::Instant::now();
    let report = run_trials(&spec, cfg.n_trials, cfg.seed, cfg.workers)?;
    let trials = cfg.out.join("trials.csv");
    report.write_trials_csv(&trials, &comments(TRIALS_SCHEMA, cfg))?;
    let summary = cfg.out.join("summary.csv");
    report.write_summary_csv(&summary, &comments(SUMMARY_SCHEMA, cfg))?;
    let json_path = cfg.out.join("report.json");
    write_json(&json_path, &json!({
        "schema": REPORT_SCHEMA,
        "config": config_value(cfg),
        "report": report,
        "metadata": {
            "created_unix": now_unix(),
            "wall_seconds": started.elapsed().as_secs_f64(),
        },
    }))?;
    let means: Vec<Value> = report
        .aggregates
        .iter()
        .map(|a| json!({"tau": a.tau, "mse": a.mse.mean, "stderr": a.mse.stderr}))
        .collect();
    Ok(json!({"command": "bench", "cells": means, "outputs": [trials, summary, json_path]}))
}

fn cv(cfg: &ExperimentConfig) -> Result<Value> {
    let root = Rng::stream(cfg.seed, 0);
    let p = prepare(cfg, &root)?;
    let kernel = cfg.method.kernel().expect("validated");
    let arch = cfg.architecture();
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for (j, &tau) in cfg.taus.iter().enumerate() {
        let r = cv_bandwidth(&p.train, &arch, tau, kernel, &cfg.cv_grid, cfg.cv_folds, &cfg.train,
            root.split(1000 + j as u64).key())?;
        for s in &r.scores {
            let mut row = vec![
                tau.to_string(),
                s.bandwidth.to_string(),
                s.mean_pinball.to_string(),
                u8::from(s.bandwidth == r.selected).to_string(),
            ];
            row.extend(s.fold_pinball.iter().map(f64::to_string));
            rows.push(row);
        }
        results.push(json!({"tau": tau, "result": r}));
    }
    let folds: Vec<String> = (1..=cfg.cv_folds).map(|k| format!("fold_{k}")).collect();
    let mut header = vec!["tau", "bandwidth", "mean_pinball", "selected"];
    header.extend(folds.iter().map(String::as_str));
    let csv_path = cfg.out.join("cv.csv");
    write_table(&csv_path, &comments("conquer.cv/1", cfg), &header, rows)?;
    let json_path = cfg.out.join("cv.json");
    write_json(&json_path, &json!({
        "schema": "conquer.cv/1",
        "config": config_value(cfg),
        "data": p.source,
        "results": results,
    }))?;
    let selected: Vec<Value> = results
        .iter()
        .map(|r| json!({"tau": r["tau"], "bandwidth": r["result"]["selected"]}))
        .collect();
    Ok(json!({"command": "cv", "selected": selected, "outputs": [csv_path, json_path]}))
}

fn rate(cfg: &ExperimentConfig) -> Result<Value> {
    let mut ns = cfg.n_grid.clone();
    ns.sort_unstable();
    ns.dedup();
    // (tau, n, bandwidth, mse summary)
    let mut points: Vec<(f64, usize, Option<f64>, MeanStderr)> = Vec::new();
    for &n in &ns {
        match cfg.rate_injection {
            Some(inj) => {
                let m = inj.constant * (n as f64).powf(-inj.exponent);
                points.extend(cfg.taus.iter().map(|&t| (t, n, cfg.bandwidth, MeanStderr { mean: m, stderr: 0.0 })));
            }
            None => {
                let mut run_cfg = cfg.clone();
                if cfg.method != Method::Baseline && !cfg.cv {
                    run_cfg.bandwidth = Some(cfg.bandwidth.unwrap_or_else(|| default_bandwidth(n)));
                }
                let report = run_trials(&run_cfg.experiment_spec(n)?, cfg.n_trials, cfg.seed, cfg.workers)?;
                let h = run_cfg.bandwidth;
                points.extend(report.aggregates.iter().map(|a| (a.tau, n, h, a.mse)));
            }
        }
    }
    let mut fits = Vec::new();
    for &tau in &cfg.taus {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.0 == tau)
            .map(|p| (p.1 as f64, p.3.mean))
            .collect();
        let f = rate_fit(&pts)?;
        fits.push(json!({"tau": tau, "slope": f.slope, "intercept": f.intercept, "r_squared": f.r_squared}));
    }
    let csv_path = cfg.out.join("rate_points.csv");
    let rows = points.iter().map(|(t, n, h, m)| {
        let h = h.map(|h| h.to_string()).unwrap_or_default();
        vec![t.to_string(), n.to_string(), h, m.mean.to_string(), m.stderr.to_string()]
    });
    let header = ["tau", "n", "bandwidth", "mse_mean", "mse_stderr"];
    write_table(&csv_path, &comments("conquer.rate_points/1", cfg), &header, rows)?;
    let json_path = cfg.out.join("rate.json");
    write_json(&json_path, &json!({
        "schema": "conquer.rate/1",
        "config": config_value(cfg),
        "fits": fits,
    }))?;
    Ok(json!({"command": "rate", "fits": fits, "outputs": [csv_path, json_path]}))
}

fn landscape(cfg: &ExperimentConfig) -> Result<Value> {
    let root = Rng::stream(cfg.seed, 0);
    let p = prepare(cfg, &root)?;
    let tau = cfg.taus[0];
    let loss = loss_for(cfg, tau, cfg.bandwidth)?;
    let model = match &cfg.model_file {
        Some(path) => MlpModel::load(path)?,
        None => train_single(&p.train, &cfg.architecture(), &loss, &cfg.train, root.split(2).key())?
            .models
            .remove(0),
    };
    let (d1, d2) = direction_pair(&model, &cfg.landscape);
    let s = surface(&model, &d1, &d2, &cfg.landscape, &p.train, &loss)?;
    let csv_path = cfg.out.join("landscape.csv");
    s.write_csv(&csv_path, &comments("conquer.landscape/1", cfg))?;
    let json_path = cfg.out.join("landscape.json");
    let finite: Vec<f64> = s.values.iter().copied().filter(|v| v.is_finite()).collect();
    write_json(&json_path, &json!({
        "schema": "conquer.landscape/1",
        "config": config_value(cfg),
        "base_loss": s.base_loss,
        "base_loss_check": full_loss(&model, &p.train, &loss)?,
        "min_loss": finite.iter().copied().fold(f64::INFINITY, f64::min),
        "max_loss": finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "non_finite_cells": s.values.len() - finite.len(),
        "bias_mode": match cfg.landscape.bias { BiasMode::PerNeuron => "per_neuron", BiasMode::Exclude => "exclude" },
    }))?;
    Ok(json!({"command": "landscape", "base_loss": s.base_loss, "outputs": [csv_path, json_path]}))
}

fn loss_curve(a: &LossCurveArgs) -> Result<Value> {
    let mut v = Vec::new();
    if !(a.tau > 0.0 && a.tau < 1.0) {
        v.push(format!("tau must lie in (0, 1), got {}", a.tau));
    }
    if a.bandwidths.is_empty() || a.bandwidths.iter().any(|h| !(*h > 0.0)) {
        v.push("bandwidths must be non-empty and positive".into());
    }
    if a.points < 2 {
        v.push("points must be at least 2".into());
    }
    if !(a.range > 0.0) {
        v.push("range must be positive".into());
    }
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let specs: Vec<(String, LossSpec)> = KernelKind::ALL
        .iter()
        .flat_map(|&k| a.bandwidths.iter().map(move |&h| (k, h)))
        .map(|(k, h)| Ok((format!("{}_h{h}", k.name()), LossSpec::smoothed(a.tau, k, h)?)))
        .collect::<Result<_>>()?;
    let mut header = vec!["u", "pinball"];
    header.extend(specs.iter().map(|s| s.0.as_str()));
    let step = 2.0 * a.range / (a.points - 1) as f64;
    let rows = (0..a.points).map(|i| {
        let u = -a.range + i as f64 * step;
        let mut row = vec![u.to_string(), pinball(u, a.tau).to_string()];
        row.extend(specs.iter().map(|(_, s)| s.value(u).to_string()));
        row
    });
    let path = a.out.join("loss_curves.csv");
    let args = json!({"tau": a.tau, "bandwidths": a.bandwidths, "range": a.range, "points": a.points});
    write_table(&path, &["schema: conquer.loss_curves/1".into(), format!("config: {args}")], &header, rows)?;
    Ok(json!({"command": "loss-curve", "outputs": [path]}))
}
