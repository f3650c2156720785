//! Test metrics, the repeated-trial benchmark protocol and the log-log rate fit.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{pinball, KernelKind, LossSpec};
use crate::network::Architecture;
use crate::numerics::Rng;
use crate::scenarios::{Dataset, Scenario};
use crate::trainer::{
    cv_bandwidth, train_noncrossing, train_single, FittedQuantileModel, TrainConfig,
    DEFAULT_CV_GRID,
};

const STREAM_DATA: u64 = 0;
const STREAM_TEST: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_CV: u64 = 1000;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "metric inputs must have equal non-zero length, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean check loss of `y − pred`.
pub fn pinball_risk(pred: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    check_lengths(pred, y)?;
    Ok(pred.iter().zip(y).map(|(p, yi)| pinball(yi - p, tau)).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Gaussian,
    Uniform,
    Epanechnikov,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Gaussian => "gaussian",
            Method::Uniform => "uniform",
            Method::Epanechnikov => "epanechnikov",
        }
    }

    pub fn kernel(self) -> Option<KernelKind> {
        match self {
            Method::Baseline => None,
            Method::Gaussian => Some(KernelKind::Gaussian),
            Method::Uniform => Some(KernelKind::Uniform),
            Method::Epanechnikov => Some(KernelKind::Epanechnikov),
        }
    }

    pub fn loss(self, tau: f64, bandwidth: Option<f64>) -> Result<LossSpec> {
        match (self.kernel(), bandwidth) {
            (None, None) => LossSpec::pinball(tau),
            (None, Some(_)) => Err(Error::InvalidArgument(
                "the baseline method takes no bandwidth".into(),
            )),
            (Some(k), Some(h)) => LossSpec::smoothed(tau, k, h),
            (Some(_), None) => Err(Error::InvalidArgument(format!(
                "{} smoothing needs a bandwidth",
                self.name()
            ))),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "pinball" => Ok(Method::Baseline),
            "gaussian" => Ok(Method::Gaussian),
            "uniform" => Ok(Method::Uniform),
            "epanechnikov" => Ok(Method::Epanechnikov),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    pub candidates: Vec<f64>,
    pub folds: usize,
}

impl Default for CvSpec {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CV_GRID.to_vec(),
            folds: 5,
        }
    }
}

/// One benchmark cell: scenario, sample size, network, method and levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub test_size: usize,
    pub arch: Architecture,
    pub taus: Vec<f64>,
    pub method: Method,
    /// Fixed bandwidth; ignored when `cv` is set.
    pub bandwidth: Option<f64>,
    pub cv: Option<CvSpec>,
    /// Fit all levels jointly with the non-crossing transform.
    pub joint: bool,
    pub config: TrainConfig,
}

impl ExperimentSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.config.violations();
        if self.n < 2 {
            v.push("n must be at least 2".into());
        }
        if self.test_size == 0 {
            v.push("test_size must be positive".into());
        }
        if self.arch.input_dim != self.scenario.dim() {
            v.push(format!(
                "architecture input_dim {} differs from {} dimension {}",
                self.arch.input_dim,
                self.scenario.name(),
                self.scenario.dim()
            ));
        }
        if let Err(e) = self.arch.validate() {
            v.push(e.to_string());
        }
        if self.taus.is_empty() {
            v.push("at least one quantile level is required".into());
        }
        if self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            v.push(format!("quantile levels must lie in (0, 1), got {:?}", self.taus));
        }
        if self.taus.windows(2).any(|w| !(w[0] < w[1])) {
            v.push("quantile levels must be strictly increasing".into());
        }
        if self.joint && self.taus.len() < 2 {
            v.push("joint estimation needs at least two quantile levels".into());
        }
        match self.method {
            Method::Baseline => {
                if self.bandwidth.is_some() {
                    v.push("method=baseline forbids a bandwidth".into());
                }
                if self.cv.is_some() {
                    v.push("method=baseline forbids bandwidth cross-validation".into());
                }
            }
            _ => {
                if self.cv.is_none() && self.bandwidth.is_none() {
                    v.push(format!("method={} needs a bandwidth or cv", self.method.name()));
                }
                if let Some(h) = self.bandwidth {
                    if !(h > 0.0) {
                        v.push(format!("bandwidth must be positive, got {h}"));
                    }
                }
                if let Some(cv) = &self.cv {
                    if cv.folds < 2 {
                        v.push("cv.folds must be at least 2".into());
                    }
                    if cv.candidates.is_empty() || cv.candidates.iter().any(|h| !(*h > 0.0)) {
                        v.push("cv.candidates must be non-empty and positive".into());
                    }
                    if self.joint {
                        v.push("cv is only available for single-quantile fits".into());
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub method: Method,
    pub tau: f64,
    pub n: usize,
    pub bandwidth: Option<f64>,
    pub epochs: usize,
    pub test_mse: f64,
    pub test_mae: f64,
    pub test_pinball: f64,
    /// Wall time of the fit in seconds, millisecond resolution.
    pub train_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    /// Mean and `sd/√n` (zero for a single value). Summation is over sorted
    /// values so the result does not depend on input order.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if v.len() < 2 {
            return Self { mean, stderr: 0.0 };
        }
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        let var = dev.iter().sum::<f64>() / (n - 1.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub tau: f64,
    pub n_trials: usize,
    pub mse: MeanStderr,
    pub mae: MeanStderr,
    pub pinball: MeanStderr,
    pub train_seconds: MeanStderr,
    pub epochs: MeanStderr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub spec: ExperimentSpec,
    pub base_seed: u64,
    pub n_trials: usize,
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<CellAggregate>,
}

/// Groups records by `τ` (ascending) and summarizes each group.
pub fn aggregate(records: &[TrialRecord]) -> Vec<CellAggregate> {
    let mut taus: Vec<f64> = records.iter().map(|r| r.tau).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus.into_iter()
        .map(|tau| {
            let group: Vec<&TrialRecord> = records.iter().filter(|r| r.tau == tau).collect();
            let col = |f: fn(&TrialRecord) -> f64| -> Vec<f64> { group.iter().map(|r| f(r)).collect() };
            CellAggregate {
                tau,
                n_trials: group.len(),
                mse: MeanStderr::of(&col(|r| r.test_mse)),
                mae: MeanStderr::of(&col(|r| r.test_mae)),
                pinball: MeanStderr::of(&col(|r| r.test_pinball)),
                train_seconds: MeanStderr::of(&col(|r| r.train_seconds)),
                epochs: MeanStderr::of(&col(|r| r.epochs as f64)),
            }
        })
        .collect()
}

fn score(
    fitted: &FittedQuantileModel,
    test: &Dataset,
    truths: &[Vec<f64>],
) -> Result<Vec<(f64, f64, f64)>> {
    let pred = fitted.predict(test.x.view())?;
    let y = test.y.as_slice().unwrap();
    truths
        .iter()
        .enumerate()
        .map(|(j, truth)| {
            let p = pred.column(j).to_vec();
            Ok((
                mse(&p, truth)?,
                mae(&p, truth)?,
                pinball_risk(&p, y, fitted.losses[j].tau)?,
            ))
        })
        .collect()
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    let secs = (start.elapsed().as_secs_f64() * 1000.0).round() / 1000.0;
    Ok((out, secs))
}

/// Runs one trial: fresh training and test data from the trial's streams,
/// then one fit per level (or one joint fit).
pub fn run_trial(spec: &ExperimentSpec, trial: usize, base_seed: u64) -> Result<Vec<TrialRecord>> {
    let root = Rng::stream(base_seed, trial as u64);
    let train = spec
        .scenario
        .generate_with(&mut root.split(STREAM_DATA), spec.n)?;
    let test = spec
        .scenario
        .generate_with(&mut root.split(STREAM_TEST), spec.test_size)?;
    let truths = spec
        .taus
        .iter()
        .map(|&t| spec.scenario.true_quantiles(&test.x, t))
        .collect::<Result<Vec<_>>>()?;

    let record = |tau: f64, h: Option<f64>, fitted: &FittedQuantileModel, secs: f64, m: (f64, f64, f64)| {
        TrialRecord {
            trial,
            seed: root.key(),
            scenario: spec.scenario,
            method: spec.method,
            tau,
            n: spec.n,
            bandwidth: h,
            epochs: fitted.epochs_run(),
            test_mse: m.0,
            test_mae: m.1,
            test_pinball: m.2,
            train_seconds: secs,
        }
    };

    if spec.joint {
        let family = spec.method.loss(spec.taus[0], spec.bandwidth)?;
        let seed = root.split(STREAM_TRAIN).key();
        let (fitted, secs) =
            timed(|| train_noncrossing(&train, &spec.arch, &spec.taus, &family, &spec.config, seed))?;
        let metrics = score(&fitted, &test, &truths)?;
        return Ok(spec
            .taus
            .iter()
            .zip(metrics)
            .map(|(&tau, m)| record(tau, spec.bandwidth, &fitted, secs, m))
            .collect());
    }

    let mut out = Vec::with_capacity(spec.taus.len());
    for (j, &tau) in spec.taus.iter().enumerate() {
        let h = match (&spec.cv, spec.method.kernel()) {
            (Some(cv), Some(kernel)) => Some(
                cv_bandwidth(
                    &train,
                    &spec.arch,
                    tau,
                    kernel,
                    &cv.candidates,
                    cv.folds,
                    &spec.config,
                    root.split(STREAM_CV + j as u64).key(),
                )?
                .selected,
            ),
            _ => spec.bandwidth,
        };
        let loss = spec.method.loss(tau, h)?;
        let seed = root.split(STREAM_TRAIN + j as u64).key();
        let (fitted, secs) = timed(|| train_single(&train, &spec.arch, &loss, &spec.config, seed))?;
        let metrics = score(&fitted, &test, &truths[j..j + 1])?;
        out.push(record(tau, h, &fitted, secs, metrics[0]));
    }
    Ok(out)
}

/// Runs `n_trials` independent trials on up to `workers` threads. Records are
/// ordered by trial index, then `τ`, regardless of completion order.
pub fn run_trials(
    spec: &ExperimentSpec,
    n_trials: usize,
    base_seed: u64,
    workers: usize,
) -> Result<TrialReport> {
    spec.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    let run = || -> Result<Vec<Vec<TrialRecord>>> {
        use rayon::prelude::*;
        (0..n_trials)
            .into_par_iter()
            .map(|t| {
                run_trial(spec, t, base_seed).map_err(|e| Error::Trial {
                    trial: t,
                    source: Box::new(e),
                })
            })
            .collect()
    };
    let per_trial = if workers <= 1 {
        (0..n_trials)
            .map(|t| {
                run_trial(spec, t, base_seed).map_err(|e| Error::Trial {
                    trial: t,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(run)?
    };
    let records: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();
    Ok(TrialReport {
        spec: spec.clone(),
        base_seed,
        n_trials,
        aggregates: aggregate(&records),
        records,
    })
}

pub const TRIALS_SCHEMA: &str = "conquer.trials/1";
pub const SUMMARY_SCHEMA: &str = "conquer.summary/1";
pub const REPORT_SCHEMA: &str = "conquer.report/1";

/// Writes `# `-prefixed comment lines, then a headered CSV table.
pub fn write_table(
    path: &Path,
    comments: &[String],
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for c in comments {
        writeln!(file, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|h| h.to_string()).unwrap_or_default()
}

impl TrialReport {
    /// One row per (trial, τ). Timings are left out so reruns compare equal.
    pub fn write_trials_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let header = [
            "trial", "seed", "scenario", "method", "tau", "n", "bandwidth", "epochs",
            "test_mse", "test_mae", "test_pinball",
        ];
        let rows = self.records.iter().map(|r| {
            vec![
                r.trial.to_string(),
                r.seed.to_string(),
                r.scenario.name().to_string(),
                r.method.name().to_string(),
                r.tau.to_string(),
                r.n.to_string(),
                opt(r.bandwidth),
                r.epochs.to_string(),
                r.test_mse.to_string(),
                r.test_mae.to_string(),
                r.test_pinball.to_string(),
            ]
        });
        write_table(path, comments, &header, rows)
    }

    /// One row per τ with means and standard errors over trials.
    pub fn write_summary_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let header = [
            "scenario", "method", "n", "tau", "n_trials", "mse_mean", "mse_stderr",
            "mae_mean", "mae_stderr", "pinball_mean", "pinball_stderr", "epochs_mean",
        ];
        let rows = self.aggregates.iter().map(|a| {
            vec![
                self.spec.scenario.name().to_string(),
                self.spec.method.name().to_string(),
                self.spec.n.to_string(),
                a.tau.to_string(),
                a.n_trials.to_string(),
                a.mse.mean.to_string(),
                a.mse.stderr.to_string(),
                a.mae.mean.to_string(),
                a.mae.stderr.to_string(),
                a.pinball.mean.to_string(),
                a.pinball.stderr.to_string(),
                a.epochs.mean.to_string(),
            ]
        });
        write_table(path, comments, &header, rows)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line of `ln(mse)` on `ln(n)`.
pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.iter().any(|&(n, m)| !(m > 0.0) || !(n > 0.0)) {
        return Err(Error::InvalidArgument(
            "rate fit needs positive sample sizes and MSEs".into(),
        ));
    }
    let mut ns: Vec<f64> = points.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    if ns.len() < 2 {
        return Err(Error::InvalidArgument(
            "rate fit needs at least two distinct sample sizes".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let t = [0.5, 1.5, -2.0];
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn pinball_risk_examples() {
        assert_eq!(pinball_risk(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        assert_eq!(pinball_risk(&[0.0, 0.0], &[1.0, -1.0], 0.25).unwrap(), 0.5);
    }

    #[test]
    fn metrics_match_loops() {
        let mut rng = Rng::new(4);
        let a: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
        let (mut s2, mut s1) = (0.0, 0.0);
        for i in 0..1000 {
            s2 += (a[i] - b[i]) * (a[i] - b[i]);
            s1 += (a[i] - b[i]).abs();
        }
        assert!((mse(&a, &b).unwrap() - s2 / 1000.0).abs() < 1e-12);
        assert!((mae(&a, &b).unwrap() - s1 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_quantile_minimizes_risk_over_constants() {
        let mut rng = Rng::new(6);
        let mut y: Vec<f64> = (0..501).map(|_| rng.normal()).collect();
        let tau = 0.3;
        let risk = |c: f64| pinball_risk(&vec![c; y.len()], &y, tau).unwrap();
        let mut sorted = y.clone();
        sorted.sort_by(f64::total_cmp);
        let q = sorted[(tau * y.len() as f64).ceil() as usize - 1];
        let best = risk(q);
        for i in -300..=300 {
            assert!(risk(q + i as f64 * 0.01) >= best - 1e-12);
        }
        y.clear();
    }

    #[test]
    fn stderr_definition() {
        let s = MeanStderr::of(&[0.01]);
        assert_eq!((s.mean, s.stderr), (0.01, 0.0));
        let s = MeanStderr::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStderr::of(&[4.0, 1.0, 3.0, 2.0]), s);
    }

    #[test]
    fn rate_fit_recovers_exponents() {
        let pts: Vec<(f64, f64)> = [500.0, 1000.0, 2000.0, 4000.0]
            .iter()
            .map(|&n| (n, 2.0 / n))
            .collect();
        assert!((rate_fit(&pts).unwrap().slope + 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [1000.0, 3000.0, 5000.0, 7000.0, 10000.0]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powf(-0.7)))
            .collect();
        let fit = rate_fit(&pts).unwrap();
        assert!((fit.slope + 0.7).abs() < 1e-10);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);
        let two = rate_fit(&[(10.0, 1.0), (100.0, 0.3)]).unwrap();
        assert!((two.r_squared - 1.0).abs() < 1e-12);
        assert!(rate_fit(&[(10.0, 1.0), (10.0, 0.5)]).is_err());
        assert!(rate_fit(&[(10.0, 0.0), (20.0, 0.5)]).is_err());
    }

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            scenario: Scenario::S1,
            n: 200,
            test_size: 300,
            arch: Architecture::new(2, vec![8], 1),
            taus: vec![0.25, 0.75],
            method: Method::Gaussian,
            bandwidth: Some(0.05),
            cv: None,
            joint: false,
            config: TrainConfig {
                max_epochs: 3,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn single_trial_aggregate_is_the_record() {
        let r = run_trials(&tiny_spec(), 1, 3, 1).unwrap();
        assert_eq!(r.records.len(), 2);
        for (a, rec) in r.aggregates.iter().zip(&r.records) {
            assert_eq!(a.tau, rec.tau);
            assert_eq!(a.mse, MeanStderr { mean: rec.test_mse, stderr: 0.0 });
        }
    }

    #[test]
    fn reports_repeat_and_ignore_worker_count() {
        let spec = tiny_spec();
        let strip = |mut r: TrialReport| {
            r.records.iter_mut().for_each(|x| x.train_seconds = 0.0);
            aggregate(&r.records)
        };
        let a = run_trials(&spec, 3, 8, 1).unwrap();
        let b = run_trials(&spec, 3, 8, 2).unwrap();
        assert_eq!(
            a.records.iter().map(|r| r.test_mse).collect::<Vec<_>>(),
            b.records.iter().map(|r| r.test_mse).collect::<Vec<_>>()
        );
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn aggregates_ignore_trial_order() {
        let r = run_trials(&tiny_spec(), 3, 2, 1).unwrap();
        let mut rev = r.records.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev), r.aggregates);
    }

    #[test]
    fn joint_trial_reports_every_level() {
        let mut spec = tiny_spec();
        spec.joint = true;
        spec.arch = spec.arch.with_outputs(2);
        let r = run_trials(&spec, 1, 1, 1).unwrap();
        assert_eq!(r.records.iter().map(|x| x.tau).collect::<Vec<_>>(), vec![0.25, 0.75]);
    }

    #[test]
    fn report_round_trips() {
        let r = run_trials(&tiny_spec(), 2, 5, 1).unwrap();
        assert_eq!(TrialReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        r.write_trials_csv(&p, &["schema x".into()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# schema x"));
        assert!(lines.next().unwrap().starts_with("trial,seed,scenario"));
        assert_eq!(text.lines().count(), 2 + 4);
    }

    #[test]
    fn trial_errors_carry_index() {
        let mut spec = tiny_spec();
        spec.joint = true;
        match run_trials(&spec, 2, 0, 1) {
            Err(Error::Trial { trial: 0, source }) => {
                assert_eq!(source.kind(), "invalid_argument", "{source}")
            }
            other => panic!("{:?}", other.map(|r| r.records)),
        }
    }

    #[test]
    fn spec_validation_collects_every_violation() {
        let spec = ExperimentSpec {
            scenario: Scenario::S1,
            n: 1,
            test_size: 0,
            arch: Architecture::model_a(5),
            taus: vec![0.5, 0.25],
            method: Method::Baseline,
            bandwidth: Some(0.1),
            cv: None,
            joint: false,
            config: TrainConfig::default(),
        };
        match spec.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 5, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }
}
