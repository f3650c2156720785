//! Mini-batch training for single quantiles and for jointly estimated,
//! non-crossing quantile grids, plus K-fold bandwidth selection.

use std::io::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{KernelKind, LossSpec};
use crate::network::{Architecture, MlpModel};
use crate::numerics::Rng;
use crate::optimizer::{sgd_step, EarlyStop, PlateauScheduler, SgdState};
use crate::scenarios::{split_with, Dataset, SplitSpec};

const STREAM_SPLIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_INIT: u64 = 2;

/// Default bandwidth grid for cross-validation.
pub const DEFAULT_CV_GRID: [f64; 5] = [0.001, 0.005, 0.01, 0.05, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub lr_threshold: f64,
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            lr_threshold: 1e-4,
            patience: 5,
        }
    }
}

/// How a joint model produces its `m + 1` raw outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// One network with `m + 1` output units.
    #[default]
    Shared,
    /// `m + 1` networks with one output each.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub lr_factor: f64,
    pub lr_patience: usize,
    /// `None` trains for all `max_epochs`.
    pub early_stop: Option<EarlyStopConfig>,
    pub val_fraction: f64,
    pub deterministic: bool,
    /// Return the epoch with the lowest validation loss instead of the last one.
    pub restore_best: bool,
    pub heads: HeadLayout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            lr_factor: 0.5,
            lr_patience: 5,
            early_stop: Some(EarlyStopConfig::default()),
            val_fraction: 0.1,
            deterministic: true,
            restore_best: false,
            heads: HeadLayout::Shared,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be positive".to_string());
        }
        if self.max_epochs == 0 {
            v.push("max_epochs must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            v.push(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            v.push(format!(
                "val_fraction must lie in (0, 0.5), got {}",
                self.val_fraction
            ));
        }
        if let Some(es) = &self.early_stop {
            if !(es.lr_threshold > 0.0) {
                v.push("early_stop.lr_threshold must be positive".to_string());
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedQuantileModel {
    /// One network, or `m + 1` networks for [`HeadLayout::Separate`].
    pub models: Vec<MlpModel>,
    /// Loss per quantile level, ascending in `τ`.
    pub losses: Vec<LossSpec>,
    /// Whether outputs pass through the cumulative softplus transform.
    pub joint: bool,
    pub history: Vec<EpochRecord>,
}

impl FittedQuantileModel {
    pub fn taus(&self) -> Vec<f64> {
        self.losses.iter().map(|l| l.tau).collect()
    }

    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    /// Raw network outputs, concatenated column-wise.
    pub fn raw_outputs(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        raw_outputs(&self.models, x)
    }

    /// Predicted quantiles, one column per `τ`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let g = self.raw_outputs(x)?;
        Ok(if self.joint { cumulative_softplus(&g) } else { g })
    }

    /// Objective on a dataset: mean loss, summed over quantile levels.
    pub fn objective(&self, data: &Dataset) -> Result<f64> {
        let pred = self.predict(data.x.view())?;
        Ok(objective_value(&pred, data.y.as_slice().unwrap(), &self.losses))
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        write_history_csv(&self.history, path)
    }
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        body.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `f₀ = g₀`, `f_j = g₀ + Σ_{l=1..j} softplus(g_l)`.
///
/// An increment smaller than half an ulp of the running sum would round away
/// and tie two levels, so the sum then steps to the next float. This moves
/// `f` by under one ulp and keeps the levels strictly ordered.
pub fn cumulative_softplus(g: &Array2<f64>) -> Array2<f64> {
    let mut f = g.clone();
    for mut row in f.rows_mut() {
        for j in 1..row.len() {
            let prev = row[j - 1];
            row[j] = (prev + softplus(row[j])).max(prev.next_up());
        }
    }
    f
}

fn raw_outputs(models: &[MlpModel], x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if models.len() == 1 {
        return models[0].predict(x);
    }
    let outs = models
        .iter()
        .map(|m| m.predict(x))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn objective_value(pred: &Array2<f64>, y: &[f64], losses: &[LossSpec]) -> f64 {
    let n = y.len() as f64;
    losses
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            pred.column(j)
                .iter()
                .zip(y)
                .map(|(f, yi)| spec.value(yi - f))
                .sum::<f64>()
                / n
        })
        .sum()
}

/// Objective and its gradient with respect to the raw outputs `g`.
///
/// For joint models, `∂L/∂g₀ = Σ_j a_j` and `∂L/∂g_l = σ(g_l)·Σ_{j≥l} a_j`
/// where `a_j = ∂L/∂f_j`.
pub fn objective_and_grad(
    g: &Array2<f64>,
    y: &[f64],
    losses: &[LossSpec],
    joint: bool,
) -> (f64, Array2<f64>) {
    let n = y.len();
    let inv_n = 1.0 / n as f64;
    let pred = if joint { cumulative_softplus(g) } else { g.clone() };
    let mut total = 0.0;
    let mut d_f = Array2::zeros(pred.raw_dim());
    for (j, spec) in losses.iter().enumerate() {
        for i in 0..n {
            let r = y[i] - pred[[i, j]];
            total += spec.value(r);
            d_f[[i, j]] = -spec.derivative(r) * inv_n;
        }
    }
    let loss = total * inv_n;
    if !joint {
        return (loss, d_f);
    }
    let k = losses.len();
    let mut d_g = Array2::zeros(g.raw_dim());
    for i in 0..n {
        let mut tail = 0.0;
        for j in (1..k).rev() {
            tail += d_f[[i, j]];
            d_g[[i, j]] = sigmoid(g[[i, j]]) * tail;
        }
        d_g[[i, 0]] = tail + d_f[[i, 0]];
    }
    (loss, d_g)
}

fn check_taus(losses: &[LossSpec]) -> Result<()> {
    for l in losses {
        l.validate()?;
    }
    if losses.windows(2).any(|w| !(w[0].tau < w[1].tau)) {
        return Err(Error::InvalidArgument(
            "quantile levels must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Shared loop behind [`train_single`] and [`train_noncrossing`].
fn fit(
    data: &Dataset,
    archs: &[Architecture],
    losses: Vec<LossSpec>,
    joint: bool,
    config: &TrainConfig,
    seed: u64,
) -> Result<FittedQuantileModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let root = Rng::new(seed);
    let parts = split_with(
        data.len(),
        &SplitSpec::validation(config.val_fraction),
        &mut root.split(STREAM_SPLIT),
    )?;
    let train = data.subset(&parts.train);
    let val = data.subset(&parts.held_out[0]);
    let val_y = val.y.as_slice().unwrap().to_vec();

    let mut models = archs
        .iter()
        .enumerate()
        .map(|(j, a)| MlpModel::init(a, &mut root.split(STREAM_INIT + j as u64)))
        .collect::<Result<Vec<_>>>()?;
    for (m, a) in models.iter().zip(archs) {
        if m.architecture().input_dim != data.dim() {
            return Err(Error::Shape(format!(
                "architecture expects {} inputs, dataset has {}",
                a.input_dim,
                data.dim()
            )));
        }
    }
    let mut states: Vec<SgdState> = models
        .iter()
        .map(|m| SgdState::new(m, config.momentum, config.nesterov))
        .collect();
    let mut sched = PlateauScheduler::new(config.lr, config.lr_factor, config.lr_patience);
    let mut stop = config
        .early_stop
        .map(|es| EarlyStop::new(es.lr_threshold, es.patience));
    let mut shuffle = root.split(STREAM_SHUFFLE);
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<MlpModel>)> = None;

    let n = train.len();
    for epoch in 1..=config.max_epochs {
        let lr = sched.lr;
        let order = shuffle.permutation(n);
        let mut weighted = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let xb = train.x.select(Axis(0), idx);
            let yb: Vec<f64> = idx.iter().map(|&i| train.y[i]).collect();
            let mut caches = Vec::with_capacity(models.len());
            let mut outs = Vec::with_capacity(models.len());
            for m in &models {
                let (o, c) = m.forward(xb.view())?;
                outs.push(o);
                caches.push(c);
            }
            let g = if outs.len() == 1 {
                outs.pop().unwrap()
            } else {
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?
            };
            let (loss, d_g) = objective_and_grad(&g, &yb, &losses, joint);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    detail: format!("batch loss {loss}"),
                });
            }
            weighted += loss * idx.len() as f64;
            let mut col = 0;
            for ((m, c), st) in models.iter_mut().zip(&caches).zip(&mut states) {
                let k = m.architecture().n_outputs;
                let grads = m.backward(c, d_g.slice(s![.., col..col + k]))?;
                col += k;
                sgd_step(m, &grads, st, lr).map_err(|e| Error::Diverged {
                    epoch,
                    batch,
                    detail: e.to_string(),
                })?;
            }
        }
        let train_loss = weighted / n as f64;
        let pred = raw_outputs(&models, val.x.view())?;
        let pred = if joint { cumulative_softplus(&pred) } else { pred };
        let val_loss = objective_value(&pred, &val_y, &losses);
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                detail: format!("validation loss {val_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if config.restore_best && best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, models.clone()));
        }
        let next_lr = sched.update(val_loss);
        if let Some(stop) = stop.as_mut() {
            if stop.observe(next_lr, val_loss) {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        models = m;
    }
    Ok(FittedQuantileModel {
        models,
        losses,
        joint,
        history,
    })
}

/// Fits one quantile level with the given loss.
pub fn train_single(
    data: &Dataset,
    arch: &Architecture,
    loss: &LossSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<FittedQuantileModel> {
    loss.validate()?;
    if arch.n_outputs != 1 {
        return Err(Error::InvalidArgument(format!(
            "single-quantile training needs one output, architecture has {}",
            arch.n_outputs
        )));
    }
    fit(data, std::slice::from_ref(arch), vec![*loss], false, config, seed)
}

/// Fits `τ₀ < … < τ_m` jointly through cumulative softplus increments, so the
/// predicted quantiles never cross.
///
/// `arch.n_outputs` must be `m + 1` for [`HeadLayout::Shared`] and 1 for
/// [`HeadLayout::Separate`]. `family` supplies the loss family; its `τ` is
/// replaced by each level in turn.
pub fn train_noncrossing(
    data: &Dataset,
    arch: &Architecture,
    taus: &[f64],
    family: &LossSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<FittedQuantileModel> {
    if taus.len() < 2 {
        return Err(Error::InvalidArgument(
            "joint estimation needs at least two quantile levels".into(),
        ));
    }
    let losses = taus
        .iter()
        .map(|&t| family.with_tau(t))
        .collect::<Result<Vec<_>>>()?;
    check_taus(&losses)?;
    let archs = match config.heads {
        HeadLayout::Shared => {
            if arch.n_outputs != taus.len() {
                return Err(Error::InvalidArgument(format!(
                    "shared joint model needs {} outputs, architecture has {}",
                    taus.len(),
                    arch.n_outputs
                )));
            }
            vec![arch.clone()]
        }
        HeadLayout::Separate => vec![arch.clone().with_outputs(1); taus.len()],
    };
    fit(data, &archs, losses, true, config, seed)
}

/// K near-equal folds of a seeded permutation of `0..n`.
pub fn kfold_indices(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "cannot make {k} folds from {n} rows"
        )));
    }
    let perm = rng.permutation(n);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub bandwidth: f64,
    pub mean_pinball: f64,
    pub fold_pinball: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub selected: f64,
    pub scores: Vec<CvScore>,
}

/// Generic K-fold selection: `score(h, fold, train_idx, held_idx)` returns the
/// held-out loss, and the candidate with the lowest mean wins (ties go to the
/// smaller `h`).
pub fn cv_select<F>(n: usize, candidates: &[f64], k: usize, seed: u64, score: F) -> Result<CvResult>
where
    F: Fn(f64, usize, &[usize], &[usize]) -> Result<f64> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no bandwidth candidates".into()));
    }
    let folds = kfold_indices(n, k, &mut Rng::new(seed))?;
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..k).map(move |f| (c, f)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, f)| {
            let held = &folds[f];
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            score(candidates[c], f, &train, held)
        })
        .collect::<Result<Vec<f64>>>()?;
    let scores: Vec<CvScore> = candidates
        .iter()
        .enumerate()
        .map(|(c, &h)| {
            let fold_pinball = results[c * k..(c + 1) * k].to_vec();
            CvScore {
                bandwidth: h,
                mean_pinball: fold_pinball.iter().sum::<f64>() / k as f64,
                fold_pinball,
            }
        })
        .collect();
    let best = scores
        .iter()
        .min_by(|a, b| {
            a.mean_pinball
                .total_cmp(&b.mean_pinball)
                .then(a.bandwidth.total_cmp(&b.bandwidth))
        })
        .expect("non-empty candidates");
    Ok(CvResult {
        selected: best.bandwidth,
        scores,
    })
}

/// Picks a bandwidth by K-fold cross-validation, scoring each held-out fold
/// with the raw check loss.
#[allow(clippy::too_many_arguments)]
pub fn cv_bandwidth(
    data: &Dataset,
    arch: &Architecture,
    tau: f64,
    kernel: KernelKind,
    candidates: &[f64],
    k: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<CvResult> {
    let scorer = LossSpec::pinball(tau)?;
    for &h in candidates {
        LossSpec::smoothed(tau, kernel, h)?;
    }
    let root = Rng::new(seed);
    cv_select(data.len(), candidates, k, root.split(0).key(), |h, fold, train, held| {
        let loss = LossSpec::smoothed(tau, kernel, h)?;
        let fitted = train_single(
            &data.subset(train),
            arch,
            &loss,
            config,
            root.split(1 + fold as u64).key(),
        )?;
        let held = data.subset(held);
        let pred = fitted.predict(held.x.view())?;
        let residuals: Vec<f64> = held
            .y
            .iter()
            .zip(pred.column(0))
            .map(|(y, f)| y - f)
            .collect();
        Ok(scorer.mean_loss(&residuals))
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array1};

    use super::*;
    use crate::losses::KernelKind;

    fn intercept_data(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let y: Array1<f64> = (0..n).map(|_| rng.normal()).collect();
        Dataset::new(Array2::zeros((n, 1)), y, "normal").unwrap()
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(0.0), 2f64.ln());
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        let tied = cumulative_softplus(&ndarray::array![[1.0, -40.0, -1000.0]]);
        assert!(tied[[0, 1]] > tied[[0, 0]] && tied[[0, 2]] > tied[[0, 1]]);
        assert_eq!(tied[[0, 1]], 1f64.next_up());
        assert!((softplus(3.0) - (1.0 + 3f64.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_raw_outputs_give_ln2_gaps() {
        let f = cumulative_softplus(&Array2::zeros((2, 4)));
        for row in f.rows() {
            for j in 1..4 {
                assert!((row[j] - row[j - 1] - std::f64::consts::LN_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = TrainConfig {
            batch_size: 0,
            lr: -1.0,
            val_fraction: 0.7,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_point_median_stays_between() {
        let x = Array2::zeros((20, 1));
        let y: Array1<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let data = Dataset::new(x, y, "two-point").unwrap();
        let arch = Architecture::new(1, vec![], 1);
        let cfg = TrainConfig {
            max_epochs: 200,
            early_stop: None,
            ..TrainConfig::default()
        };
        let fit = train_single(&data, &arch, &LossSpec::pinball(0.5).unwrap(), &cfg, 1).unwrap();
        let p = fit.predict(array![[0.0]].view()).unwrap()[[0, 0]];
        assert!((0.0..=1.0).contains(&p), "{p}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = intercept_data(300, 2);
        let arch = Architecture::new(1, vec![4], 1);
        let loss = LossSpec::smoothed(0.3, KernelKind::Uniform, 0.1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let a = train_single(&data, &arch, &loss, &cfg, 9).unwrap();
        let b = train_single(&data, &arch, &loss, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 5);
    }

    #[test]
    fn full_batch_gradient_descent_is_monotone() {
        let data = intercept_data(500, 3);
        let arch = Architecture::new(1, vec![], 1);
        let loss = LossSpec::smoothed(0.7, KernelKind::Gaussian, 0.5).unwrap();
        let cfg = TrainConfig {
            batch_size: 1000,
            momentum: 0.0,
            max_epochs: 30,
            early_stop: None,
            ..TrainConfig::default()
        };
        let fit = train_single(&data, &arch, &loss, &cfg, 4).unwrap();
        for w in fit.history.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-15);
        }
    }

    #[test]
    fn rejects_bad_quantile_grids() {
        let data = intercept_data(50, 1);
        let fam = LossSpec::pinball(0.5).unwrap();
        let arch = Architecture::new(1, vec![3], 3);
        let cfg = TrainConfig::default();
        assert!(train_noncrossing(&data, &arch, &[0.5, 0.25, 0.75], &fam, &cfg, 0).is_err());
        assert!(train_noncrossing(&data, &arch, &[0.25, 0.25, 0.75], &fam, &cfg, 0).is_err());
        assert!(train_noncrossing(&data, &arch, &[0.25, 0.5], &fam, &cfg, 0).is_err());
        assert!(train_single(&data, &arch, &fam, &cfg, 0).is_err());
    }

    #[test]
    fn separate_heads_train() {
        let data = intercept_data(200, 5);
        let arch = Architecture::new(1, vec![3], 1);
        let cfg = TrainConfig {
            max_epochs: 3,
            heads: HeadLayout::Separate,
            ..TrainConfig::default()
        };
        let fam = LossSpec::smoothed(0.5, KernelKind::Gaussian, 0.1).unwrap();
        let fit = train_noncrossing(&data, &arch, &[0.1, 0.5, 0.9], &fam, &cfg, 0).unwrap();
        assert_eq!(fit.models.len(), 3);
        let p = fit.predict(array![[0.0]].view()).unwrap();
        assert!(p[[0, 0]] < p[[0, 1]] && p[[0, 1]] < p[[0, 2]]);
    }

    #[test]
    fn folds_partition_indices() {
        let folds = kfold_indices(100, 5, &mut Rng::new(1)).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 20));
        assert!(kfold_indices(3, 5, &mut Rng::new(1)).is_err());
        assert!(kfold_indices(10, 1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn cv_selects_rigged_minimum_and_breaks_ties_low() {
        let res = cv_select(50, &[0.1, 0.01, 0.05], 5, 0, |h, _, _, _| {
            Ok(if h == 0.01 { 1.0 } else { 2.0 })
        })
        .unwrap();
        assert_eq!(res.selected, 0.01);
        assert_eq!(res.scores[1].mean_pinball, 1.0);

        let tie = cv_select(50, &[0.1, 0.05], 5, 0, |_, _, _, _| Ok(1.0)).unwrap();
        assert_eq!(tie.selected, 0.05);
    }

    #[test]
    fn cv_holds_out_each_index_once() {
        use std::sync::Mutex;
        let seen = Mutex::new(vec![0usize; 100]);
        cv_select(100, &[0.1], 5, 3, |_, _, train, held| {
            assert_eq!(train.len() + held.len(), 100);
            let mut s = seen.lock().unwrap();
            for &i in held {
                s[i] += 1;
            }
            Ok(0.0)
        })
        .unwrap();
        assert!(seen.into_inner().unwrap().iter().all(|&c| c == 1));
    }

    #[test]
    fn cv_single_candidate() {
        let data = intercept_data(60, 7);
        let arch = Architecture::new(1, vec![], 1);
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let res = cv_bandwidth(&data, &arch, 0.5, KernelKind::Gaussian, &[0.05], 3, &cfg, 1).unwrap();
        assert_eq!(res.selected, 0.05);
        assert_eq!(res.scores.len(), 1);
        assert!(res.scores[0].mean_pinball > 0.0);
        assert!(cv_bandwidth(&data, &arch, 0.5, KernelKind::Gaussian, &[0.05], 100, &cfg, 1).is_err());
    }
}
