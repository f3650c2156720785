//! Two-direction loss surfaces around a trained model, with filter-wise
//! normalized random directions.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::network::{MlpModel, ParamSet};
use crate::numerics::Rng;
use crate::scenarios::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Bias entries are rescaled per neuron like the weight rows.
    #[default]
    PerNeuron,
    /// Bias directions are zero, so biases stay at their trained values.
    Exclude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandscapeSpec {
    pub resolution: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub seed: u64,
    pub bias: BiasMode,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        Self {
            resolution: 51,
            alpha_range: (-1.0, 1.0),
            beta_range: (-1.0, 1.0),
            seed: 0,
            bias: BiasMode::PerNeuron,
        }
    }
}

impl LandscapeSpec {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.resolution < 2 {
            v.push(format!("resolution must be at least 2, got {}", self.resolution));
        }
        for (name, (lo, hi)) in [("alpha_range", self.alpha_range), ("beta_range", self.beta_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi && lo <= 0.0 && hi >= 0.0) {
                v.push(format!("{name} must be a finite interval containing 0, got [{lo}, {hi}]"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        grid(self.alpha_range, self.resolution)
    }

    pub fn betas(&self) -> Vec<f64> {
        grid(self.beta_range, self.resolution)
    }
}

// Points within rounding of zero are snapped so the base point lands exactly.
fn grid((lo, hi): (f64, f64), r: usize) -> Vec<f64> {
    let step = (hi - lo) / (r - 1) as f64;
    (0..r)
        .map(|i| {
            let v = if i == r - 1 { hi } else { lo + i as f64 * step };
            if v.abs() < 1e-9 * step { 0.0 } else { v }
        })
        .collect()
}

/// Gaussian draw shaped like the model's parameters, before normalization.
/// Depends only on the shapes and the generator.
pub fn raw_direction(model: &MlpModel, rng: &mut Rng) -> ParamSet {
    let mut d = ParamSet::zeros_like(model.params());
    for layer in &mut d.layers {
        layer.weights.iter_mut().for_each(|w| *w = rng.normal());
        layer.bias.iter_mut().for_each(|b| *b = rng.normal());
    }
    d
}

/// Rescales each neuron's incoming weight row of `d` to the norm of the
/// matching row of `theta` (zero rows stay zero).
pub fn normalize_filterwise(d: &mut ParamSet, theta: &ParamSet, bias: BiasMode) -> Result<()> {
    if !d.congruent(theta) {
        return Err(Error::Shape("direction is not shaped like the model".into()));
    }
    let rescale = |dn: f64, tn: f64| if tn == 0.0 || dn == 0.0 { 0.0 } else { tn / dn };
    for (dl, tl) in d.layers.iter_mut().zip(&theta.layers) {
        for (mut drow, trow) in dl.weights.rows_mut().into_iter().zip(tl.weights.rows()) {
            let s = rescale(drow.dot(&drow).sqrt(), trow.dot(&trow).sqrt());
            drow.mapv_inplace(|v| v * s);
        }
        match bias {
            BiasMode::PerNeuron => {
                for (db, tb) in dl.bias.iter_mut().zip(tl.bias.iter()) {
                    *db *= rescale(db.abs(), tb.abs());
                }
            }
            BiasMode::Exclude => dl.bias.fill(0.0),
        }
    }
    Ok(())
}

pub fn random_direction(model: &MlpModel, rng: &mut Rng, bias: BiasMode) -> ParamSet {
    let mut d = raw_direction(model, rng);
    normalize_filterwise(&mut d, model.params(), bias).expect("shapes come from the model");
    d
}

/// Two directions from `spec.seed`; models of equal shape get the same raw draws.
pub fn direction_pair(model: &MlpModel, spec: &LandscapeSpec) -> (ParamSet, ParamSet) {
    let root = Rng::new(spec.seed);
    (
        random_direction(model, &mut root.split(0), spec.bias),
        random_direction(model, &mut root.split(1), spec.bias),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `values[[i, j]]` is the loss at `θ + αᵢ·d1 + βⱼ·d2`.
    pub values: Array2<f64>,
    pub base_loss: f64,
}

/// Mean loss of `model` over all of `data`.
pub fn full_loss(model: &MlpModel, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    if model.architecture().n_outputs != 1 {
        return Err(Error::InvalidArgument(
            "loss surfaces need a single-output model".into(),
        ));
    }
    let pred = model.predict(data.x.view())?;
    let residuals: Vec<f64> = data.y.iter().zip(pred.column(0)).map(|(y, p)| y - p).collect();
    Ok(loss.mean_loss(&residuals))
}

pub fn surface(
    model: &MlpModel,
    d1: &ParamSet,
    d2: &ParamSet,
    spec: &LandscapeSpec,
    data: &Dataset,
    loss: &LossSpec,
) -> Result<Surface> {
    spec.validate()?;
    loss.validate()?;
    if !d1.congruent(model.params()) || !d2.congruent(model.params()) {
        return Err(Error::Shape("directions are not shaped like the model".into()));
    }
    let base_loss = full_loss(model, data, loss)?;
    let (alphas, betas) = (spec.alphas(), spec.betas());
    let arch = model.architecture().clone();
    let rows: Vec<Vec<f64>> = alphas
        .par_iter()
        .map(|&a| {
            betas
                .iter()
                .map(|&b| {
                    if a == 0.0 && b == 0.0 {
                        return Ok(base_loss);
                    }
                    let mut p = model.params().clone();
                    p.add_scaled(d1, a);
                    p.add_scaled(d2, b);
                    let shifted = MlpModel::from_params(arch.clone(), p)?;
                    let v = full_loss(&shifted, data, loss)?;
                    Ok(if v.is_finite() { v } else { f64::INFINITY })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let r = spec.resolution;
    let values = Array2::from_shape_vec((r, r), rows.concat())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Surface {
        alphas,
        betas,
        values,
        base_loss,
    })
}

fn fmt(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

impl Surface {
    /// Grid CSV: header `alpha,β₁,…`, then one row per α.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut text = String::new();
        for c in comments {
            text.push_str(&format!("# {c}\n"));
        }
        text.push_str("alpha");
        for b in &self.betas {
            text.push_str(&format!(",{}", fmt(*b)));
        }
        text.push('\n');
        for (i, a) in self.alphas.iter().enumerate() {
            text.push_str(&fmt(*a));
            for v in self.values.row(i) {
                text.push_str(&format!(",{}", fmt(*v)));
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
