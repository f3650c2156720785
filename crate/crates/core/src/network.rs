//! Dense ReLU networks with optional residual hidden blocks and hand-written
//! backpropagation.
//!
//! Layer `l` holds a weight matrix of shape `(out, in)` and a bias of length
//! `out`. Hidden layers apply `σ(W a + b)`; with `residual = true` every hidden
//! layer after the first (which projects the input to the common width)
//! computes `σ(W a + b) + a`. The output layer is affine.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub n_outputs: usize,
    #[serde(default)]
    pub residual: bool,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, n_outputs: usize) -> Self {
        Self {
            input_dim,
            hidden_widths,
            n_outputs,
            residual: false,
        }
    }

    /// 5 hidden layers of 70 units.
    pub fn model_a(input_dim: usize) -> Self {
        Self::new(input_dim, vec![70; 5], 1)
    }

    /// 10 hidden layers of 50 units.
    pub fn model_b(input_dim: usize) -> Self {
        Self::new(input_dim, vec![50; 10], 1)
    }

    /// 20 hidden layers of 35 units, used for loss-surface plots.
    pub fn landscape(input_dim: usize) -> Self {
        Self::new(input_dim, vec![35; 20], 1)
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_outputs(mut self, n_outputs: usize) -> Self {
        self.n_outputs = n_outputs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".to_string());
        }
        if self.n_outputs == 0 {
            problems.push("n_outputs must be positive".to_string());
        }
        if self.hidden_widths.contains(&0) {
            problems.push("hidden widths must be positive".to_string());
        }
        if self.residual {
            if let Some(&first) = self.hidden_widths.first() {
                if self.hidden_widths.iter().any(|&w| w != first) {
                    problems.push("residual networks need equal hidden widths".to_string());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// `(in, out)` for every layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.n_outputs));
        dims
    }

    /// `P = Σ (p_{l+1} p_l + p_{l+1})`.
    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| o * i + o).sum()
    }

    fn skips(&self, hidden_index: usize) -> bool {
        self.residual && hidden_index >= 1
    }
}

pub fn num_params(arch: &Architecture) -> usize {
    arch.num_params()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Shape `(out, in)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }
}

/// A list of per-layer weight/bias blocks. Used for model parameters,
/// gradients, optimizer velocities and loss-surface directions alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

pub type GradientSet = ParamSet;

impl ParamSet {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .layer_dims()
                .into_iter()
                .map(|(i, o)| LayerParams::zeros(i, o))
                .collect(),
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.dim() == b.weights.dim() && a.bias.dim() == b.bias.dim()
            })
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// All entries, layer by layer, weights (row-major) before biases.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }
}

/// A feedforward ReLU network.
#[derive(Clone, Debug)]
pub struct MlpModel {
    arch: Architecture,
    params: ParamSet,
    revision: u64,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Activations recorded by [`MlpModel::forward`], consumed by
/// [`MlpModel::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to every layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    revision: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

impl MlpModel {
    /// Weights uniform on `±√(6/fan_in)`, biases zero.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((out, fan_in), || {
                    rng.uniform_range(-bound, bound)
                });
                LayerParams {
                    weights,
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            params: ParamSet { layers },
            revision: 0,
        })
    }

    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        if !params.congruent(&ParamSet::zeros(&arch)) {
            return Err(Error::Shape(
                "parameter blocks do not match the architecture".into(),
            ));
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            arch,
            params,
            revision: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access to the parameters. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.revision = self.revision.wrapping_add(1);
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Outputs for a batch, without recording activations.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.params.layers.len() - 1;
        let mut a = x.to_owned();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            if l == last {
                return Ok(z);
            }
            z.mapv_inplace(relu);
            if self.arch.skips(l) {
                z += &a;
            }
            a = z;
        }
        unreachable!("a network always has an output layer")
    }

    /// Outputs for a batch (`n × n_outputs`) plus the cache backprop needs.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let last = self.params.layers.len() - 1;
        let mut inputs = Vec::with_capacity(last + 1);
        let mut pre = Vec::with_capacity(last);
        inputs.push(x.to_owned());
        for (l, layer) in self.params.layers.iter().enumerate() {
            let a = &inputs[l];
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            if l == last {
                return Ok((
                    z,
                    ForwardCache {
                        inputs,
                        pre,
                        revision: self.revision,
                    },
                ));
            }
            let mut out = z.mapv(relu);
            if self.arch.skips(l) {
                out += a;
            }
            pre.push(z);
            inputs.push(out);
        }
        unreachable!("a network always has an output layer")
    }

    /// Parameter gradients given `dL/d(outputs)` for the batch in `cache`.
    ///
    /// The ReLU derivative at exactly zero is taken as 0.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> Result<GradientSet> {
        let n_layers = self.params.layers.len();
        if cache.revision != self.revision
            || cache.inputs.len() != n_layers
            || cache.pre.len() + 1 != n_layers
        {
            return Err(Error::Shape(
                "forward cache does not belong to this model state".into(),
            ));
        }
        for (l, layer) in self.params.layers.iter().enumerate() {
            if cache.inputs[l].ncols() != layer.weights.ncols() {
                return Err(Error::Shape("forward cache layer widths differ".into()));
            }
        }
        if d_out.dim() != (cache.batch_size(), self.arch.n_outputs) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected {:?}",
                d_out.dim(),
                (cache.batch_size(), self.arch.n_outputs)
            )));
        }

        let mut grads = Vec::with_capacity(n_layers);
        let mut d_z = d_out.to_owned();
        // Gradient reaching a block input through its skip connection.
        let mut skip: Option<Array2<f64>> = None;
        for l in (0..n_layers).rev() {
            let layer = &self.params.layers[l];
            grads.push(LayerParams {
                weights: d_z.t().dot(&cache.inputs[l]),
                bias: d_z.sum_axis(Axis(0)),
            });
            if l == 0 {
                break;
            }
            // dL/d(inputs[l]), i.e. with respect to the output of hidden layer l - 1.
            let mut d_a = d_z.dot(&layer.weights);
            if let Some(s) = skip.take() {
                d_a += &s;
            }
            let hidden = l - 1;
            if self.arch.skips(hidden) {
                skip = Some(d_a.clone());
            }
            Zip::from(&mut d_a)
                .and(&cache.pre[hidden])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            d_z = d_a;
        }
        grads.reverse();
        Ok(ParamSet { layers: grads })
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}
pub const MODEL_FORMAT: &str = "conquer.model";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const BINARY_MAGIC: &[u8; 4] = b"CQNM";

#[derive(Serialize, Deserialize)]
struct LayerDocument {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    architecture: Architecture,
    layers: Vec<LayerDocument>,
}

impl MlpModel {
    /// Versioned JSON document: architecture plus flat row-major weight arrays.
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            architecture: self.arch.clone(),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| LayerDocument {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_FORMAT_VERSION}, found {} v{}",
                doc.format, doc.version
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|e| Error::Format(e.to_string()))?;
                Ok(LayerParams {
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(doc.architecture, ParamSet { layers })
    }

    /// Binary layout, all integers u32 and floats f64, little-endian:
    /// `"CQNM" version input_dim n_outputs residual n_hidden widths…`
    /// followed by every layer's weights (row-major) then bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.params.len());
        out.extend_from_slice(BINARY_MAGIC);
        for v in [
            MODEL_FORMAT_VERSION,
            self.arch.input_dim as u32,
            self.arch.n_outputs as u32,
            u32::from(self.arch.residual),
            self.arch.hidden_widths.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &w in &self.arch.hidden_widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for v in self.params.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        fn take<const N: usize>(bytes: &mut &[u8]) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            bytes
                .read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated model file".into()))?;
            Ok(buf)
        }
        fn word(bytes: &mut &[u8]) -> Result<usize> {
            Ok(u32::from_le_bytes(take::<4>(bytes)?) as usize)
        }
        if &take::<4>(&mut bytes)? != BINARY_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = word(&mut bytes)? as u32;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let input_dim = word(&mut bytes)?;
        let n_outputs = word(&mut bytes)?;
        let residual = word(&mut bytes)? != 0;
        let n_hidden = word(&mut bytes)?;
        let hidden_widths = (0..n_hidden)
            .map(|_| word(&mut bytes))
            .collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            input_dim,
            hidden_widths,
            n_outputs,
            residual,
        };
        arch.validate()?;
        let mut params = ParamSet::zeros(&arch);
        for v in params.iter_mut() {
            *v = f64::from_le_bytes(take::<8>(&mut bytes)?);
        }
        if !bytes.is_empty() {
            return Err(Error::Format("trailing bytes after model".into()));
        }
        Self::from_params(arch, params)
    }

    /// Writes JSON for `.json` paths and the binary layout otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_json(path) {
            self.to_json()?.into_bytes()
        } else {
            self.to_bytes()
        };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if is_json(path) {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
            Self::from_json(&text)
        } else {
            Self::from_bytes(&bytes)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}
