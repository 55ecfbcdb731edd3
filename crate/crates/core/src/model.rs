//! Softmax classifiers (linear, one or two hidden layers) and their
//! per-class losses and gradients.
//!
//! Parameters are stored flat, layer by layer: for each layer the weight
//! matrix (`fan_in × fan_out`, row-major) followed by its bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{dim, domain, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{axpy, cosine_angle, l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub classes: usize,
    /// Weights start as `N(0, init_scale² / fan_in)`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_init_scale() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            activation: Activation::Relu,
            classes,
            init_scale: 1.0,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, activation: Activation, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            activation,
            classes,
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return domain("model needs input_dim >= 1 and classes >= 2");
        }
        if self.hidden.len() > 2 || self.hidden.contains(&0) {
            return domain("at most two hidden layers, each of positive width");
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return domain("init_scale must be positive");
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<f64>,
}

/// Loss and flat gradient of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// The evaluation summed over no examples.
    pub empty: bool,
}

impl Model {
    /// Zero biases, Gaussian weights with variance `init_scale² / fan_in`.
    pub fn init(spec: ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.num_params());
        for (fan_in, fan_out) in spec.layer_shapes() {
            let sd = spec.init_scale / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.normal(0.0, sd)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return dim(format!(
                "{} parameters for a model with {}",
                params.len(),
                spec.num_params()
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return dim(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.params.len()
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Per-layer `(weight, bias)` tensors cut from the flat vector.
    pub fn layer_tensors(&self) -> Vec<(Tensor, Tensor)> {
        let mut off = 0;
        self.spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                let w = Tensor::from_raw(vec![i, o], self.params[off..off + i * o].to_vec());
                off += i * o;
                let b = Tensor::from_raw(vec![o], self.params[off..off + o].to_vec());
                off += o;
                (w, b)
            })
            .collect()
    }

    /// Builds the loss graph `(1/normalizer) Σ_i CE(f(x_i), y_i)`.
    pub fn loss_graph(&self, x: Tensor, labels: Vec<usize>, normalizer: f64) -> Result<Graph> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return dim(format!("inputs {:?} for input_dim {}", x.shape(), self.spec.input_dim));
        }
        let mut g = Graph::new();
        let mut h = g.input(x);
        let layers = self.layer_tensors();
        let last = layers.len() - 1;
        for (j, (w, b)) in layers.into_iter().enumerate() {
            let w = g.param(w);
            let b = g.param(b);
            h = g.matmul(h, w)?;
            h = g.bias_add(h, b)?;
            if j < last {
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        let ce = g.softmax_ce(h, labels)?;
        g.mean_over_subset(ce, normalizer)?;
        Ok(g)
    }

    pub fn loss_grad(&self, x: Tensor, labels: Vec<usize>, normalizer: f64) -> Result<LossGrad> {
        let mut g = self.loss_graph(x, labels, normalizer)?;
        let loss = g.forward()?;
        let grad = g.backward()?.flatten();
        Ok(LossGrad {
            loss,
            grad,
            empty: g.empty_subset(),
        })
    }

    /// Logits computed directly, without building a graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return dim(format!("inputs {:?} for input_dim {}", x.shape(), self.spec.input_dim));
        }
        let layers = self.layer_tensors();
        let last = layers.len() - 1;
        let mut h = x.clone();
        for (j, (w, b)) in layers.iter().enumerate() {
            h = h.matmul(w)?;
            let k = b.len();
            for row in h.data_mut().chunks_mut(k) {
                for (v, bj) in row.iter_mut().zip(b.data()) {
                    *v += bj;
                    if j < last {
                        *v = match self.spec.activation {
                            Activation::Relu => v.max(0.0),
                            Activation::Tanh => v.tanh(),
                        };
                    }
                }
            }
        }
        Ok(h)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            layers: self
                .spec
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| LayerShape {
                    weight: [i, o],
                    bias: o,
                })
                .collect(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let expected: Vec<LayerShape> = c
            .spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| LayerShape {
                weight: [i, o],
                bias: o,
            })
            .collect();
        if expected != c.layers {
            return dim("checkpoint layer manifest does not match its spec");
        }
        Model::from_params(c.spec, c.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Model::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "imbopt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub weight: [usize; 2],
    pub bias: usize,
}

/// On-disk model: spec, shape manifest and the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub layers: Vec<LayerShape>,
    pub params: Vec<f64>,
}

/// Divisor applied to a per-class sum of example losses and gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Size of the whole dataset: per-class terms sum to the full gradient.
    Dataset,
    /// Number of rows used for that class: a per-class batch mean.
    ClassBatch,
    /// A fixed count, e.g. the total batch size.
    Count(usize),
}

impl Normalization {
    fn divisor(self, ds: &Dataset, rows: usize) -> f64 {
        match self {
            Normalization::Dataset => ds.len() as f64,
            Normalization::ClassBatch => rows.max(1) as f64,
            Normalization::Count(c) => c as f64,
        }
    }
}

/// Loss and gradient of class `l`, over all its rows or the given subset.
pub fn per_class_gradient(
    model: &Model,
    ds: &Dataset,
    l: usize,
    rows: Option<&[usize]>,
    norm: Normalization,
) -> Result<LossGrad> {
    if l >= ds.classes() {
        return domain(format!("class {l} outside 0..{}", ds.classes()));
    }
    let x = match rows {
        None => ds.class_features(l).clone(),
        Some(r) => {
            if let Some(&bad) = r.iter().find(|&&i| i >= ds.len() || ds.labels()[i] != l) {
                return domain(format!("row {bad} is not an example of class {l}"));
            }
            ds.features().gather_rows(r)?
        }
    };
    let n = x.rows();
    let d = norm.divisor(ds, n);
    if !(d > 0.0) {
        return domain("normalization count must be positive");
    }
    model.loss_grad(x, vec![l; n], d)
}

/// `f^(l)`: the class's summed loss divided by the dataset size.
pub fn per_class_loss(model: &Model, ds: &Dataset, l: usize) -> Result<f64> {
    if l >= ds.classes() {
        return domain(format!("class {l} outside 0..{}", ds.classes()));
    }
    let z = model.logits(ds.class_features(l))?;
    Ok(ce_sum(&z, l) / ds.len() as f64)
}

fn ce_sum(z: &Tensor, l: usize) -> f64 {
    (0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum()
}

/// Full-dataset loss and gradient in one pass.
pub fn full_gradient(model: &Model, ds: &Dataset) -> Result<LossGrad> {
    model.loss_grad(ds.features().clone(), ds.labels().to_vec(), ds.len() as f64)
}

/// Gradients of every class, with losses and the geometry between them.
#[derive(Clone, Debug, PartialEq)]
pub struct PerClassGradients {
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    pub empty: Vec<bool>,
}

impl PerClassGradients {
    pub fn compute(model: &Model, ds: &Dataset, batch: Option<&[Vec<usize>]>, norm: Normalization) -> Result<Self> {
        let mut out = PerClassGradients {
            losses: Vec::new(),
            grads: Vec::new(),
            empty: Vec::new(),
        };
        for l in 0..ds.classes() {
            let rows = batch.map(|b| b[l].as_slice());
            let lg = per_class_gradient(model, ds, l, rows, norm)?;
            out.losses.push(lg.loss);
            out.grads.push(lg.grad);
            out.empty.push(lg.empty);
        }
        Ok(out)
    }

    pub fn from_grads(grads: Vec<Vec<f64>>) -> Self {
        let k = grads.len();
        Self {
            losses: vec![0.0; k],
            grads,
            empty: vec![false; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.grads.len()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.grads.iter().map(|g| l2_norm(g)).collect()
    }

    pub fn total(&self) -> Vec<f64> {
        crate::tensor::sum_vectors(&self.grads)
    }

    /// Sum of every class gradient except `l`.
    pub fn rest(&self, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grads[0].len()];
        for (i, g) in self.grads.iter().enumerate() {
            if i != l {
                axpy(&mut out, 1.0, g);
            }
        }
        out
    }

    pub fn cosine(&self, i: usize, j: usize) -> Option<f64> {
        cosine_angle(&self.grads[i], &self.grads[j]).ok().flatten()
    }
}
