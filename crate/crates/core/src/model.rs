//! Dense ReLU networks with softmax output, cross-entropy on soft targets and
//! hand-written reverse-mode gradients w.r.t. parameters and inputs.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` occupies a
//! `fan_in x fan_out` row-major weight block followed by its `fan_out` bias
//! entries, so `z = a W + b` with `a` as a row vector.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added inside the logarithm of [`loss_ce`].
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_dims: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

/// Location of one layer inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl LayerLayout {
    /// Weights and bias together.
    pub fn span(&self) -> Range<usize> {
        self.weights.start..self.bias.end
    }
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid(
                "layer_dims",
                "need at least an input and an output dimension",
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::invalid("layer_dims", "all dimensions must be >= 1"));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(Error::invalid("layer_dims", "need at least two classes"));
        }
        Ok(ModelSpec {
            layer_dims,
            activation: Activation::Relu,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerLayout {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// He-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for layer in self.layers() {
            let bound = (6.0 / layer.fan_in as f64).sqrt();
            for v in &mut values[layer.weights] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector(values)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim("parameter vector", self.param_count(), params.len()));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::dim("input columns", self.input_dim(), inputs.ncols()));
        }
        Ok(())
    }
}

/// Flat parameter vector of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn same_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim("vector length", self.len(), other.len()));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.same_len(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + alpha * x` as a new vector.
    pub fn axpy(&self, alpha: f64, x: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_scaled(alpha, x)?;
        Ok(out)
    }

    /// In-place `self += alpha * x`.
    pub fn add_scaled(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        self.same_len(x)?;
        for (y, xv) in self.0.iter_mut().zip(&x.0) {
            *y += alpha * xv;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.0 {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.axpy(-1.0, other)
    }

    /// `alpha * a + (1 - alpha) * b`.
    pub fn mix(a: &ParamVector, b: &ParamVector, alpha: f64) -> Result<ParamVector> {
        a.same_len(b)?;
        Ok(ParamVector(
            a.0.iter()
                .zip(&b.0)
                .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                .collect(),
        ))
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn vec_dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.dot(b)
}

pub fn vec_axpy(y: &ParamVector, alpha: f64, x: &ParamVector) -> Result<ParamVector> {
    y.axpy(alpha, x)
}

pub fn vec_norm(a: &ParamVector) -> f64 {
    a.norm()
}

/// Inputs paired with soft-label targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::dim("batch rows", inputs.nrows(), targets.nrows()));
        }
        for row in targets.rows() {
            let sum: f64 = row.sum();
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "target row is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), indices),
            targets: self.targets.select(Axis(0), indices),
        }
    }
}

fn weight_view<'a>(params: &'a ParamVector, layer: &LayerLayout) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((layer.fan_in, layer.fan_out), &params.0[layer.weights.clone()])
        .expect("layout matches parameter count")
}

fn bias_view<'a>(params: &'a ParamVector, layer: &LayerLayout) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params.0[layer.bias.clone()])
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Pre-activations of every layer; the last entry holds softmax probabilities.
fn forward_trace(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
) -> (Vec<LayerLayout>, Vec<Array2<f64>>) {
    let layers = spec.layers();
    let mut pre = Vec::with_capacity(layers.len());
    let mut act: Array2<f64> = inputs.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        let mut z = act.dot(&weight_view(params, layer));
        z += &bias_view(params, layer);
        if l + 1 < layers.len() {
            act = z.mapv(|v| v.max(0.0));
            pre.push(z);
        } else {
            softmax_rows(&mut z);
            pre.push(z);
        }
    }
    (layers, pre)
}

pub fn forward(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    spec.check_params(params)?;
    spec.check_inputs(&inputs)?;
    let (_, mut trace) = forward_trace(spec, params, inputs);
    Ok(trace.pop().unwrap())
}

/// Mean over rows of `-sum_k target_k * ln(prob_k + LOG_EPS)`.
pub fn loss_ce(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    if probs.dim() != targets.dim() {
        return Err(Error::dim(
            "loss shapes",
            targets.len(),
            probs.len(),
        ));
    }
    Ok(per_example_ce(probs, targets).mean().unwrap_or(0.0))
}

fn per_example_ce(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Array1<f64> {
    probs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(p, y)| {
            p.iter()
                .zip(y.iter())
                .map(|(&pk, &yk)| if yk == 0.0 { 0.0 } else { -yk * (pk + LOG_EPS).ln() })
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Mean cross-entropy of the model on a batch.
pub fn batch_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let probs = forward(spec, params, batch.inputs.view())?;
    loss_ce(probs.view(), batch.targets.view())
}

/// Cross-entropy of each example separately.
pub fn example_losses(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<Array1<f64>> {
    let probs = forward(spec, params, batch.inputs.view())?;
    if probs.dim() != batch.targets.dim() {
        return Err(Error::dim("loss shapes", batch.targets.len(), probs.len()));
    }
    Ok(per_example_ce(probs.view(), batch.targets.view()))
}

fn check_finite(params: &ParamVector, batch: &Batch) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::Numeric("non-finite parameter".into()));
    }
    if batch.inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input".into()));
    }
    Ok(())
}

struct Grads {
    params: Option<ParamVector>,
    inputs: Option<Array2<f64>>,
}

fn backprop(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    want_params: bool,
    want_inputs: bool,
) -> Result<Grads> {
    spec.check_params(params)?;
    spec.check_inputs(&batch.inputs.view())?;
    if batch.targets.ncols() != spec.n_classes() {
        return Err(Error::dim("target columns", spec.n_classes(), batch.targets.ncols()));
    }
    check_finite(params, batch)?;
    let (layers, trace) = forward_trace(spec, params, batch.inputs.view());
    let rows = batch.len().max(1) as f64;

    // d(mean CE)/d(logits) = (p - y) / B since target rows sum to one.
    let mut delta = (&trace[trace.len() - 1] - &batch.targets) / rows;
    let mut grad = want_params.then(|| ParamVector::zeros(spec.param_count()));

    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        if let Some(g) = grad.as_mut() {
            let below = if l == 0 {
                batch.inputs.view()
            } else {
                // ReLU output of the previous layer, rebuilt from its pre-activation.
                trace[l - 1].view()
            };
            let gw = if l == 0 {
                below.t().dot(&delta)
            } else {
                below.mapv(|v| v.max(0.0)).t().dot(&delta)
            };
            g.0[layer.weights.clone()]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(dst, src)| *dst = *src);
            g.0[layer.bias.clone()]
                .iter_mut()
                .zip(delta.sum_axis(Axis(0)).iter())
                .for_each(|(dst, src)| *dst = *src);
        }
        if l > 0 || want_inputs {
            let mut back = delta.dot(&weight_view(params, layer).t());
            if l > 0 {
                back.zip_mut_with(&trace[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = back;
        }
    }
    let grads = Grads {
        params: grad,
        inputs: want_inputs.then_some(delta),
    };
    if grads.params.as_ref().is_some_and(|g| !g.is_finite())
        || grads.inputs.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}

/// Gradient of the batch-mean cross-entropy w.r.t. the parameters.
pub fn grad_params(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    Ok(backprop(spec, params, batch, true, false)?.params.unwrap())
}

/// Gradient of the batch-mean cross-entropy w.r.t. each input row, targets fixed.
pub fn grad_inputs(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Array2<f64>> {
    Ok(backprop(spec, params, batch, false, true)?.inputs.unwrap())
}

/// Fraction of rows whose argmax prediction equals `labels`.
pub fn accuracy(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<f64> {
    if inputs.nrows() != labels.len() {
        return Err(Error::dim("label count", inputs.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let probs = forward(spec, params, inputs)?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the first maximum.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
