//! Minimal feed-forward network engine.
//!
//! Parameters live in a single flat [`WeightVector`]; each layer owns a
//! contiguous block holding its weight matrix (row-major, `output x input`)
//! followed by its bias. Everything here is a pure function of its inputs.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonlinearity applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Input/output widths of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.input * self.output
    }

    /// Weight matrix plus bias.
    pub fn len(&self) -> usize {
        self.weight_len() + self.output
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps a flat parameter vector onto layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    shapes: Vec<LayerShape>,
}

impl ParamLayout {
    pub fn new(shapes: Vec<LayerShape>) -> Self {
        Self { shapes }
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn total_len(&self) -> usize {
        self.shapes.iter().map(LayerShape::len).sum()
    }

    /// Offset of layer `m` (0-based) inside the flat vector.
    pub fn offset(&self, m: usize) -> usize {
        self.shapes[..m].iter().map(LayerShape::len).sum()
    }

    /// A layout with a single block of `len` scalars; used for plain vectors.
    pub fn flat(len: usize) -> Self {
        Self { shapes: vec![LayerShape { input: 0, output: len }] }
    }
}

/// Flat parameter set of a model; the unit of client-to-server exchange.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

/// Gradients share the parameter representation.
pub type GradientVector = WeightVector;

impl fmt::Debug for WeightVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightVector")
            .field("len", &self.values.len())
            .field("norm", &self.norm())
            .finish()
    }
}

impl WeightVector {
    pub fn new(values: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch {
                expected: layout.total_len(),
                found: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    /// Unstructured vector; convenient for tests and plain arithmetic.
    pub fn from_flat(values: Vec<f64>) -> Self {
        let layout = Arc::new(ParamLayout::flat(values.len()));
        Self { values, layout }
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Self { values: vec![0.0; layout.total_len()], layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_compatible(&self, other: &WeightVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch {
                expected: self.values.len(),
                found: other.values.len(),
            });
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &WeightVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn add(&self, other: &WeightVector) -> Result<WeightVector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &WeightVector) -> Result<WeightVector> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> WeightVector {
        WeightVector {
            values: self.values.iter().map(|v| v * c).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &WeightVector) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &WeightVector, f: impl Fn(f64, f64) -> f64) -> Result<WeightVector> {
        self.check_compatible(other)?;
        Ok(WeightVector {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            layout: Arc::clone(&self.layout),
        })
    }

    fn layer_slice(&self, m: usize) -> &[f64] {
        let off = self.layout.offset(m);
        &self.values[off..off + self.layout.shapes[m].len()]
    }
}

/// One affine layer followed by an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// An M-layer feed-forward classifier whose last layer emits logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct LayerStack {
    layers: Vec<LayerSpec>,
    layout: Arc<ParamLayout>,
}

impl TryFrom<Vec<LayerSpec>> for LayerStack {
    type Error = Error;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self> {
        LayerStack::new(layers)
    }
}

impl From<LayerStack> for Vec<LayerSpec> {
    fn from(stack: LayerStack) -> Self {
        stack.layers
    }
}

impl LayerStack {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("layer stack needs at least one layer"));
        }
        for (m, layer) in layers.iter().enumerate() {
            if layer.input == 0 || layer.output == 0 {
                return Err(Error::Shape {
                    layer: m,
                    detail: format!("zero-width layer {}x{}", layer.input, layer.output),
                });
            }
            if m > 0 && layers[m - 1].output != layer.input {
                return Err(Error::Shape {
                    layer: m,
                    detail: format!(
                        "input width {} does not match previous output width {}",
                        layer.input,
                        layers[m - 1].output
                    ),
                });
            }
        }
        let last = layers.len() - 1;
        if layers[last].activation != Activation::Identity {
            return Err(Error::Shape {
                layer: last,
                detail: "final layer must emit raw logits (identity activation)".into(),
            });
        }
        let layout = Arc::new(ParamLayout::new(
            layers.iter().map(|l| LayerShape { input: l.input, output: l.output }).collect(),
        ));
        Ok(Self { layers, layout })
    }

    /// Hidden layers use `hidden_activation`; widths are `[input, h1, ..., classes]`.
    pub fn mlp(widths: &[usize], hidden_activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("mlp needs at least input and output widths"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|m| LayerSpec {
                input: widths[m],
                output: widths[m + 1],
                activation: if m + 1 == n { Activation::Identity } else { hidden_activation },
            })
            .collect();
        Self::new(layers)
    }

    /// Single affine layer with softmax output (multinomial logistic regression).
    pub fn logistic(features: usize, classes: usize) -> Result<Self> {
        Self::mlp(&[features, classes], Activation::Identity)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightVector {
        let mut values = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            let bound = 1.0 / (layer.input as f64).sqrt();
            let count = layer.input * layer.output + layer.output;
            values.extend((0..count).map(|_| rng.random_range(-bound..=bound)));
        }
        WeightVector { values, layout: Arc::clone(&self.layout) }
    }

    pub fn check_weights(&self, w: &WeightVector) -> Result<()> {
        if **w.layout() != *self.layout {
            return Err(Error::LayoutMismatch {
                expected: self.param_count(),
                found: w.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("input has {} features, expected {}", x.ncols(), self.input_width()),
            });
        }
        Ok(())
    }
}

/// Labeled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::config("empty batch"));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::config(format!(
                "batch has {} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Layer primitives shared with the dual model.

fn weight_view(params: &[f64], shape: LayerShape) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let (w, b) = params.split_at(shape.weight_len());
    (
        ArrayView2::from_shape((shape.output, shape.input), w).expect("layer block"),
        ArrayView1::from(b),
    )
}

fn weight_view_mut(
    params: &mut [f64],
    shape: LayerShape,
) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
    let (w, b) = params.split_at_mut(shape.weight_len());
    (
        ArrayViewMut2::from_shape((shape.output, shape.input), w).expect("layer block"),
        ArrayViewMut1::from(b),
    )
}

/// `act(input · Wᵀ + b)` for layer `m`.
pub(crate) fn layer_forward(
    stack: &LayerStack,
    w: &WeightVector,
    m: usize,
    input: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let spec = stack.layers[m];
    let shape = stack.layout.shapes[m];
    let (weights, bias) = weight_view(w.layer_slice(m), shape);
    let mut out = input.dot(&weights.t());
    out += &bias;
    out.mapv_inplace(|z| spec.activation.apply(z));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { layer: m });
    }
    Ok(out)
}

/// Backpropagates `d_output` (gradient w.r.t. the layer's activated output)
/// through layer `m`, accumulating parameter gradients into `grad` and
/// returning the gradient w.r.t. the layer input.
pub(crate) fn layer_backward(
    stack: &LayerStack,
    w: &WeightVector,
    m: usize,
    input: &ArrayView2<f64>,
    output: &Array2<f64>,
    d_output: &Array2<f64>,
    grad: &mut WeightVector,
) -> Array2<f64> {
    let spec = stack.layers[m];
    let shape = stack.layout.shapes[m];
    let mut d_pre = d_output.clone();
    if spec.activation != Activation::Identity {
        d_pre.zip_mut_with(output, |d, &a| *d *= spec.activation.derivative_from_output(a));
    }
    let off = stack.layout.offset(m);
    {
        let (mut gw, mut gb) = weight_view_mut(&mut grad.values[off..off + shape.len()], shape);
        gw += &d_pre.t().dot(input);
        gb += &d_pre.sum_axis(Axis(0));
    }
    let (weights, _) = weight_view(w.layer_slice(m), shape);
    d_pre.dot(&weights)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let classes = logits.ncols();
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let y = labels[i];
        if y >= classes {
            return Err(Error::config(format!("label {y} out of range for {classes} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - row[y];
        for (k, z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum_exp;
            grad[[i, k]] = (p - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow { layer: logits.ncols().saturating_sub(1) });
    }
    Ok((loss.max(0.0), grad))
}

/// Activations of every layer for `x`; the last entry is the logit matrix.
pub fn forward_all_layers(
    stack: &LayerStack,
    w: &WeightVector,
    x: &ArrayView2<f64>,
) -> Result<Vec<Array2<f64>>> {
    stack.check_weights(w)?;
    stack.check_input(x)?;
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(stack.depth());
    for m in 0..stack.depth() {
        let out = match acts.last() {
            None => layer_forward(stack, w, m, x)?,
            Some(prev) => layer_forward(stack, w, m, &prev.view())?,
        };
        acts.push(out);
    }
    Ok(acts)
}

pub fn logits(stack: &LayerStack, w: &WeightVector, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward_all_layers(stack, w, x)?.pop().expect("non-empty stack"))
}

/// Row-wise argmax of a logit matrix; ties resolve to the lowest class id.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict(stack: &LayerStack, w: &WeightVector, x: &ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(stack, w, x)?))
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(
    stack: &LayerStack,
    w: &WeightVector,
    batch: &Batch,
) -> Result<(f64, GradientVector)> {
    let x = batch.inputs.view();
    let acts = forward_all_layers(stack, w, &x)?;
    let (loss, mut delta) = softmax_cross_entropy(&acts[acts.len() - 1], &batch.labels)?;
    let mut grad = WeightVector::zeros(Arc::clone(&stack.layout));
    for m in (0..stack.depth()).rev() {
        let input = if m == 0 { x.view() } else { acts[m - 1].view() };
        delta = layer_backward(stack, w, m, &input, &acts[m], &delta, &mut grad);
    }
    Ok((loss, grad))
}

/// `w − η·g`
pub fn sgd_step(w: &WeightVector, g: &GradientVector, lr: f64) -> Result<WeightVector> {
    let mut out = w.clone();
    out.axpy(-lr, g)?;
    Ok(out)
}
