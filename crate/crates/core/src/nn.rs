//! Dense MLP engine: ReLU hidden layers, softmax output, analytic
//! backpropagation and plain SGD over a flat parameter vector.
//!
//! Parameter layout is layer-major. For each layer `l` with fan-in `i` and
//! fan-out `o`, the `i * o` weights come first, stored input-major
//! (`w[in * o + out]`), followed by the `o` biases.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{MistError, Result};

/// Probabilities below this are clamped before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest per-term negative log-likelihood, `-ln(PROB_FLOOR)`.
pub fn max_nll() -> f64 {
    -PROB_FLOOR.ln()
}

/// Number of parameters of an MLP with the given layer widths.
pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
        return Err(MistError::InvalidLayerDims(layer_dims.to_vec()));
    }
    Ok(())
}

/// Flat parameter vector of an MLP classifier plus its layer widths
/// (input dim, hidden widths..., class count).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layer_dims: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Copy)]
struct LayerView<'a> {
    weights: &'a [f64],
    biases: &'a [f64],
    fan_in: usize,
    fan_out: usize,
}

impl ModelParams {
    pub fn new(layer_dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_dims(&layer_dims)?;
        let expected = param_count(&layer_dims);
        if values.len() != expected {
            return Err(MistError::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { layer_dims, values })
    }

    pub fn zeros(layer_dims: Vec<usize>) -> Result<Self> {
        check_dims(&layer_dims)?;
        let n = param_count(&layer_dims);
        Ok(Self {
            layer_dims,
            values: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_dims: Vec<usize>, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(layer_dims)?;
        let mut offset = 0;
        for w in params.layer_dims.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
            for v in &mut params.values[offset..offset + fan_in * fan_out] {
                *v = dist.sample(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(params)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// FNV-1a over the bit patterns of all values and dims.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        };
        for &d in &self.layer_dims {
            eat(d as u64);
        }
        for v in &self.values {
            eat(v.to_bits());
        }
        h
    }

    pub fn same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.layer_dims != other.layer_dims {
            return Err(MistError::ShapeMismatch {
                left: self.layer_dims.clone(),
                right: other.layer_dims.clone(),
            });
        }
        Ok(())
    }

    fn layers(&self) -> Vec<LayerView<'_>> {
        let mut out = Vec::with_capacity(self.layer_dims.len() - 1);
        let mut offset = 0;
        for w in self.layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let nw = fan_in * fan_out;
            out.push(LayerView {
                weights: &self.values[offset..offset + nw],
                biases: &self.values[offset + nw..offset + nw + fan_out],
                fan_in,
                fan_out,
            });
            offset += nw + fan_out;
        }
        out
    }
}

/// Per-class probabilities `F(x; θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVector {
    probs: Vec<f64>,
}

impl PredictionVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty()
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(MistError::InvalidDataset(format!(
                "not a probability vector: {probs:?}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `∂L/∂θ` in the layout of the differentiated [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            values: vec![0.0; params.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Training targets for a batch: class indices or per-row probability
/// vectors (mixup soft labels).
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Hard(Vec<usize>),
    Soft { probs: Vec<f64>, classes: usize },
}

/// A row-major feature block with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    dim: usize,
    targets: Targets,
}

impl Batch {
    pub fn new(features: Vec<f64>, dim: usize, targets: Targets) -> Result<Self> {
        if dim == 0 {
            return Err(MistError::InvalidDataset("feature dim 0".into()));
        }
        if features.len() % dim != 0 {
            return Err(MistError::DimensionMismatch {
                expected: dim,
                actual: features.len() % dim,
            });
        }
        let n = features.len() / dim;
        let tn = match &targets {
            Targets::Hard(l) => l.len(),
            Targets::Soft { probs, classes } => {
                if *classes == 0 || probs.len() % classes != 0 {
                    return Err(MistError::InvalidDataset("ragged soft targets".into()));
                }
                probs.len() / classes
            }
        };
        if tn != n {
            return Err(MistError::DimensionMismatch {
                expected: n,
                actual: tn,
            });
        }
        Ok(Self {
            features,
            dim,
            targets,
        })
    }

    pub fn hard(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        Self::new(features, dim, Targets::Hard(labels))
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Hard labels, or the argmax of each soft target.
    pub fn labels(&self) -> Vec<usize> {
        match &self.targets {
            Targets::Hard(l) => l.clone(),
            Targets::Soft { probs, classes } => probs.chunks(*classes).map(argmax).collect(),
        }
    }
}

/// Activations of one batched forward pass. `acts[0]` is the input,
/// `acts[1..L]` the post-ReLU hidden layers and `acts[L]` the logits.
pub(crate) struct Trace {
    pub(crate) acts: Vec<Vec<f64>>,
    pub(crate) rows: usize,
}

impl Trace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("nonempty trace")
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn forward_trace(params: &ModelParams, inputs: &[f64]) -> Result<Trace> {
    let d = params.input_dim();
    if inputs.is_empty() || inputs.len() % d != 0 {
        return Err(MistError::DimensionMismatch {
            expected: d,
            actual: if inputs.is_empty() { 0 } else { inputs.len() % d },
        });
    }
    let rows = inputs.len() / d;
    let layers = params.layers();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(inputs.to_vec());
    for (l, layer) in layers.iter().enumerate() {
        let last = l + 1 == layers.len();
        let input = &acts[l];
        let mut out = vec![0.0; rows * layer.fan_out];
        for (r, row) in out.chunks_mut(layer.fan_out).enumerate() {
            row.copy_from_slice(layer.biases);
            let x = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
            for (i, &a) in x.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out], row);
                }
            }
            if !last {
                for v in row.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        acts.push(out);
    }
    Ok(Trace { acts, rows })
}

/// Backpropagate `dlogits` (rows × K) through a recorded trace. Returns the
/// parameter gradient and, when requested, the gradient w.r.t. the inputs.
pub(crate) fn backprop(
    params: &ModelParams,
    trace: &Trace,
    dlogits: &[f64],
    want_input_grad: bool,
) -> (Gradient, Option<Vec<f64>>) {
    let layers = params.layers();
    let mut grad = vec![0.0; params.len()];
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for layer in &layers {
        offsets.push(off);
        off += layer.fan_in * layer.fan_out + layer.fan_out;
    }
    let rows = trace.rows;
    let mut delta = dlogits.to_vec();
    let mut input_grad = None;
    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let input = &trace.acts[l];
        let (gw, gb) = grad[offsets[l]..offsets[l] + layer.fan_in * layer.fan_out + layer.fan_out]
            .split_at_mut(layer.fan_in * layer.fan_out);
        for r in 0..rows {
            let drow = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
            for (b, d) in gb.iter_mut().zip(drow) {
                *b += d;
            }
            let x = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
            for (i, &a) in x.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, drow, &mut gw[i * layer.fan_out..(i + 1) * layer.fan_out]);
                }
            }
        }
        if l == 0 && !want_input_grad {
            break;
        }
        let mut prev = vec![0.0; rows * layer.fan_in];
        for r in 0..rows {
            let drow = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
            let x = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
            let prow = &mut prev[r * layer.fan_in..(r + 1) * layer.fan_in];
            for i in 0..layer.fan_in {
                // ReLU mask; the raw input layer has no activation.
                if l == 0 || x[i] > 0.0 {
                    prow[i] = dot(&layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out], drow);
                }
            }
        }
        if l == 0 {
            input_grad = Some(prev);
            break;
        }
        delta = prev;
    }
    (Gradient::new(grad), input_grad)
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax` of one row.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut probs = logits.to_vec();
    for row in probs.chunks_mut(classes) {
        softmax_in_place(row);
    }
    probs
}

/// Raw logits for a row-major block of inputs.
pub fn logits_batch(params: &ModelParams, inputs: &[f64]) -> Result<Vec<f64>> {
    let mut trace = forward_trace(params, inputs)?;
    Ok(trace.acts.pop().expect("logits"))
}

/// Softmax probabilities (rows × K) for a row-major block of inputs.
pub fn predict_batch(params: &ModelParams, inputs: &[f64]) -> Result<Vec<f64>> {
    let logits = logits_batch(params, inputs)?;
    Ok(softmax_rows(&logits, params.num_classes()))
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<PredictionVector> {
    if x.len() != params.input_dim() {
        return Err(MistError::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    let probs = predict_batch(params, x)?;
    Ok(PredictionVector { probs })
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MistError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(MistError::EmptyBatch);
    }
    if batch.dim() != params.input_dim() {
        return Err(MistError::DimensionMismatch {
            expected: params.input_dim(),
            actual: batch.dim(),
        });
    }
    let k = params.num_classes();
    match batch.targets() {
        Targets::Hard(labels) => check_labels(labels, k),
        Targets::Soft { classes, .. } if *classes != k => Err(MistError::DimensionMismatch {
            expected: k,
            actual: *classes,
        }),
        Targets::Soft { .. } => Ok(()),
    }
}

/// Cross-entropy `-Σ t_k log p_k` of one row and its gradient w.r.t. the
/// logits. Terms whose NLL hits the clamp contribute a constant, so they
/// drop out of the gradient.
fn ce_row(logits: &[f64], target: TargetRow<'_>, dlogits: &mut [f64]) -> f64 {
    let logp = log_softmax(logits);
    let cap = max_nll();
    let mut loss = 0.0;
    let mut active_mass = 0.0;
    for v in dlogits.iter_mut() {
        *v = 0.0;
    }
    let mut visit = |k: usize, t: f64, dlogits: &mut [f64]| {
        if t == 0.0 {
            return;
        }
        let nll = -logp[k];
        if nll >= cap {
            loss += t * cap;
        } else {
            loss += t * nll;
            active_mass += t;
            dlogits[k] -= t;
        }
    };
    match target {
        TargetRow::Hard(y) => visit(y, 1.0, dlogits),
        TargetRow::Soft(t) => {
            for (k, &tk) in t.iter().enumerate() {
                visit(k, tk, dlogits);
            }
        }
    }
    if active_mass != 0.0 {
        for (d, lp) in dlogits.iter_mut().zip(&logp) {
            *d += active_mass * lp.exp();
        }
    }
    loss
}

#[derive(Clone, Copy)]
enum TargetRow<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

/// Per-row cross-entropy losses (no gradient).
pub fn ce_losses(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    check_batch(params, batch)?;
    let k = params.num_classes();
    let logits = logits_batch(params, batch.features())?;
    let mut scratch = vec![0.0; k];
    Ok(logits
        .chunks(k)
        .enumerate()
        .map(|(r, z)| ce_row(z, target_row(batch.targets(), r, k), &mut scratch))
        .collect())
}

fn target_row(targets: &Targets, r: usize, k: usize) -> TargetRow<'_> {
    match targets {
        Targets::Hard(l) => TargetRow::Hard(l[r]),
        Targets::Soft { probs, .. } => TargetRow::Soft(&probs[r * k..(r + 1) * k]),
    }
}

/// Mean cross-entropy over the batch and its analytic gradient.
pub fn ce_loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Gradient)> {
    check_batch(params, batch)?;
    let k = params.num_classes();
    let trace = forward_trace(params, batch.features())?;
    let n = batch.len();
    let mut dlogits = vec![0.0; n * k];
    let mut total = 0.0;
    for (r, (z, dz)) in trace.logits().chunks(k).zip(dlogits.chunks_mut(k)).enumerate() {
        total += ce_row(z, target_row(batch.targets(), r, k), dz);
    }
    let inv = 1.0 / n as f64;
    for v in &mut dlogits {
        *v *= inv;
    }
    let (grad, _) = backprop(params, &trace, &dlogits, false);
    Ok((total * inv, grad))
}

/// Per-row CE loss and its gradient w.r.t. the input features of that row.
pub fn ce_input_grad(params: &ModelParams, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if x.len() != params.input_dim() {
        return Err(MistError::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    check_labels(&[label], params.num_classes())?;
    let trace = forward_trace(params, x)?;
    let mut dz = vec![0.0; params.num_classes()];
    let loss = ce_row(trace.logits(), TargetRow::Hard(label), &mut dz);
    let (_, gx) = backprop(params, &trace, &dz, true);
    Ok((loss, gx.expect("input grad requested")))
}

/// `values - lr * grad`, elementwise.
pub fn sgd_step(params: &ModelParams, grad: &Gradient, lr: f64) -> Result<ModelParams> {
    if grad.values.len() != params.len() {
        return Err(MistError::DimensionMismatch {
            expected: params.len(),
            actual: grad.values.len(),
        });
    }
    if let Some(index) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(MistError::NonFiniteGradient { index });
    }
    let values: Vec<f64> = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(MistError::NonFiniteParameter { index });
    }
    Ok(ModelParams {
        layer_dims: params.layer_dims.clone(),
        values,
    })
}

/// Elementwise arithmetic mean, summed in slice order.
pub fn average_params(models: &[ModelParams]) -> Result<ModelParams> {
    let (first, rest) = models.split_first().ok_or(MistError::NoModels)?;
    for m in rest {
        first.same_shape(m)?;
    }
    let mut values = first.values.clone();
    for m in rest {
        for (a, b) in values.iter_mut().zip(&m.values) {
            *a += b;
        }
    }
    let c = models.len() as f64;
    for v in &mut values {
        *v /= c;
    }
    Ok(ModelParams {
        layer_dims: first.layer_dims.clone(),
        values,
    })
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(params: &ModelParams, inputs: &[f64], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let logits = logits_batch(params, inputs)?;
    let k = params.num_classes();
    let hits = logits
        .chunks(k)
        .zip(labels)
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
