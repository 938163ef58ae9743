//! Dense feed-forward network with an input filter in front of every layer,
//! steep sigmoid hidden activations and a softmax output.
//!
//! Layers are indexed from 0 in code: `layers[k]` maps the `layer_sizes[k]`
//! wide output of the previous stage to `layer_sizes[k + 1]` neurons. Hidden
//! layers compute `a = AF(Wᵀ·IF(a_prev) + b)`; the last layer yields logits
//! `Wᵀ·IF(a_prev) + b` fed to softmax cross-entropy.

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, sigmoid, Matrix, RngStream};

pub const FILTER_GAIN: f64 = 4.0;
pub const ACTIVATION_GAIN: f64 = 8.0;
pub const DEFAULT_LAYER_SIZES: [usize; 5] = [784, 512, 384, 256, 10];

/// `IF(x) = sigmoid(4x)`.
#[inline]
pub fn input_filter(x: f64) -> f64 {
    sigmoid(FILTER_GAIN * x)
}

/// `AF(z) = sigmoid(8z)`.
#[inline]
pub fn activation(z: f64) -> f64 {
    sigmoid(ACTIVATION_GAIN * z)
}

/// dAF/dz expressed through the activation value `a = AF(z)`.
#[inline]
pub fn activation_slope(a: f64) -> f64 {
    ACTIVATION_GAIN * a * (1.0 - a)
}

/// Per-input filter applied before every layer's affine map.
///
/// When disabled the filter is the identity (baseline networks).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputFilter {
    pub enabled: bool,
    pub center: f64,
}

impl Default for InputFilter {
    fn default() -> Self {
        InputFilter {
            enabled: true,
            center: 0.0,
        }
    }
}

impl InputFilter {
    pub fn identity() -> Self {
        InputFilter {
            enabled: false,
            center: 0.0,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.enabled {
            input_filter(x - self.center)
        } else {
            x
        }
    }

    /// Derivative given the filtered value `f = apply(x)`.
    #[inline]
    pub fn slope(&self, filtered: f64) -> f64 {
        if self.enabled {
            FILTER_GAIN * filtered * (1.0 - filtered)
        } else {
            1.0
        }
    }

    pub fn apply_matrix(&self, m: &Matrix) -> Matrix {
        if self.enabled {
            m.map(|x| self.apply(x))
        } else {
            m.clone()
        }
    }
}

/// Weights (`fan_in × fan_out`, one column per neuron) and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Slack under which a weight sum counts as already normalized. Keeps the
/// projection idempotent bit-for-bit despite rounding in the sums.
fn sum_tolerance(fan_in: usize) -> f64 {
    (4.0 * fan_in as f64 * f64::EPSILON).max(1e-12)
}

impl LayerParams {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LayerParams {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.cols() != bias.len() {
            return Err(Error::shape("LayerParams::new", weights.shape(), (bias.len(), 1)));
        }
        Ok(LayerParams { weights, bias })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    /// Incoming weight vector of neuron `i`.
    pub fn neuron_weights(&self, i: usize) -> Vec<f64> {
        self.weights.column(i)
    }

    /// L1 projection, in place: each neuron's positive weights are scaled to
    /// sum to one, and its negative weights are scaled to an absolute sum of
    /// one when that sum exceeds one. Zero weights and biases are untouched.
    pub fn normalize(&mut self) {
        let (fan_in, fan_out) = self.weights.shape();
        let tol = sum_tolerance(fan_in);
        let mut pos = vec![0.0; fan_out];
        let mut neg = vec![0.0; fan_out];
        for r in 0..fan_in {
            for (c, &w) in self.weights.row(r).iter().enumerate() {
                if w > 0.0 {
                    pos[c] += w;
                } else if w < 0.0 {
                    neg[c] -= w;
                }
            }
        }
        let pos_scale: Vec<f64> = pos
            .iter()
            .map(|&p| if p > 0.0 && (p - 1.0).abs() > tol { 1.0 / p } else { 1.0 })
            .collect();
        let neg_scale: Vec<f64> = neg
            .iter()
            .map(|&n| if n > 1.0 + tol { 1.0 / n } else { 1.0 })
            .collect();
        for r in 0..fan_in {
            for (c, w) in self.weights.row_mut(r).iter_mut().enumerate() {
                if *w > 0.0 && pos_scale[c] != 1.0 {
                    *w *= pos_scale[c];
                } else if *w < 0.0 && neg_scale[c] != 1.0 {
                    *w *= neg_scale[c];
                }
            }
        }
    }

    /// Checks the projection's post-condition; returns the first offending
    /// neuron.
    pub fn check_normalized(&self, tol: f64) -> std::result::Result<(), usize> {
        for i in 0..self.fan_out() {
            let (p, n) = self.l1_parts(i);
            if (p > 0.0 && (p - 1.0).abs() > tol) || n > 1.0 + tol {
                return Err(i);
            }
        }
        Ok(())
    }

    /// `(Σ positive weights, Σ |negative weights|)` of neuron `i`.
    pub fn l1_parts(&self, i: usize) -> (f64, f64) {
        let mut p = 0.0;
        let mut n = 0.0;
        for r in 0..self.fan_in() {
            let w = self.weights.get(r, i);
            if w > 0.0 {
                p += w;
            } else {
                n -= w;
            }
        }
        (p, n)
    }
}

/// Returns the L1-projected copy of `layer`.
pub fn normalize_weights(layer: &LayerParams) -> LayerParams {
    let mut out = layer.clone();
    out.normalize();
    out
}

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `[-1/fan_in, 1/fan_in]`, then normalized.
    Uniform,
    /// Uniform in `±sqrt(6/(fan_in + fan_out))/2`: Glorot scaling for a
    /// sigmoid of gain 8. Not normalized.
    Glorot,
    /// Each neuron gets `inputs` strong connections (magnitude uniform in
    /// `[0.5, 1]`, alternating sign) over a faint uniform background of ±1e-3;
    /// positive and negative parts are then each scaled to unit L1 norm.
    Sparse { inputs: usize },
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitScheme::Uniform => f.write_str("uniform"),
            InitScheme::Glorot => f.write_str("glorot"),
            InitScheme::Sparse { inputs } => write!(f, "sparse:{inputs}"),
        }
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    /// `uniform`, `glorot` or `sparse:<inputs>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(InitScheme::Uniform),
            "glorot" => Ok(InitScheme::Glorot),
            _ => s
                .strip_prefix("sparse:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(|inputs| InitScheme::Sparse { inputs })
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown init scheme {s:?} (expected uniform, glorot or sparse:<n>)"
                    ))
                }),
        }
    }
}

const SPARSE_BACKGROUND: f64 = 1e-3;

fn fill_nonzero(values: &mut [f64], r: f64, rng: &mut RngStream) {
    for w in values {
        let mut v = 0.0;
        while v == 0.0 {
            v = rng.uniform(-r, r);
        }
        *w = v;
    }
}

fn sparse_layer(layer: &mut LayerParams, inputs: usize, rng: &mut RngStream) -> Result<()> {
    let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
    let mut column = vec![0.0; fan_in];
    for i in 0..fan_out {
        fill_nonzero(&mut column, SPARSE_BACKGROUND, rng);
        for t in 0..inputs {
            let j = rng.rand_index(fan_in)?;
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            column[j] = sign * rng.uniform(0.5, 1.0);
        }
        let pos: f64 = column.iter().filter(|w| **w > 0.0).sum();
        let neg: f64 = column.iter().filter(|w| **w < 0.0).map(|w| -w).sum();
        for (j, &w) in column.iter().enumerate() {
            let scaled = if w > 0.0 { w / pos } else { w / neg };
            layer.weights.set(j, i, scaled);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layer_sizes: Vec<usize>,
    pub layers: Vec<LayerParams>,
    pub filter: InputFilter,
}

impl NetworkParams {
    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], filter: InputFilter) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| LayerParams::zeros(w[0], w[1]))
            .collect();
        Ok(NetworkParams {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            filter,
        })
    }

    /// Weights uniform in `[-1/fan_in, 1/fan_in]` (never exactly zero), zero
    /// biases, followed by one normalization pass over the hidden layers.
    pub fn init(layer_sizes: &[usize], filter: InputFilter, rng: &mut RngStream) -> Result<Self> {
        NetworkParams::init_with(layer_sizes, filter, InitScheme::Uniform, rng)
    }

    /// Initializes weights with `scheme`; biases start at zero.
    pub fn init_with(
        layer_sizes: &[usize],
        filter: InputFilter,
        scheme: InitScheme,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut params = NetworkParams::zeros(layer_sizes, filter)?;
        match scheme {
            InitScheme::Uniform => {
                for layer in &mut params.layers {
                    let r = 1.0 / layer.fan_in() as f64;
                    fill_nonzero(layer.weights.as_mut_slice(), r, rng);
                }
                params.normalize();
            }
            InitScheme::Glorot => {
                for layer in &mut params.layers {
                    let r = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt() / 2.0;
                    fill_nonzero(layer.weights.as_mut_slice(), r, rng);
                }
            }
            InitScheme::Sparse { inputs } => {
                if inputs == 0 {
                    return Err(Error::InvalidArgument("sparse init needs at least one input".into()));
                }
                for layer in &mut params.layers {
                    sparse_layer(layer, inputs, rng)?;
                }
            }
        }
        Ok(params)
    }

    pub fn from_layers(layers: Vec<LayerParams>, filter: InputFilter) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("NetworkParams::from_layers"))?;
        let mut sizes = vec![first.fan_in()];
        for (k, layer) in layers.iter().enumerate() {
            if layer.fan_in() != *sizes.last().expect("non-empty") {
                return Err(Error::shape(
                    "NetworkParams::from_layers",
                    layers[k.saturating_sub(1)].weights.shape(),
                    layer.weights.shape(),
                ));
            }
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::shape(
                    "NetworkParams::from_layers",
                    layer.weights.shape(),
                    (layer.bias.len(), 1),
                ));
            }
            sizes.push(layer.fan_out());
        }
        Ok(NetworkParams {
            layer_sizes: sizes,
            layers,
            filter,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("at least two sizes")
    }

    /// Number of sigmoid layers (all layers but the softmax output).
    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_neurons(&self) -> usize {
        self.layer_sizes[1..self.layer_sizes.len() - 1].iter().sum()
    }

    /// Projects every hidden layer; the softmax readout is left free.
    pub fn normalize(&mut self) {
        let hidden = self.hidden_layers();
        for layer in &mut self.layers[..hidden] {
            layer.normalize();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least input and output sizes, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!("layer sizes must be positive: {sizes:?}")));
    }
    Ok(())
}

/// One layer's captured values, all `batch × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `IF(a_prev)`, the affine map's input.
    pub filtered: Matrix,
    /// Pre-activations `z`.
    pub pre: Matrix,
    /// `AF(z)` for hidden layers, softmax probabilities for the output layer.
    pub out: Matrix,
}

/// Every value produced by a forward pass (the extended data set of a batch).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub input: Matrix,
    pub layers: Vec<LayerTrace>,
}

impl ActivationTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Values feeding layer `k`: the raw input for `k = 0`, otherwise the
    /// previous layer's outputs.
    pub fn layer_input(&self, k: usize) -> &Matrix {
        if k == 0 {
            &self.input
        } else {
            &self.layers[k - 1].out
        }
    }

    pub fn logits(&self) -> &Matrix {
        &self.layers.last().expect("non-empty trace").pre
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.logits())
    }

    /// Checks that the trace was produced by a network of this shape.
    pub fn check_against(&self, params: &NetworkParams) -> Result<()> {
        if self.layers.len() != params.layers.len() {
            return Err(Error::StaleTrace(format!(
                "{} layers in trace, {} in network",
                self.layers.len(),
                params.layers.len()
            )));
        }
        if self.input.cols() != params.input_size() {
            return Err(Error::StaleTrace(format!(
                "input width {} vs {}",
                self.input.cols(),
                params.input_size()
            )));
        }
        for (k, (lt, lp)) in self.layers.iter().zip(&params.layers).enumerate() {
            let b = self.input.rows();
            if lt.pre.shape() != (b, lp.fan_out()) || lt.filtered.shape() != (b, lp.fan_in()) {
                return Err(Error::StaleTrace(format!("layer {k} shape mismatch")));
            }
        }
        Ok(())
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `pre = filtered · W + b` broadcast over rows.
pub(crate) fn affine(filtered: &Matrix, layer: &LayerParams) -> Result<Matrix> {
    let mut pre = matmul(filtered, &layer.weights)?;
    for r in 0..pre.rows() {
        for (z, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
            *z += b;
        }
    }
    Ok(pre)
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
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
    out
}

/// Runs one layer on its (unfiltered) input.
pub(crate) fn layer_forward(
    params: &NetworkParams,
    k: usize,
    layer_input: &Matrix,
) -> Result<LayerTrace> {
    let layer = &params.layers[k];
    if layer_input.cols() != layer.fan_in() {
        return Err(Error::shape("forward", layer_input.shape(), layer.weights.shape()));
    }
    let filtered = params.filter.apply_matrix(layer_input);
    let pre = affine(&filtered, layer)?;
    let out = if k + 1 == params.layers.len() {
        softmax_rows(&pre)
    } else {
        pre.map(activation)
    };
    Ok(LayerTrace { filtered, pre, out })
}

/// Forward pass capturing filtered inputs, pre-activations and outputs of
/// every layer.
pub fn forward(params: &NetworkParams, batch: &Matrix) -> Result<ActivationTrace> {
    if batch.cols() != params.input_size() {
        return Err(Error::shape(
            "forward",
            batch.shape(),
            (params.input_size(), params.layer_sizes[1]),
        ));
    }
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(params.layers.len());
    for k in 0..params.layers.len() {
        let input = if k == 0 { batch } else { &layers[k - 1].out };
        let lt = layer_forward(params, k, input)?;
        layers.push(lt);
    }
    Ok(ActivationTrace {
        input: batch.clone(),
        layers,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the output pre-activations.
pub fn classification_loss(trace: &ActivationTrace, labels: &[usize]) -> Result<(f64, Matrix)> {
    let logits = trace.logits();
    let probs = &trace.layers.last().expect("non-empty trace").out;
    let (b, classes) = logits.shape();
    if labels.len() != b {
        return Err(Error::shape("classification_loss", logits.shape(), (labels.len(), 1)));
    }
    if let Some(index) = labels.iter().position(|&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            classes,
        });
    }
    let mut loss = 0.0;
    let mut grad = probs.clone();
    let inv_b = 1.0 / b as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let g = grad.row_mut(r);
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v *= inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// Gradient container congruent with [`NetworkParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerParams>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn check_congruent(&self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient sets have {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.weights.shape() != b.weights.shape() || a.bias.len() != b.bias.len() {
                return Err(Error::shape("ParamGrads", a.weights.shape(), b.weights.shape()));
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(&b.weights, scale)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.scale(factor);
            for b in &mut l.bias {
                *b *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: ParamGrads,
    /// Gradient with respect to the raw input pixels.
    pub input_grad: Matrix,
    /// `∂loss/∂a` for each hidden layer's outputs, `batch × width`.
    pub activation_grads: Vec<Matrix>,
}

/// Reverse-mode gradients of a loss whose gradient with respect to the output
/// pre-activations is `output_grad`.
pub fn backward(
    params: &NetworkParams,
    trace: &ActivationTrace,
    output_grad: &Matrix,
) -> Result<Backward> {
    backward_with(params, trace, output_grad, None)
}

/// Like [`backward`], additionally adding `injected[k]` to `∂loss/∂a` of
/// hidden layer `k` (losses defined directly on hidden activations).
pub fn backward_with(
    params: &NetworkParams,
    trace: &ActivationTrace,
    output_grad: &Matrix,
    injected: Option<&[Matrix]>,
) -> Result<Backward> {
    trace.check_against(params)?;
    let last = params.layers.len() - 1;
    if output_grad.shape() != trace.layers[last].pre.shape() {
        return Err(Error::shape("backward", output_grad.shape(), trace.layers[last].pre.shape()));
    }
    if let Some(inj) = injected {
        if inj.len() != last {
            return Err(Error::InvalidArgument(format!(
                "expected {last} injected gradients, got {}",
                inj.len()
            )));
        }
        for (k, m) in inj.iter().enumerate() {
            if m.shape() != trace.layers[k].out.shape() {
                return Err(Error::shape("backward_with", m.shape(), trace.layers[k].out.shape()));
            }
        }
    }

    let mut grads = ParamGrads::zeros_like(params);
    let mut activation_grads = vec![Matrix::zeros(0, 0); last];
    let mut dz = output_grad.clone();
    let mut input_grad = Matrix::zeros(0, 0);
    for k in (0..=last).rev() {
        let lt = &trace.layers[k];
        let layer = &params.layers[k];
        grads.layers[k].weights = matmul_tn(&lt.filtered, &dz)?;
        grads.layers[k].bias = column_sums(&dz);

        let mut d_prev = matmul_nt(&dz, &layer.weights)?;
        for (d, &f) in d_prev.as_mut_slice().iter_mut().zip(lt.filtered.as_slice()) {
            *d *= params.filter.slope(f);
        }
        if k == 0 {
            input_grad = d_prev;
            break;
        }
        if let Some(inj) = injected {
            d_prev.add_scaled(&inj[k - 1], 1.0)?;
        }
        let a_prev = &trace.layers[k - 1].out;
        let mut dz_prev = d_prev.clone();
        for (d, &a) in dz_prev.as_mut_slice().iter_mut().zip(a_prev.as_slice()) {
            *d *= activation_slope(a);
        }
        activation_grads[k - 1] = d_prev;
        dz = dz_prev;
    }
    Ok(Backward {
        grads,
        input_grad,
        activation_grads,
    })
}

/// Gradient of the summed (not averaged) per-example cross-entropy with
/// respect to the input pixels. Row `i` depends only on example `i`.
pub fn input_gradient(params: &NetworkParams, batch: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let trace = forward(params, batch)?;
    let (_, mut dz) = classification_loss(&trace, labels)?;
    dz.scale(batch.rows() as f64);
    let last = params.layers.len() - 1;
    for k in (0..=last).rev() {
        let lt = &trace.layers[k];
        let mut d_prev = matmul_nt(&dz, &params.layers[k].weights)?;
        for (d, &f) in d_prev.as_mut_slice().iter_mut().zip(lt.filtered.as_slice()) {
            *d *= params.filter.slope(f);
        }
        if k == 0 {
            return Ok(d_prev);
        }
        for (d, &a) in d_prev.as_mut_slice().iter_mut().zip(trace.layers[k - 1].out.as_slice()) {
            *d *= activation_slope(a);
        }
        dz = d_prev;
    }
    unreachable!("loop returns at layer 0")
}

pub(crate) fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    sums
}

/// Class predictions, processed in chunks to bound memory.
pub fn predict(params: &NetworkParams, images: &Matrix) -> Result<Vec<usize>> {
    const CHUNK: usize = 1000;
    let mut out = Vec::with_capacity(images.rows());
    let mut start = 0;
    while start < images.rows() {
        let end = (start + CHUNK).min(images.rows());
        let idx: Vec<usize> = (start..end).collect();
        out.extend(forward(params, &images.select_rows(&idx))?.predictions());
        start = end;
    }
    Ok(out)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn filter_and_activation_values() {
        assert_eq!(input_filter(0.0), 0.5);
        assert!(close(input_filter(1.0), 1.0 / (1.0 + (-4.0f64).exp()), 1e-15));
        assert!(close(input_filter(1.0), 0.98201, 1e-5));
        assert!(close(input_filter(0.25), 0.73106, 1e-5));
        assert_eq!(activation(0.0), 0.5);
        assert!(close(activation(1.0), 0.99966, 1e-5));
        assert!(close(activation(-1.0), 0.000335, 1e-6));
    }

    #[test]
    fn filter_center_shifts_input() {
        let f = InputFilter {
            enabled: true,
            center: 0.5,
        };
        assert_eq!(f.apply(0.5), 0.5);
        assert_eq!(InputFilter::identity().apply(0.3), 0.3);
    }

    fn layer_from_column(col: &[f64]) -> LayerParams {
        LayerParams::new(Matrix::from_vec(col.len(), 1, col.to_vec()).unwrap(), vec![0.0]).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let l = normalize_weights(&layer_from_column(&[2.0, 2.0]));
        assert_eq!(l.neuron_weights(0), vec![0.5, 0.5]);
        let l = normalize_weights(&layer_from_column(&[0.2, 0.3, 0.5]));
        assert_eq!(l.neuron_weights(0), vec![0.2, 0.3, 0.5]);
        let l = normalize_weights(&layer_from_column(&[-2.0, -2.0]));
        assert_eq!(l.neuron_weights(0), vec![-0.5, -0.5]);
        let l = normalize_weights(&layer_from_column(&[-0.1, -0.2]));
        assert_eq!(l.neuron_weights(0), vec![-0.1, -0.2]);
        // mixed signs, zero untouched, bias untouched
        let mut l = layer_from_column(&[3.0, 0.0, -4.0, 1.0]);
        l.bias[0] = 7.0;
        let n = normalize_weights(&l);
        assert_eq!(n.neuron_weights(0), vec![0.75, 0.0, -1.0, 0.25]);
        assert_eq!(n.bias, vec![7.0]);
    }

    #[test]
    fn zero_network_outputs_half() {
        let params = NetworkParams::zeros(&[3, 4, 2, 2], InputFilter::default()).unwrap();
        let batch = Matrix::from_rows(&[[0.1, 0.9, 0.3], [1.0, 0.0, 0.5]]).unwrap();
        let trace = forward(&params, &batch).unwrap();
        for lt in &trace.layers[..2] {
            assert!(lt.out.as_slice().iter().all(|&a| a == 0.5));
        }
        assert_eq!(trace.layers[0].out.shape(), (2, 4));
        assert_eq!(trace.layers[1].out.shape(), (2, 2));
        assert_eq!(trace.layers[2].out.shape(), (2, 2));
    }

    #[test]
    fn single_neuron_composes_closed_forms() {
        let hidden = layer_from_column(&[1.0]);
        let out = LayerParams::zeros(1, 2);
        let params = NetworkParams::from_layers(vec![hidden, out], InputFilter::default()).unwrap();
        let trace = forward(&params, &Matrix::from_rows(&[[0.9]]).unwrap()).unwrap();
        let expected = activation(input_filter(0.9));
        assert!(close(trace.layers[0].out.get(0, 0), expected, 1e-15));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = NetworkParams::zeros(&[3, 2], InputFilter::default()).unwrap();
        assert!(matches!(
            forward(&params, &Matrix::zeros(1, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let params = NetworkParams::zeros(&[4, 10], InputFilter::default()).unwrap();
        let trace = forward(&params, &Matrix::zeros(3, 4)).unwrap();
        let (loss, _) = classification_loss(&trace, &[0, 5, 9]).unwrap();
        assert!(close(loss, 10f64.ln(), 1e-12));
        assert!(close(loss, 2.302585, 1e-6));
        assert!(matches!(
            classification_loss(&trace, &[0, 5, 10]),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut params = NetworkParams::zeros(&[1, 3], InputFilter::identity()).unwrap();
        params.layers[0].bias = vec![0.0, 60.0, 0.0];
        let trace = forward(&params, &Matrix::zeros(1, 1)).unwrap();
        let (loss, _) = classification_loss(&trace, &[1]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_direct_softmax() {
        let mut rng = RngStream::new(17);
        let mut params = NetworkParams::zeros(&[2, 3], InputFilter::identity()).unwrap();
        for w in params.layers[0].weights.as_mut_slice() {
            *w = rng.uniform(-2.0, 2.0);
        }
        params.layers[0].bias = vec![0.3, -0.1, 0.7];
        let x = Matrix::from_rows(&[[0.2, 0.8], [0.9, 0.1]]).unwrap();
        let labels = [2, 0];
        let trace = forward(&params, &x).unwrap();
        let (loss, _) = classification_loss(&trace, &labels).unwrap();
        // independent evaluation of -ln softmax[label]
        let mut direct = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    x.get(r, 0) * params.layers[0].weights.get(0, j)
                        + x.get(r, 1) * params.layers[0].weights.get(1, j)
                        + params.layers[0].bias[j]
                })
                .collect();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            direct -= (logits[label].exp() / denom).ln();
        }
        assert!(close(loss, direct / 2.0, 1e-12));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = RngStream::new(2);
        let params = NetworkParams::init(&[5, 4, 3], InputFilter::default(), &mut rng).unwrap();
        let x = Matrix::filled(2, 5, 0.3);
        let trace = forward(&params, &x).unwrap();
        let b = backward(&params, &trace, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(b.grads.max_abs(), 0.0);
        assert!(b.input_grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_slope_closed_form() {
        // dA/dz = 8·a·(1−a), checked against a central difference
        for &z in &[-0.7, -0.1, 0.0, 0.2, 0.9] {
            let a = activation(z);
            let h = 1e-6;
            let fd = (activation(z + h) - activation(z - h)) / (2.0 * h);
            assert!(close(activation_slope(a), fd, 1e-8));
        }
    }

    #[test]
    fn init_has_no_zero_weights_and_is_normalized() {
        let mut rng = RngStream::new(8);
        let params = NetworkParams::init(&[30, 20, 5], InputFilter::default(), &mut rng).unwrap();
        for l in &params.layers {
            assert!(l.weights.as_slice().iter().all(|&w| w != 0.0));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        assert!(params.layers[0].check_normalized(1e-9).is_ok());
        // The readout keeps its raw uniform draw.
        let r = 1.0 / 20.0;
        assert!(params.layers[1].weights.as_slice().iter().all(|w| w.abs() <= r));
    }

    #[test]
    fn sparse_init_has_unit_parts_and_strong_inputs() {
        let mut rng = RngStream::new(9);
        let sizes = [50, 40, 3];
        let params =
            NetworkParams::init_with(&sizes, InputFilter::default(), InitScheme::Sparse { inputs: 6 }, &mut rng)
                .unwrap();
        for l in &params.layers {
            assert!(l.weights.as_slice().iter().all(|&w| w != 0.0));
            for i in 0..l.fan_out() {
                let (pos, neg) = l.l1_parts(i);
                assert!((pos - 1.0).abs() < 1e-12 && (neg - 1.0).abs() < 1e-12, "{pos} {neg}");
                let strong = l.neuron_weights(i).iter().filter(|w| w.abs() > 0.02).count();
                assert!((1..=6).contains(&strong), "{strong}");
            }
        }
        assert!(NetworkParams::init_with(&sizes, InputFilter::default(), InitScheme::Sparse { inputs: 0 }, &mut rng).is_err());
    }

    #[test]
    fn init_scheme_text_round_trip() {
        for s in [InitScheme::Uniform, InitScheme::Glorot, InitScheme::Sparse { inputs: 8 }] {
            assert_eq!(s.to_string().parse::<InitScheme>().unwrap(), s);
        }
        for bad in ["", "sparse", "sparse:0", "sparse:x", "normal"] {
            assert!(bad.parse::<InitScheme>().is_err(), "{bad}");
        }
    }

    #[test]
    fn glorot_init_bounds() {
        let mut rng = RngStream::new(10);
        let params = NetworkParams::init_with(&[40, 20, 4], InputFilter::identity(), InitScheme::Glorot, &mut rng).unwrap();
        let r = (6.0f64 / 60.0).sqrt() / 2.0;
        let w = params.layers[0].weights.as_slice();
        assert!(w.iter().all(|v| v.abs() <= r && *v != 0.0));
        assert!(w.iter().any(|v| v.abs() > 0.8 * r));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = RngStream::new(4);
        let params = NetworkParams::init(&[6, 5, 4, 3], InputFilter::default(), &mut rng).unwrap();
        let x = Matrix::from_vec(3, 6, (0..18).map(|i| i as f64 / 18.0).collect()).unwrap();
        assert_eq!(forward(&params, &x).unwrap(), forward(&params, &x).unwrap());
    }

    #[test]
    fn input_gradient_rows_match_single_example_backward() {
        let mut rng = RngStream::new(12);
        let params = NetworkParams::init(&[6, 5, 3], InputFilter::default(), &mut rng).unwrap();
        let x = Matrix::from_vec(2, 6, (0..12).map(|i| (i as f64 * 0.37) % 1.0).collect()).unwrap();
        let labels = [1, 2];
        let g = input_gradient(&params, &x, &labels).unwrap();
        for r in 0..2 {
            let single = x.select_rows(&[r]);
            let trace = forward(&params, &single).unwrap();
            let (_, dz) = classification_loss(&trace, &labels[r..r + 1]).unwrap();
            let b = backward(&params, &trace, &dz).unwrap();
            for (a, e) in g.row(r).iter().zip(b.input_grad.row(0)) {
                assert!(close(*a, *e, 1e-15));
            }
        }
    }

    fn random_layer(fan_in: usize, fan_out: usize) -> impl Strategy<Value = LayerParams> {
        prop::collection::vec(-3.0f64..3.0, fan_in * fan_out).prop_map(move |w| {
            LayerParams::new(Matrix::from_vec(fan_in, fan_out, w).unwrap(), vec![0.0; fan_out]).unwrap()
        })
    }

    proptest! {
        #[test]
        fn normalization_bounds_and_idempotence(layer in random_layer(7, 4)) {
            let once = normalize_weights(&layer);
            for i in 0..once.fan_out() {
                let (p, n) = once.l1_parts(i);
                if p > 0.0 {
                    prop_assert!((p - 1.0).abs() < 1e-9);
                }
                prop_assert!(n <= 1.0 + 1e-9);
            }
            prop_assert_eq!(normalize_weights(&once), once);
        }
    }
}
