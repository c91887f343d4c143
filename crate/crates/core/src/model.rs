//! Small fully-connected classifiers with exact per-sample margins and
//! reverse-mode gradients.
//!
//! Parameters live in one flat [`ParamVector`]. The layout is layer by layer,
//! each layer storing its weight matrix row-major (`out x in`) followed by its
//! bias vector.
//!
//! The margin `h(s, y)` is the quantity that gets linearized:
//!
//! * binary head (`num_classes == 2`): the raw logit, with the loss
//!   `log(1 + exp(-y h))` for `y = ±1`;
//! * multi-class head: `log(p_y / (1 - p_y))` with `p_y` the softmax
//!   probability of the labeled class, so that `log(1 + exp(-h)) = -log p_y`;
//! * generative samples (one multi-class head per output position): the
//!   average of the per-position margins, whose gradient is the average of the
//!   per-position gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{GradexError, Result, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn default_positions() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// `2` selects the scalar binary-margin head.
    pub num_classes: usize,
    /// Number of output positions, each with its own multi-class head.
    #[serde(default = "default_positions")]
    pub num_positions: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims,
            activation: Activation::Tanh,
            num_classes,
            num_positions: 1,
            init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(GradexError::InvalidConfig("input_dim must be positive".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(GradexError::InvalidConfig("hidden widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(GradexError::InvalidConfig("num_classes must be at least 2".into()));
        }
        if self.num_positions == 0 {
            return Err(GradexError::InvalidConfig("num_positions must be positive".into()));
        }
        if self.num_classes == 2 && self.num_positions > 1 {
            return Err(GradexError::InvalidConfig(
                "multi-position heads require num_classes > 2".into(),
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(GradexError::InvalidConfig("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 2
    }

    /// Logits per output position.
    pub fn head_width(&self) -> usize {
        if self.is_binary() {
            1
        } else {
            self.num_classes
        }
    }

    pub fn output_dim(&self) -> usize {
        self.head_width() * self.num_positions
    }

    /// `(fan_in, fan_out)` for every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Width of the layer feeding the output heads.
    pub fn penultimate_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }
}

/// Flat parameter vector of a [`ModelConfig`]. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(GradexError::EmptyData("parameter vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GradexError::NonFinite("parameter vector"));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(p: usize) -> Self {
        ParamVector(vec![0.0; p])
    }

    /// Caller guarantees finiteness.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[cfg(test)]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.0, &other.0)
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len("parameter vector", self.len(), other.len())?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &ParamVector) -> Result<ParamVector> {
        check_len("parameter vector", self.len(), other.len())?;
        ParamVector::new(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    pub fn digest(&self) -> crate::digest::Digest {
        crate::digest::of_f64s(&self.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(GradexError::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Class index; binary tasks use `{0, 1}`.
    pub label: usize,
    pub task_id: TaskId,
    /// Per-position class labels for generative samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_labels: Option<Vec<usize>>,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize, task_id: TaskId) -> Self {
        Sample {
            features,
            label,
            task_id,
            position_labels: None,
        }
    }

    pub fn generative(features: Vec<f64>, position_labels: Vec<usize>, task_id: TaskId) -> Self {
        Sample {
            features,
            label: position_labels.first().copied().unwrap_or(0),
            task_id,
            position_labels: Some(position_labels),
        }
    }

    /// Sign `y` in the logistic form `log(1 + exp(-y h))`: `±1` for binary
    /// heads, `+1` for multi-class heads under the margin transform.
    pub fn y_sign(&self, cfg: &ModelConfig) -> f64 {
        if cfg.is_binary() && self.label == 0 {
            -1.0
        } else {
            1.0
        }
    }

    fn targets(&self, cfg: &ModelConfig) -> Result<Vec<usize>> {
        let targets = match &self.position_labels {
            Some(labels) => labels.clone(),
            None => vec![self.label],
        };
        check_len("position labels", cfg.num_positions, targets.len())?;
        if let Some(&bad) = targets.iter().find(|&&t| t >= cfg.num_classes) {
            return Err(GradexError::InvalidConfig(format!(
                "label {bad} out of range for {} classes",
                cfg.num_classes
            )));
        }
        Ok(targets)
    }
}

/// Deterministic initialization: weights `init_scale * N(0, 1) / sqrt(fan_in)`,
/// biases zero.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamVector> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = Vec::with_capacity(cfg.param_count());
    for (fan_in, fan_out) in cfg.layer_shapes() {
        let scale = cfg.init_scale / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(scale * z);
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Activations recorded during a forward pass.
struct Trace {
    /// Layer inputs: `inputs[0]` are the features, `inputs[l]` the post
    /// activation of hidden layer `l - 1`.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn forward(cfg: &ModelConfig, params: &[f64], features: &[f64]) -> Result<Trace> {
    check_len("parameter vector", cfg.param_count(), params.len())?;
    check_len("sample features", cfg.input_dim, features.len())?;
    let shapes = cfg.layer_shapes();
    let last = shapes.len() - 1;
    let mut inputs = Vec::with_capacity(shapes.len());
    let mut pre = Vec::with_capacity(last);
    let mut current = features.to_vec();
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let weights = &params[offset..offset + fan_in * fan_out];
        let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let z: Vec<f64> = weights
            .chunks_exact(fan_in)
            .zip(bias)
            .map(|(row, b)| dot(row, &current) + b)
            .collect();
        inputs.push(current);
        if l == last {
            return Ok(Trace {
                inputs,
                pre,
                output: z,
            });
        }
        current = z.iter().map(|&v| cfg.activation.apply(v)).collect();
        pre.push(z);
    }
    unreachable!("layer_shapes is never empty")
}

/// Accumulates `scale * d(output . d_output)/d(params)` into `grad`.
fn backward(cfg: &ModelConfig, params: &[f64], trace: &Trace, d_output: &[f64], scale: f64, grad: &mut [f64]) {
    let shapes = cfg.layer_shapes();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(fan_in, fan_out) in &shapes {
        offsets.push(offset);
        offset += fan_in * fan_out + fan_out;
    }
    let mut delta: Vec<f64> = d_output.iter().map(|d| d * scale).collect();
    for l in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[l];
        let base = offsets[l];
        let input = &trace.inputs[l];
        for (o, &dz) in delta.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += dz * a;
            }
            grad[base + fan_in * fan_out + o] += dz;
        }
        if l == 0 {
            break;
        }
        let weights = &params[base..base + fan_in * fan_out];
        let mut upstream = vec![0.0; fan_in];
        for (o, &dz) in delta.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            for (u, w) in upstream.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                *u += dz * w;
            }
        }
        let z = &trace.pre[l - 1];
        for ((u, &zv), &av) in upstream.iter_mut().zip(z).zip(input) {
            *u *= cfg.activation.derivative(zv, av);
        }
        delta = upstream;
    }
}

/// Per-position margin and its derivative with respect to that position's logits.
fn head_margin(cfg: &ModelConfig, logits: &[f64], target: usize, d_logits: &mut [f64]) -> f64 {
    if cfg.is_binary() {
        d_logits[0] = 1.0;
        return logits[0];
    }
    let others = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target)
        .map(|(_, &v)| v);
    let lse_others = log_sum_exp(others);
    for (k, d) in d_logits.iter_mut().enumerate() {
        *d = if k == target {
            1.0
        } else {
            -(logits[k] - lse_others).exp()
        };
    }
    logits[target] - lse_others
}

fn margin_parts(cfg: &ModelConfig, trace: &Trace, targets: &[usize]) -> (f64, Vec<f64>) {
    let width = cfg.head_width();
    let inv_positions = 1.0 / cfg.num_positions as f64;
    let mut d_output = vec![0.0; cfg.output_dim()];
    let mut h = 0.0;
    for (pos, &t) in targets.iter().enumerate() {
        let range = pos * width..(pos + 1) * width;
        h += head_margin(cfg, &trace.output[range.clone()], t, &mut d_output[range]);
    }
    d_output.iter_mut().for_each(|d| *d *= inv_positions);
    (h * inv_positions, d_output)
}

/// The margin `h_X(s, y)`.
pub fn margin(cfg: &ModelConfig, params: &ParamVector, sample: &Sample) -> Result<f64> {
    let targets = sample.targets(cfg)?;
    let trace = forward(cfg, params.as_slice(), &sample.features)?;
    Ok(margin_parts(cfg, &trace, &targets).0)
}

/// Margin together with its exact gradient with respect to every parameter.
pub fn margin_and_gradient(cfg: &ModelConfig, params: &ParamVector, sample: &Sample) -> Result<(f64, ParamVector)> {
    let targets = sample.targets(cfg)?;
    let trace = forward(cfg, params.as_slice(), &sample.features)?;
    let (h, d_output) = margin_parts(cfg, &trace, &targets);
    let mut grad = vec![0.0; params.len()];
    backward(cfg, params.as_slice(), &trace, &d_output, 1.0, &mut grad);
    Ok((h, ParamVector::from_vec_unchecked(grad)))
}

pub fn sample_margin_gradient(cfg: &ModelConfig, params: &ParamVector, sample: &Sample) -> Result<ParamVector> {
    margin_and_gradient(cfg, params, sample).map(|(_, g)| g)
}

fn loss_parts(cfg: &ModelConfig, trace: &Trace, targets: &[usize], y_sign: f64) -> (f64, Vec<f64>) {
    let mut d_output = vec![0.0; cfg.output_dim()];
    if cfg.is_binary() {
        let h = trace.output[0];
        d_output[0] = -y_sign * sigmoid(-y_sign * h);
        return (softplus(-y_sign * h), d_output);
    }
    let width = cfg.head_width();
    let inv_positions = 1.0 / cfg.num_positions as f64;
    let mut loss = 0.0;
    for (pos, &t) in targets.iter().enumerate() {
        let logits = &trace.output[pos * width..(pos + 1) * width];
        let lse = log_sum_exp(logits.iter().copied());
        loss += lse - logits[t];
        for (k, d) in d_output[pos * width..(pos + 1) * width].iter_mut().enumerate() {
            let p = (logits[k] - lse).exp();
            *d = (p - if k == t { 1.0 } else { 0.0 }) * inv_positions;
        }
    }
    (loss * inv_positions, d_output)
}

/// Per-sample loss: `log(1 + exp(-y h))` for binary heads, cross-entropy
/// (averaged over positions for generative samples) otherwise.
pub fn sample_loss(cfg: &ModelConfig, params: &ParamVector, sample: &Sample) -> Result<f64> {
    let targets = sample.targets(cfg)?;
    let trace = forward(cfg, params.as_slice(), &sample.features)?;
    Ok(loss_parts(cfg, &trace, &targets, sample.y_sign(cfg)).0)
}

/// Loss of one sample; `scale * d loss / d params` is added into `grad`.
pub(crate) fn accumulate_loss_gradient(
    cfg: &ModelConfig,
    params: &[f64],
    sample: &Sample,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let targets = sample.targets(cfg)?;
    let trace = forward(cfg, params, &sample.features)?;
    let (loss, d_output) = loss_parts(cfg, &trace, &targets, sample.y_sign(cfg));
    backward(cfg, params, &trace, &d_output, scale, grad);
    Ok(loss)
}

/// Activations of the last hidden layer (the features when there is none).
pub fn penultimate(cfg: &ModelConfig, params: &ParamVector, sample: &Sample) -> Result<Vec<f64>> {
    let mut trace = forward(cfg, params.as_slice(), &sample.features)?;
    Ok(trace.inputs.pop().expect("at least one layer input"))
}

/// Softmax probability of `class` at output position `pos`.
pub fn class_probability(cfg: &ModelConfig, params: &ParamVector, sample: &Sample, pos: usize, class: usize) -> Result<f64> {
    let trace = forward(cfg, params.as_slice(), &sample.features)?;
    if cfg.is_binary() {
        let p1 = sigmoid(trace.output[0]);
        return Ok(if class == 1 { p1 } else { 1.0 - p1 });
    }
    let width = cfg.head_width();
    let logits = &trace.output[pos * width..(pos + 1) * width];
    Ok((logits[class] - log_sum_exp(logits.iter().copied())).exp())
}
