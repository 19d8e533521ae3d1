//! Small fully-connected ReLU classifiers with softmax output.
//!
//! Forward and backward passes are generic over a scalar type. Instantiated
//! with `f64` they give plain evaluation and per-sample cross-entropy
//! gradients; instantiated with forward-mode dual numbers they give exact
//! Hessian-vector products (the tangent of the gradient along a direction),
//! which the hardness module's influence solver consumes.

use std::fs;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar abstraction shared by evaluation and tangent propagation.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn from_f64(x: f64) -> Self;
    /// Value part (ignores any tangent).
    fn primal(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn primal(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number: value plus directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Dual {
    pub fn new(v: f64, t: f64) -> Self {
        Dual { v, t }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.v + rhs.v, self.t + rhs.t)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.v - rhs.v, self.t - rhs.t)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.v * rhs.v, self.t * rhs.v + self.v * rhs.t)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.v;
        Dual::new(self.v * inv, (self.t - self.v * inv * rhs.t) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.t)
    }
}

impl Scalar for Dual {
    fn zero() -> Self {
        Dual::new(0.0, 0.0)
    }
    fn from_f64(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    fn primal(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.t * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.t / self.v)
    }
}

/// Parameters of one MLP, stored flat: per layer the row-major
/// `out × in` weight block followed by the bias block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer_widths: Vec<usize>,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layer_widths: &[usize]) -> Result<Self> {
        validate_widths(layer_widths)?;
        let total = param_count(layer_widths);
        Ok(ModelParams {
            layer_widths: layer_widths.to_vec(),
            data: vec![0.0; total],
        })
    }

    /// He-uniform weights (limit sqrt(6 / fan_in)), zero biases, drawn layer
    /// by layer in a fixed order from the given stream.
    pub fn he_uniform(layer_widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = Self::zeros(layer_widths)?;
        let mut off = 0;
        for l in 0..layer_widths.len() - 1 {
            let (n_in, n_out) = (layer_widths[l], layer_widths[l + 1]);
            let limit = (6.0 / n_in as f64).sqrt();
            let dist = Uniform::new(-limit, limit)
                .map_err(|e| Error::InvalidArgument(format!("init distribution: {e}")))?;
            for w in params.data[off..off + n_out * n_in].iter_mut() {
                *w = dist.sample(rng);
            }
            off += n_out * n_in + n_out; // biases stay zero
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must list at least input and output sizes, all positive: {widths:?}"
        )));
    }
    Ok(())
}

pub fn param_count(widths: &[usize]) -> usize {
    widths
        .windows(2)
        .map(|w| w[1] * w[0] + w[1])
        .sum()
}

// ---------------------------------------------------------------------------
// Generic forward / backward
// ---------------------------------------------------------------------------

/// Numerically stable softmax: subtracts the max primal before
/// exponentiating.
fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let mut max = logits[0];
    for &z in &logits[1..] {
        if z.primal() > max.primal() {
            max = z;
        }
    }
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut sum = S::zero();
    for &e in &exps {
        sum = sum + e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

struct ForwardCache<S> {
    /// Activations per layer, index 0 is the input.
    activations: Vec<Vec<S>>,
    probs: Vec<S>,
}

fn forward_cached<S: Scalar>(widths: &[usize], params: &[S], x: &[S]) -> ForwardCache<S> {
    let mut activations: Vec<Vec<S>> = Vec::with_capacity(widths.len());
    activations.push(x.to_vec());
    let mut off = 0;
    let last = widths.len() - 2;
    let mut logits = Vec::new();
    for l in 0..widths.len() - 1 {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = &params[off..off + n_out * n_in];
        let b = &params[off + n_out * n_in..off + n_out * n_in + n_out];
        off += n_out * n_in + n_out;
        let input = activations.last().unwrap();
        let mut z = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut acc = b[o];
            let row = &w[o * n_in..(o + 1) * n_in];
            for (wi, xi) in row.iter().zip(input.iter()) {
                acc = acc + *wi * *xi;
            }
            z.push(acc);
        }
        if l == last {
            logits = z;
        } else {
            // ReLU
            for v in z.iter_mut() {
                if v.primal() <= 0.0 {
                    *v = S::zero();
                }
            }
            activations.push(z);
        }
    }
    let probs = softmax(&logits);
    ForwardCache { activations, probs }
}

/// Cross-entropy loss and gradient for one sample; the gradient is scaled
/// by `scale` and added to `grad_acc` (same flat layout as the params).
fn backward_generic<S: Scalar>(
    widths: &[usize],
    params: &[S],
    x: &[S],
    label: usize,
    scale: S,
    grad_acc: &mut [S],
) -> S {
    let cache = forward_cached(widths, params, x);
    let loss = -(cache.probs[label].ln());

    // softmax + CE: dL/dz_i = p_i - 1{i == label}
    let mut delta: Vec<S> = cache.probs.clone();
    delta[label] = delta[label] - S::from_f64(1.0);

    // layer offsets, walked backwards
    let n_layers = widths.len() - 1;
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in 0..n_layers {
        offsets.push(off);
        off += widths[l + 1] * widths[l] + widths[l + 1];
    }

    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w_off = offsets[l];
        let b_off = w_off + n_out * n_in;
        let input = &cache.activations[l];

        for o in 0..n_out {
            let d = delta[o] * scale;
            let row = &mut grad_acc[w_off + o * n_in..w_off + (o + 1) * n_in];
            for (g, xi) in row.iter_mut().zip(input.iter()) {
                *g = *g + d * *xi;
            }
            grad_acc[b_off + o] = grad_acc[b_off + o] + d;
        }

        if l > 0 {
            // propagate through the weights, then gate by ReLU activity
            let w = &params[w_off..w_off + n_out * n_in];
            let mut prev = vec![S::zero(); n_in];
            for o in 0..n_out {
                let d = delta[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for (p, wi) in prev.iter_mut().zip(row.iter()) {
                    *p = *p + *wi * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input.iter()) {
                if a.primal() <= 0.0 {
                    *p = S::zero();
                }
            }
            delta = prev;
        }
    }
    loss
}

// ---------------------------------------------------------------------------
// Public f64 entry points
// ---------------------------------------------------------------------------

/// Class-probability vector for one input.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    let cache = forward_cached(&params.layer_widths, &params.data, x);
    if cache.probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("forward pass output".into()));
    }
    Ok(cache.probs)
}

/// Cross-entropy loss and flat gradient for one sample.
pub fn loss_and_gradient(params: &ModelParams, x: &[f64], label: u16) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.param_count()];
    let loss = accumulate_loss_gradient(params, x, label, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Flat backpropagation gradient of `-log p_label`.
pub fn per_sample_gradient(params: &ModelParams, x: &[f64], label: u16) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(params, x, label)?.1)
}

/// Adds `scale` times the per-sample gradient into `grad_acc`, returning the
/// sample loss. Errors if the loss turns non-finite so divergence is
/// reported instead of propagating NaNs.
pub fn accumulate_loss_gradient(
    params: &ModelParams,
    x: &[f64],
    label: u16,
    scale: f64,
    grad_acc: &mut [f64],
) -> Result<f64> {
    params.check_input(x)?;
    if label as usize >= params.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "label {label} outside [0, {})",
            params.n_classes()
        )));
    }
    if grad_acc.len() != params.param_count() {
        return Err(Error::ShapeMismatch("gradient buffer size".into()));
    }
    let loss = backward_generic(
        &params.layer_widths,
        &params.data,
        x,
        label as usize,
        scale,
        grad_acc,
    );
    if !loss.is_finite() {
        return Err(Error::NonFinite("per-sample loss".into()));
    }
    Ok(loss)
}

/// Exact Hessian-vector product of the mean cross-entropy loss over `batch`
/// with direction `v`, via tangent propagation through the gradient.
pub fn hessian_vector_product(
    params: &ModelParams,
    batch: &[(&[f64], u16)],
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != params.param_count() {
        return Err(Error::ShapeMismatch("direction vector size".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyPopulation("hessian-vector product batch".into()));
    }
    let dual_params: Vec<Dual> = params
        .data
        .iter()
        .zip(v.iter())
        .map(|(&p, &t)| Dual::new(p, t))
        .collect();
    let scale = Dual::from_f64(1.0 / batch.len() as f64);
    let mut grad = vec![Dual::zero(); params.param_count()];
    for &(x, label) in batch {
        params.check_input(x)?;
        let dx: Vec<Dual> = x.iter().map(|&xi| Dual::new(xi, 0.0)).collect();
        backward_generic(
            &params.layer_widths,
            &dual_params,
            &dx,
            label as usize,
            scale,
            &mut grad,
        );
    }
    let hv: Vec<f64> = grad.iter().map(|g| g.t).collect();
    if hv.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("hessian-vector product".into()));
    }
    Ok(hv)
}

/// Index of the largest probability; ties resolve to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Checkpoint persistence: shape header + f32 tensors
// ---------------------------------------------------------------------------

const PARAMS_MAGIC: &[u8; 4] = b"VPK1";

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + params.data.len() * 4);
    bytes.extend_from_slice(PARAMS_MAGIC);
    bytes.extend_from_slice(&(params.layer_widths.len() as u32).to_le_bytes());
    for &w in &params.layer_widths {
        bytes.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for &v in &params.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&pstr, e))?;
    let bad = |reason: &str| Error::MalformedFile {
        path: pstr.clone(),
        reason: reason.into(),
    };
    if bytes.len() < 8 || &bytes[..4] != PARAMS_MAGIC {
        return Err(bad("missing params magic"));
    }
    let n_widths = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + n_widths * 4;
    if n_widths < 2 || bytes.len() < header_end {
        return Err(bad("truncated shape header"));
    }
    let widths: Vec<usize> = bytes[8..header_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    validate_widths(&widths)?;
    let expected = param_count(&widths);
    if bytes.len() != header_end + expected * 4 {
        return Err(bad("tensor payload size disagrees with shape header"));
    }
    let data: Vec<f64> = bytes[header_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    Ok(ModelParams {
        layer_widths: widths,
        data,
    })
}
