//! Small layered models with analytic backprop.
//!
//! A model is `f = f_L ∘ … ∘ f_1`, each layer affine (`W a + b`) followed by
//! the shared activation on every layer except the last. The last layer
//! produces logits consumed by the head. Layer `l` stores its parameters
//! flattened as `W` row-major (`out × in`) followed by `b` (`out`).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    LogisticBinary,
    Softmax,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(in, out)` per layer.
    pub layer_dims: Vec<(usize, usize)>,
    pub activation: Activation,
    pub head: Head,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<(usize, usize)>, activation: Activation, head: Head) -> Result<Self> {
        let spec = ModelSpec {
            layer_dims,
            activation,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn logistic(input_dim: usize) -> Self {
        ModelSpec {
            layer_dims: vec![(input_dim, 1)],
            activation: Activation::Identity,
            head: Head::LogisticBinary,
        }
    }

    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            layer_dims: vec![(input_dim, 1)],
            activation: Activation::Identity,
            head: Head::Linear,
        }
    }

    /// Multi-layer perceptron `input → hidden… → out`.
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation, head: Head) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, output_dim));
        ModelSpec::new(dims, activation, head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for (i, &(din, dout)) in self.layer_dims.iter().enumerate() {
            if din == 0 || dout == 0 {
                return Err(Error::config(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && self.layer_dims[i - 1].1 != din {
                return Err(Error::config(format!(
                    "layer {i} input {din} does not match previous output {}",
                    self.layer_dims[i - 1].1
                )));
            }
        }
        let out = self.output_dim();
        match self.head {
            Head::LogisticBinary | Head::Linear if out != 1 => {
                Err(Error::config(format!("{:?} head needs a single output, got {out}", self.head)))
            }
            Head::Softmax if out < 2 => Err(Error::config("softmax head needs at least two outputs")),
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1].1
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn layer_param_dim(&self, layer: usize) -> usize {
        let (din, dout) = self.layer_dims[layer];
        dout * (din + 1)
    }

    pub fn layer_param_dims(&self) -> Vec<usize> {
        (0..self.num_layers()).map(|l| self.layer_param_dim(l)).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.layer_param_dims().iter().sum()
    }

    pub fn is_single_layer(&self) -> bool {
        self.layer_dims.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub layers: Vec<Vec<f64>>,
}

impl ModelParameters {
    /// Seeded uniform(−0.1, 0.1) initialization.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let dist = Uniform::new(-0.1, 0.1).expect("valid bounds");
        let layers = spec
            .layer_param_dims()
            .into_iter()
            .map(|d| (0..d).map(|_| dist.sample(&mut rng)).collect())
            .collect();
        ModelParameters { layers }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelParameters {
            layers: spec.layer_param_dims().into_iter().map(|d| vec![0.0; d]).collect(),
        }
    }

    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.total_dim() {
            return Err(Error::input(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                spec.total_dim()
            )));
        }
        let mut layers = Vec::with_capacity(spec.num_layers());
        let mut off = 0;
        for d in spec.layer_param_dims() {
            layers.push(flat[off..off + d].to_vec());
            off += d;
        }
        Ok(ModelParameters { layers })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers.iter().flatten().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let dims = spec.layer_param_dims();
        if self.layers.len() != dims.len() || self.layers.iter().zip(&dims).any(|(l, &d)| l.len() != d) {
            return Err(Error::input("parameter shapes do not match model spec"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    LogLoss,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Scale of additive Gaussian noise on the logits; 0 is deterministic.
    pub noise_sigma: f64,
    /// Weight of the `½‖θ‖²` regularizer.
    pub l2_lambda: f64,
}

impl LossSpec {
    pub fn log_loss() -> Self {
        LossSpec {
            kind: LossKind::LogLoss,
            noise_sigma: 0.0,
            l2_lambda: 0.0,
        }
    }

    pub fn squared_error() -> Self {
        LossSpec {
            kind: LossKind::SquaredError,
            noise_sigma: 0.0,
            l2_lambda: 0.0,
        }
    }

    pub fn with_noise(self, noise_sigma: f64) -> Self {
        LossSpec { noise_sigma, ..self }
    }

    pub fn with_l2(self, l2_lambda: f64) -> Self {
        LossSpec { l2_lambda, ..self }
    }

    /// Same loss, without noise and regularizer.
    pub fn data_only(self) -> Self {
        LossSpec {
            noise_sigma: 0.0,
            l2_lambda: 0.0,
            ..self
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if !(self.l2_lambda >= 0.0) || !self.l2_lambda.is_finite() {
            return Err(Error::config("l2_lambda must be finite and non-negative"));
        }
        match (self.kind, spec.head) {
            (LossKind::LogLoss, Head::LogisticBinary | Head::Softmax) | (LossKind::SquaredError, Head::Linear) => Ok(()),
            (kind, head) => Err(Error::config(format!("loss {kind:?} is not compatible with head {head:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Probabilities(Vec<f64>),
    Value(f64),
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Activations of every layer for one input: `pre[l]` are the affine
/// outputs of layer `l`, `post[l]` its input (`post[0] = x`).
pub(crate) struct ForwardTrace {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

pub(crate) fn trace_forward(spec: &ModelSpec, params: &ModelParameters, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != spec.input_dim() {
        return Err(Error::input(format!(
            "input has dimension {}, model expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let nl = spec.num_layers();
    let mut pre = Vec::with_capacity(nl);
    let mut post = Vec::with_capacity(nl);
    let mut a = x.to_vec();
    for (l, &(din, dout)) in spec.layer_dims.iter().enumerate() {
        let theta = &params.layers[l];
        let (w, b) = theta.split_at(din * dout);
        let z: Vec<f64> = (0..dout)
            .map(|o| {
                let row = &w[o * din..(o + 1) * din];
                row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
            })
            .collect();
        let next = if l + 1 < nl {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            Vec::new()
        };
        post.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    Ok(ForwardTrace { pre, post })
}

pub fn logits(spec: &ModelSpec, params: &ModelParameters, x: &[f64]) -> Result<Vec<f64>> {
    Ok(trace_forward(spec, params, x)?.pre.pop().expect("at least one layer"))
}

pub fn forward(spec: &ModelSpec, params: &ModelParameters, x: &[f64]) -> Result<Prediction> {
    let z = logits(spec, params, x)?;
    Ok(match spec.head {
        Head::LogisticBinary => {
            let p = sigmoid(z[0]);
            Prediction::Probabilities(vec![1.0 - p, p])
        }
        Head::Softmax => Prediction::Probabilities(softmax(&z)),
        Head::Linear => Prediction::Value(z[0]),
    })
}

fn check_label(spec: &ModelSpec, ex: &LabeledExample) -> Result<()> {
    let ok = match spec.head {
        Head::LogisticBinary => ex.y == 0.0 || ex.y == 1.0,
        Head::Softmax => ex.y.fract() == 0.0 && ex.y >= 0.0 && (ex.y as usize) < spec.output_dim(),
        Head::Linear => ex.y.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::input(format!(
            "label {} of example `{}` is invalid for {:?} head",
            ex.y, ex.id, spec.head
        )))
    }
}

/// Loss and `∂loss/∂logits` at the given logits.
pub(crate) fn head_loss(head: Head, z: &[f64], y: f64) -> (f64, Vec<f64>) {
    match head {
        Head::LogisticBinary => (softplus(z[0]) - y * z[0], vec![sigmoid(z[0]) - y]),
        Head::Softmax => {
            let k = y as usize;
            let mut g = softmax(z);
            g[k] -= 1.0;
            (logsumexp(z) - z[k], g)
        }
        Head::Linear => {
            let r = z[0] - y;
            (0.5 * r * r, vec![r])
        }
    }
}

/// `∂²loss/∂logits²`, row-major `out × out`.
pub(crate) fn head_hessian(head: Head, z: &[f64]) -> Vec<f64> {
    match head {
        Head::LogisticBinary => {
            let p = sigmoid(z[0]);
            vec![p * (1.0 - p)]
        }
        Head::Softmax => {
            let p = softmax(z);
            let k = p.len();
            let mut h = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    h[i * k + j] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
                }
            }
            h
        }
        Head::Linear => vec![1.0],
    }
}

/// Backpropagates `dz` (gradient wrt the logits) into per-layer gradients.
pub(crate) fn backprop(spec: &ModelSpec, params: &ModelParameters, trace: &ForwardTrace, dz: Vec<f64>) -> Vec<Vec<f64>> {
    let nl = spec.num_layers();
    let mut grads: Vec<Vec<f64>> = spec.layer_param_dims().into_iter().map(|d| vec![0.0; d]).collect();
    let mut delta = dz;
    for l in (0..nl).rev() {
        let (din, dout) = spec.layer_dims[l];
        let a = &trace.post[l];
        let g = &mut grads[l];
        for o in 0..dout {
            let d = delta[o];
            let row = &mut g[o * din..(o + 1) * din];
            for (gi, ai) in row.iter_mut().zip(a) {
                *gi = d * ai;
            }
            g[din * dout + o] = d;
        }
        if l > 0 {
            let w = &params.layers[l][..din * dout];
            let zprev = &trace.pre[l - 1];
            delta = (0..din)
                .map(|i| {
                    let s: f64 = (0..dout).map(|o| w[o * din + i] * delta[o]).sum();
                    s * spec.activation.derivative(zprev[i])
                })
                .collect();
        }
    }
    grads
}

fn evaluate<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParameters,
    ex: &LabeledExample,
    loss_spec: &LossSpec,
    delta: usize,
    rng: &mut R,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    if delta == 0 {
        return Err(Error::config("delta must be at least 1"));
    }
    loss_spec.validate(spec)?;
    check_label(spec, ex)?;
    let trace = trace_forward(spec, params, &ex.x)?;
    let z = trace.logits();
    let mut total = 0.0;
    let mut dz_sum = vec![0.0; z.len()];
    let mut noisy = z.to_vec();
    for _ in 0..delta {
        if loss_spec.noise_sigma > 0.0 {
            for (n, &zi) in noisy.iter_mut().zip(z) {
                let eps: f64 = StandardNormal.sample(rng);
                *n = zi + loss_spec.noise_sigma * eps;
            }
        }
        let (l, dz) = head_loss(spec.head, &noisy, ex.y);
        total += l;
        for (s, d) in dz_sum.iter_mut().zip(dz) {
            *s += d;
        }
    }
    let inv = 1.0 / delta as f64;
    let mut value = total * inv;
    if loss_spec.l2_lambda > 0.0 {
        value += loss_spec.l2_lambda * 0.5 * params.sq_norm();
    }
    if !value.is_finite() {
        return Err(Error::numerical(&ex.id, "non-finite loss"));
    }
    let grads = if want_grad {
        let dz: Vec<f64> = dz_sum.into_iter().map(|v| v * inv).collect();
        let mut g = backprop(spec, params, &trace, dz);
        if loss_spec.l2_lambda > 0.0 {
            for (gl, tl) in g.iter_mut().zip(&params.layers) {
                for (gi, ti) in gl.iter_mut().zip(tl) {
                    *gi += loss_spec.l2_lambda * ti;
                }
            }
        }
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numerical(&ex.id, "non-finite gradient"));
        }
        Some(g)
    } else {
        None
    };
    Ok((value, grads))
}

/// Mean loss over `delta` independent noise draws, plus the regularizer.
pub fn loss<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParameters,
    ex: &LabeledExample,
    loss_spec: &LossSpec,
    delta: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(evaluate(spec, params, ex, loss_spec, delta, rng, false)?.0)
}

/// Gradient of the δ-averaged loss, one vector per layer.
///
/// Consumes the random source exactly like [`loss`], so the same seed gives
/// the gradient of the same noisy loss.
pub fn grad_per_layer<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParameters,
    ex: &LabeledExample,
    loss_spec: &LossSpec,
    delta: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    Ok(evaluate(spec, params, ex, loss_spec, delta, rng, true)?
        .1
        .expect("gradient requested"))
}

pub fn loss_and_grad<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParameters,
    ex: &LabeledExample,
    loss_spec: &LossSpec,
    delta: usize,
    rng: &mut R,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (l, g) = evaluate(spec, params, ex, loss_spec, delta, rng, true)?;
    Ok((l, g.expect("gradient requested")))
}

/// Deterministic mean data loss (no noise, no regularizer) over a set.
pub fn mean_loss(spec: &ModelSpec, params: &ModelParameters, examples: &[LabeledExample], kind: LossKind) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::input("cannot evaluate loss on an empty set"));
    }
    let ls = LossSpec {
        kind,
        noise_sigma: 0.0,
        l2_lambda: 0.0,
    };
    let mut rng = rng_from(0);
    let mut total = 0.0;
    for ex in examples {
        total += loss(spec, params, ex, &ls, 1, &mut rng)?;
    }
    Ok(total / examples.len() as f64)
}
