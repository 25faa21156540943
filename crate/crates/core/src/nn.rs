//! Dense feed-forward networks over a flat parameter vector.
//!
//! Layer `l` maps width `m` to width `n` and owns `n * m` weights (row-major,
//! one row per output unit) followed by `n` biases. Hidden layers apply the
//! arch's activation; the last layer is linear and feeds the loss head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Softmax probabilities with cross-entropy against a class index.
    SoftmaxXent,
    /// Identity output with `0.5 * ||y - t||^2`.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetArch {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl NetArch {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        let arch = NetArch {
            layer_widths,
            activation,
            head,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 layer widths, got {}",
                self.layer_widths.len()
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive: {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated arch")
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_widths.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(|(m, n)| n * m + n).sum()
    }

    /// Multiply-add count of one forward pass: `2mn + n` per dense layer.
    pub fn forward_flops(&self) -> u64 {
        self.layers().map(|(m, n)| (2 * m * n + n) as u64).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params());
        for (m, n) in self.layers() {
            let s = (6.0 / (m + n) as f64).sqrt();
            params.extend((0..n * m).map(|_| rng.random_range(-s..s)));
            params.extend(std::iter::repeat_n(0.0, n));
        }
        params
    }

    pub fn init_seeded(&self, seed: u64) -> Vec<f64> {
        self.init_params(&mut util::rng(seed, 0x1a17))
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "arch {:?} needs {} parameters, got {}",
                self.layer_widths,
                self.n_params(),
                params.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

/// Activations recorded by a forward pass, needed for backpropagation.
#[derive(Clone, Debug)]
pub struct Cache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    activate_output: bool,
    fingerprint: u64,
}

impl Cache {
    /// Raw (pre-head) output of the last layer.
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    /// Output of the last layer after its activation (when activated).
    pub(crate) fn last(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }
}

/// Runs the dense stack. With `activate_output` the last layer is treated as
/// a hidden layer, which is how an encoder feeds its features forward.
pub(crate) fn propagate(
    arch: &NetArch,
    params: &[f64],
    x: &[f64],
    activate_output: bool,
    fingerprint: u64,
) -> Result<Cache> {
    arch.check_params(params)?;
    if x.len() != arch.input_width() {
        return Err(Error::Shape(format!(
            "input has length {}, arch expects {}",
            x.len(),
            arch.input_width()
        )));
    }
    let n_layers = arch.layer_widths.len() - 1;
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for (l, (m, n)) in arch.layers().enumerate() {
        let w = &params[offset..offset + n * m];
        let b = &params[offset + n * m..offset + n * m + n];
        offset += n * m + n;
        let a_in: &[f64] = if l == 0 { x } else { &post[l - 1] };
        let z: Vec<f64> = (0..n)
            .map(|j| b[j] + util::dot(&w[j * m..(j + 1) * m], a_in))
            .collect();
        let a = if l + 1 < n_layers || activate_output {
            z.iter().map(|&v| arch.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    Ok(Cache {
        input: x.to_vec(),
        pre,
        post,
        activate_output,
        fingerprint,
    })
}

/// Accumulates `dL/dparams` into `param_grad` given `dL/d(last layer output)`
/// and returns `dL/dx`.
pub(crate) fn backprop(
    arch: &NetArch,
    params: &[f64],
    cache: &Cache,
    grad_out: &[f64],
    param_grad: &mut [f64],
) -> Vec<f64> {
    let n_layers = arch.layer_widths.len() - 1;
    let widths: Vec<(usize, usize)> = arch.layers().collect();
    let mut offsets = Vec::with_capacity(n_layers);
    let mut acc = 0;
    for &(m, n) in &widths {
        offsets.push(acc);
        acc += n * m + n;
    }

    let mut delta: Vec<f64> = grad_out.to_vec();
    for l in (0..n_layers).rev() {
        let (m, n) = widths[l];
        if l + 1 < n_layers || cache.activate_output {
            for j in 0..n {
                delta[j] *= arch
                    .activation
                    .derivative(cache.pre[l][j], cache.post[l][j]);
            }
        }
        let a_in: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let off = offsets[l];
        let w = &params[off..off + n * m];
        for j in 0..n {
            let d = delta[j];
            if d != 0.0 {
                let row = &mut param_grad[off + j * m..off + (j + 1) * m];
                for (g, a) in row.iter_mut().zip(a_in) {
                    *g += d * a;
                }
            }
            param_grad[off + n * m + j] += d;
        }
        let mut prev = vec![0.0; m];
        for j in 0..n {
            let d = delta[j];
            if d != 0.0 {
                for (p, wv) in prev.iter_mut().zip(&w[j * m..(j + 1) * m]) {
                    *p += d * wv;
                }
            }
        }
        delta = prev;
    }
    delta
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Maps raw logits to the head's output.
pub fn head_output(head: Head, logits: &[f64]) -> Vec<f64> {
    match head {
        Head::SoftmaxXent => softmax(logits),
        Head::Mse => logits.to_vec(),
    }
}

/// Loss and `dL/dlogits` for one sample.
pub(crate) fn head_loss_grad(head: Head, logits: &[f64], target: &Target) -> Result<(f64, Vec<f64>)> {
    match (head, target) {
        (Head::SoftmaxXent, Target::Class(c)) => {
            if *c >= logits.len() {
                return Err(Error::Shape(format!(
                    "class {} out of range for {} outputs",
                    c,
                    logits.len()
                )));
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let mut g = softmax(logits);
            g[*c] -= 1.0;
            Ok((lse - logits[*c], g))
        }
        (Head::Mse, Target::Values(y)) => {
            if y.len() != logits.len() {
                return Err(Error::Shape(format!(
                    "target has length {}, output has {}",
                    y.len(),
                    logits.len()
                )));
            }
            let g: Vec<f64> = logits.iter().zip(y).map(|(o, t)| o - t).collect();
            let loss = 0.5 * g.iter().map(|d| d * d).sum::<f64>();
            Ok((loss, g))
        }
        (head, target) => Err(Error::Shape(format!(
            "target {target:?} does not fit head {head:?}"
        ))),
    }
}

/// Forward pass; returns the head output and the cache for [`backward`].
pub fn forward(arch: &NetArch, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, Cache)> {
    let cache = propagate(arch, params, x, false, util::fingerprint([params]))?;
    let out = head_output(arch.head, cache.logits());
    Ok((out, cache))
}

pub fn loss(arch: &NetArch, cache: &Cache, target: &Target) -> Result<f64> {
    head_loss_grad(arch.head, cache.logits(), target).map(|(l, _)| l)
}

/// Gradient of the head loss for the sample recorded in `cache`.
pub fn backward(arch: &NetArch, params: &[f64], cache: &Cache, target: &Target) -> Result<Vec<f64>> {
    arch.check_params(params)?;
    if cache.activate_output || cache.fingerprint != util::fingerprint([params]) {
        return Err(Error::Contract(
            "cache was not produced by forward on these parameters".into(),
        ));
    }
    let (_, g_out) = head_loss_grad(arch.head, cache.logits(), target)?;
    let mut grad = vec![0.0; params.len()];
    backprop(arch, params, cache, &g_out, &mut grad);
    Ok(grad)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_loss_grad(
    arch: &NetArch,
    params: &[f64],
    xs: &[Vec<f64>],
    targets: &[Target],
) -> Result<(f64, Vec<f64>)> {
    if xs.is_empty() || xs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "batch of {} inputs and {} targets",
            xs.len(),
            targets.len()
        )));
    }
    let fp = util::fingerprint([params]);
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for (x, t) in xs.iter().zip(targets) {
        let cache = propagate(arch, params, x, false, fp)?;
        let (l, g_out) = head_loss_grad(arch.head, cache.logits(), t)?;
        total += l;
        backprop(arch, params, &cache, &g_out, &mut grad);
    }
    let inv = 1.0 / xs.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Constant,
    InverseT,
}

/// Step size `eta0` (constant) or `eta0 / (1 + beta * t)` (inverse_t).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub eta0: f64,
    pub mode: ScheduleMode,
    #[serde(default)]
    pub beta: f64,
}

impl LrSchedule {
    pub fn constant(eta0: f64) -> Self {
        LrSchedule {
            eta0,
            mode: ScheduleMode::Constant,
            beta: 0.0,
        }
    }

    pub fn inverse_t(eta0: f64, beta: f64) -> Self {
        LrSchedule {
            eta0,
            mode: ScheduleMode::InverseT,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0.is_finite() && self.eta0 >= 0.0) {
            return Err(Error::Config(format!("eta0 must be >= 0, got {}", self.eta0)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn rate(&self, t: u64) -> f64 {
        match self.mode {
            ScheduleMode::Constant => self.eta0,
            ScheduleMode::InverseT => self.eta0 / (1.0 + self.beta * t as f64),
        }
    }
}

/// `params -= eta_t * gradient`, with `t >= 1`.
pub fn sgd_step(params: &mut [f64], gradient: &[f64], schedule: &LrSchedule, t: u64) -> Result<()> {
    if params.len() != gradient.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradient entries",
            params.len(),
            gradient.len()
        )));
    }
    if t == 0 {
        return Err(Error::Contract("step index starts at 1".into()));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {i} is {}", gradient[i])));
    }
    let eta = schedule.rate(t);
    for (p, g) in params.iter_mut().zip(gradient) {
        *p -= eta * g;
    }
    Ok(())
}
