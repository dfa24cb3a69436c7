//! Bayesian dense and convolutional layers with factorized Gaussian
//! posteriors `q(w) = ∏ N(μᵢ, σᵢ²)` stored as `(μ, ρ = log σ)`.
//!
//! Stochastic forward passes use the local reparameterization trick: the
//! pre-activation of each output unit is sampled directly from
//! `N(x·μ, x²·σ²)`, one ε per minibatch element and output unit.
//! Deterministic mode replaces every weight with its posterior mean.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};

use crate::autodiff::{Tape, Var};
use crate::rng::{sample_normal, sample_standard_normal, RngState};
use crate::tensor::{ConvGeometry, Tensor};
use crate::{Error, Result};

/// Initial mean of `log σ`.
pub const LOG_SIGMA_INIT_MEAN: f64 = -5.0;
/// Initial standard deviation of `log σ`.
pub const LOG_SIGMA_INIT_STD: f64 = 0.1;
/// Lower clamp for dropout rates returned by [`alpha_of`].
pub const ALPHA_MIN: f64 = 1e-8;
/// Upper clamp for dropout rates; also returned for `|μ| < MU_FLOOR`.
pub const ALPHA_MAX: f64 = 1e8;
/// Means below this magnitude are treated as zero when forming `σ²/μ²`.
pub const MU_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mu: Tensor,
    log_sigma: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::dim(format!(
                "posterior μ {:?} vs log σ {:?}",
                mu.shape(),
                log_sigma.shape()
            )));
        }
        Ok(Self { mu, log_sigma })
    }

    /// Posterior with every `log σ` equal to `log_sigma`.
    pub fn with_constant_log_sigma(mu: Tensor, log_sigma: f64) -> Self {
        let ls = Tensor::full(mu.shape(), log_sigma);
        Self { mu, log_sigma: ls }
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Tensor {
        &self.log_sigma
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Result<Tensor> {
        self.log_sigma.exp()
    }

    pub fn variance(&self) -> Result<Tensor> {
        self.log_sigma.map("variance", |r| (2.0 * r).exp())
    }

    /// Iterator over `(μᵢ, log σᵢ)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.mu.data().iter().copied().zip(self.log_sigma.data().iter().copied())
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.mu, &mut self.log_sigma)
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.mu, self.log_sigma)
    }
}

/// Elementwise dropout rate `αᵢ = σᵢ²/μᵢ²`, clamped to `[ALPHA_MIN, ALPHA_MAX]`.
pub fn alpha_of(post: &GaussianPosterior) -> Tensor {
    let data = post
        .pairs()
        .map(|(mu, rho)| {
            if mu.abs() < MU_FLOOR {
                return ALPHA_MAX;
            }
            let log_alpha = 2.0 * rho - 2.0 * mu.abs().ln();
            log_alpha.exp().clamp(ALPHA_MIN, ALPHA_MAX)
        })
        .collect();
    Tensor::from_parts(post.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { fan_in, fan_out } => vec![fan_in, fan_out],
            LayerKind::Conv2d {
                in_channels,
                filters,
                kernel_h,
                kernel_w,
                ..
            } => vec![filters, in_channels, kernel_h, kernel_w],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_out, .. } => fan_out,
            LayerKind::Conv2d { filters, .. } => filters,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_in, .. } => fan_in,
            LayerKind::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
        }
    }

    fn describe(&self) -> String {
        match *self {
            LayerKind::Dense { fan_in, fan_out } => format!("dense:{fan_in}:{fan_out}"),
            LayerKind::Conv2d {
                in_channels,
                filters,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if kernel_h == kernel_w {
                    format!("conv:{in_channels}:{filters}:{kernel_h}:{stride}:{padding}")
                } else {
                    format!("conv:{in_channels}:{filters}:{kernel_h}x{kernel_w}:{stride}:{padding}")
                }
            }
        }
    }
}

/// How biases are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    None,
    /// Point estimate: only `μ` is used and trained.
    Point,
    /// Full Gaussian posterior, regularized like the weights.
    Bayesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub bias: BiasMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Stochastic,
    /// Weights set to their posterior means.
    Deterministic,
}

/// Source of the ε draws used by stochastic forward passes.
pub enum Noise<'a> {
    Sample(&'a mut RngState),
    /// Pre-drawn ε per layer; each tensor must match that layer's output shape.
    Given(&'a [Tensor]),
}

/// How the per-weight variance is obtained during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightVariance {
    /// `σ² = exp(2ρ)` from the trained `log σ`.
    Free,
    /// `σ² = α μ²` with a frozen, shared α.
    FixedAlpha(f64),
}

/// Draws an initial posterior: `μ ~ N(0, 2/fan_in)`, `log σ ~ N(−5, 0.1²)`.
pub fn init_posterior(spec: &LayerSpec, rng: &mut RngState) -> GaussianPosterior {
    let shape = spec.kind.weight_shape();
    let std = (2.0 / spec.kind.fan_in() as f64).sqrt();
    let mu = sample_normal(rng, &shape, 0.0, std);
    let log_sigma = sample_normal(rng, &shape, LOG_SIGMA_INIT_MEAN, LOG_SIGMA_INIT_STD);
    GaussianPosterior { mu, log_sigma }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesLayer {
    pub spec: LayerSpec,
    pub weight: GaussianPosterior,
    pub bias: Option<GaussianPosterior>,
}

impl BayesLayer {
    pub fn new(spec: LayerSpec, weight: GaussianPosterior, bias: Option<GaussianPosterior>) -> Result<Self> {
        if weight.shape() != spec.kind.weight_shape().as_slice() {
            return Err(Error::dim(format!(
                "{} expects weights {:?}, got {:?}",
                spec.kind.describe(),
                spec.kind.weight_shape(),
                weight.shape()
            )));
        }
        match (&bias, spec.bias) {
            (None, BiasMode::None) => {}
            (Some(b), BiasMode::Point | BiasMode::Bayesian) if b.shape() == [spec.kind.bias_len()] => {}
            _ => return Err(Error::dim("bias posterior does not match layer spec")),
        }
        Ok(Self { spec, weight, bias })
    }

    pub fn init(spec: LayerSpec, rng: &mut RngState) -> Self {
        let weight = init_posterior(&spec, rng);
        let bias = match spec.bias {
            BiasMode::None => None,
            BiasMode::Point | BiasMode::Bayesian => {
                let n = spec.kind.bias_len();
                let ls = sample_normal(rng, &[n], LOG_SIGMA_INIT_MEAN, LOG_SIGMA_INIT_STD);
                Some(GaussianPosterior {
                    mu: Tensor::zeros(&[n]),
                    log_sigma: ls,
                })
            }
        };
        Self { spec, weight, bias }
    }

    pub fn bias_is_bayesian(&self) -> bool {
        self.spec.bias == BiasMode::Bayesian
    }
}

/// Tape handles for one layer's trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub mu: Var,
    /// Absent when the variance is tied to the mean (fixed α).
    pub log_sigma: Option<Var>,
    pub bias_mu: Option<Var>,
    pub bias_log_sigma: Option<Var>,
}

impl LayerVars {
    /// Registers the layer's parameters on `tape`.
    pub fn register(tape: &mut Tape, layer: &BayesLayer, variance: WeightVariance) -> Self {
        let free = matches!(variance, WeightVariance::Free);
        let mu = tape.param(layer.weight.mu.clone());
        let log_sigma = free.then(|| tape.param(layer.weight.log_sigma.clone()));
        let (bias_mu, bias_log_sigma) = match &layer.bias {
            None => (None, None),
            Some(b) => {
                let m = tape.param(b.mu.clone());
                let s = (free && layer.bias_is_bayesian()).then(|| tape.param(b.log_sigma.clone()));
                (Some(m), s)
            }
        };
        Self {
            mu,
            log_sigma,
            bias_mu,
            bias_log_sigma,
        }
    }
}

fn variance_var(
    tape: &mut Tape,
    mu: Var,
    log_sigma: Option<Var>,
    variance: WeightVariance,
) -> Result<Var> {
    match (variance, log_sigma) {
        (WeightVariance::Free, Some(ls)) => {
            let two = tape.scale(ls, 2.0)?;
            tape.exp(two)
        }
        (WeightVariance::FixedAlpha(alpha), _) => {
            let sq = tape.square(mu)?;
            tape.scale(sq, alpha)
        }
        (WeightVariance::Free, None) => Err(Error::contract("free variance needs log σ")),
    }
}

/// Shared local-reparameterization wiring for dense and conv layers.
fn reparam_forward(
    tape: &mut Tape,
    x: Var,
    layer: &BayesLayer,
    vars: &LayerVars,
    mode: EvalMode,
    variance: WeightVariance,
    eps: Option<Tensor>,
) -> Result<Var> {
    let linear = |tape: &mut Tape, input: Var, w: Var| -> Result<Var> {
        match layer.spec.kind {
            LayerKind::Dense { .. } => tape.matmul(input, w),
            LayerKind::Conv2d { stride, padding, .. } => tape.conv2d(input, w, stride, padding),
        }
    };
    let add_bias = |tape: &mut Tape, out: Var, b: Var| -> Result<Var> {
        match layer.spec.kind {
            LayerKind::Dense { .. } => tape.add_bias(out, b),
            LayerKind::Conv2d { .. } => tape.add_channel_bias(out, b),
        }
    };

    let mut mean = linear(tape, x, vars.mu)?;
    if let Some(bm) = vars.bias_mu {
        mean = add_bias(tape, mean, bm)?;
    }
    if mode == EvalMode::Deterministic {
        return Ok(mean);
    }

    let x2 = tape.square(x)?;
    let s2 = variance_var(tape, vars.mu, vars.log_sigma, variance)?;
    let mut var = linear(tape, x2, s2)?;
    if layer.bias_is_bayesian() {
        if let Some(bm) = vars.bias_mu {
            let bs2 = variance_var(tape, bm, vars.bias_log_sigma, variance)?;
            var = add_bias(tape, var, bs2)?;
        }
    }
    let eps = eps.ok_or_else(|| Error::contract("stochastic forward needs noise"))?;
    if eps.shape() != tape.value(var)?.shape() {
        return Err(Error::dim(format!(
            "noise shape {:?} vs output {:?}",
            eps.shape(),
            tape.value(var)?.shape()
        )));
    }
    let std = tape.sqrt(var)?;
    let eps = tape.constant(eps);
    let noise = tape.mul(std, eps)?;
    tape.add(mean, noise)
}

/// A feed-forward stack of Bayesian layers with ReLU between layers.
///
/// A 4-d activation entering a dense layer is flattened to `[B, C·H·W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesNet {
    pub layers: Vec<BayesLayer>,
}

/// Output of [`BayesNet::forward_tape`].
pub struct TapeForward {
    pub logits: Var,
    pub vars: Vec<LayerVars>,
}

impl BayesNet {
    pub fn new(layers: Vec<BayesLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        Ok(Self { layers })
    }

    /// Initializes every layer from `seed`; layer `i` uses its own split stream.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let root = RngState::new(seed).split(0x1417);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| BayesLayer::init(*s, &mut root.split(i as u64)))
            .collect();
        Self::new(layers)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Records a forward pass on `tape`, registering every parameter.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        mode: EvalMode,
        mut noise: Option<Noise<'_>>,
        variance: WeightVariance,
    ) -> Result<TapeForward> {
        let mut h = tape.constant(input.clone());
        let mut vars = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let shape = tape.value(h)?.shape().to_vec();
            if matches!(layer.spec.kind, LayerKind::Dense { .. }) && shape.len() != 2 {
                let rows = shape[0];
                let rest = shape[1..].iter().product();
                h = tape.reshape(h, &[rows, rest])?;
            }
            let lv = LayerVars::register(tape, layer, variance);
            let eps = match (mode, noise.as_mut()) {
                (EvalMode::Deterministic, _) => None,
                (EvalMode::Stochastic, None) => {
                    return Err(Error::contract("stochastic forward needs a noise source"))
                }
                (EvalMode::Stochastic, Some(n)) => {
                    let out_shape = self.output_shape(i, tape.value(h)?.shape())?;
                    Some(match n {
                        Noise::Sample(rng) => sample_standard_normal(rng, &out_shape),
                        Noise::Given(list) => list
                            .get(i)
                            .cloned()
                            .ok_or_else(|| Error::contract(format!("no noise for layer {i}")))?,
                    })
                }
            };
            h = reparam_forward(tape, h, layer, &lv, mode, variance, eps)?;
            if i != last {
                h = tape.relu(h)?;
            }
            vars.push(lv);
        }
        Ok(TapeForward { logits: h, vars })
    }

    fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        match self.layers[layer].spec.kind {
            LayerKind::Dense { fan_out, .. } => Ok(vec![input[0], fan_out]),
            LayerKind::Conv2d { stride, padding, .. } => {
                let g = ConvGeometry::new(
                    input,
                    &self.layers[layer].spec.kind.weight_shape(),
                    stride,
                    padding,
                )?;
                Ok(g.output_shape().to_vec())
            }
        }
    }

    /// Forward pass without gradient bookkeeping.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: EvalMode,
        noise: Option<Noise<'_>>,
        variance: WeightVariance,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, input, mode, noise, variance)?;
        Ok(tape.value(f.logits)?.clone())
    }

    /// Deterministic-mode logits, evaluated in chunks of `chunk` rows.
    pub fn predict(&self, input: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = input.rows();
        let mut out: Vec<f64> = Vec::new();
        let mut classes = 0;
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let part = self.forward(
                &input.select_rows(&idx)?,
                EvalMode::Deterministic,
                None,
                WeightVariance::Free,
            )?;
            classes = part.row_len();
            out.extend_from_slice(part.data());
        }
        Tensor::new(vec![n, classes], out)
    }

    /// Number of weight (non-bias) parameters.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    /// Canonical architecture string, e.g. `dense:784:300,dense:300:10`.
    pub fn describe(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.spec.kind.describe())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Dense `x[B×K] → [B×N]` through a single posterior.
pub fn dense_forward(
    x: &Tensor,
    post: &GaussianPosterior,
    mode: EvalMode,
    rng: &mut RngState,
) -> Result<Tensor> {
    let [k, n] = post.shape() else {
        return Err(Error::dim("dense posterior must be a matrix"));
    };
    let spec = LayerSpec {
        kind: LayerKind::Dense {
            fan_in: *k,
            fan_out: *n,
        },
        bias: BiasMode::None,
    };
    single_layer_forward(x, spec, post, mode, rng)
}

/// Zero-padded conv `x[B×C×H×W]` through a single `[F×C×kH×kW]` posterior.
pub fn conv_forward(
    x: &Tensor,
    post: &GaussianPosterior,
    stride: usize,
    padding: usize,
    mode: EvalMode,
    rng: &mut RngState,
) -> Result<Tensor> {
    let [f, c, kh, kw] = post.shape() else {
        return Err(Error::dim("conv posterior must be 4-d"));
    };
    let spec = LayerSpec {
        kind: LayerKind::Conv2d {
            in_channels: *c,
            filters: *f,
            kernel_h: *kh,
            kernel_w: *kw,
            stride,
            padding,
        },
        bias: BiasMode::None,
    };
    single_layer_forward(x, spec, post, mode, rng)
}

fn single_layer_forward(
    x: &Tensor,
    spec: LayerSpec,
    post: &GaussianPosterior,
    mode: EvalMode,
    rng: &mut RngState,
) -> Result<Tensor> {
    let net = BayesNet::new(vec![BayesLayer::new(spec, post.clone(), None)?])?;
    if matches!(spec.kind, LayerKind::Dense { .. }) && x.shape().len() != 2 {
        return Err(Error::dim(format!("dense input must be a matrix, got {:?}", x.shape())));
    }
    net.forward(x, mode, Some(Noise::Sample(rng)), WeightVariance::Free)
}

/// Parses an architecture description.
///
/// Accepted forms: `mlp:784-300-100-10`, or a comma-separated list of
/// `dense:IN:OUT` and `conv:CIN:COUT:K[xK2]:STRIDE:PAD` entries.
pub fn parse_architecture(text: &str) -> Result<Vec<LayerKind>> {
    let text = text.trim();
    let bad = |what: &str| Error::Config(format!("bad architecture `{text}`: {what}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(s));
    if let Some(sizes) = text.strip_prefix("mlp:") {
        let sizes: Vec<usize> = sizes.split('-').map(num).collect::<Result<_>>()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(bad("mlp needs at least two positive sizes"));
        }
        return Ok(sizes
            .windows(2)
            .map(|w| LayerKind::Dense {
                fan_in: w[0],
                fan_out: w[1],
            })
            .collect());
    }
    let mut layers = Vec::new();
    for item in text.split(',') {
        let parts: Vec<&str> = item.trim().split(':').collect();
        let layer = match parts.as_slice() {
            ["dense", i, o] => LayerKind::Dense {
                fan_in: num(i)?,
                fan_out: num(o)?,
            },
            ["conv", c, f, k, s, p] => {
                let (kh, kw) = match k.split_once('x') {
                    Some((a, b)) => (num(a)?, num(b)?),
                    None => (num(k)?, num(k)?),
                };
                LayerKind::Conv2d {
                    in_channels: num(c)?,
                    filters: num(f)?,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride: num(s)?,
                    padding: num(p)?,
                }
            }
            _ => return Err(bad(item)),
        };
        if layer.weight_shape().contains(&0) {
            return Err(bad("zero-sized layer"));
        }
        if let LayerKind::Conv2d { stride: 0, .. } = layer {
            return Err(bad("stride must be >= 1"));
        }
        layers.push(layer);
    }
    Ok(layers)
}
