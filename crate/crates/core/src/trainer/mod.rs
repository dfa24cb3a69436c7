//! Doubly stochastic variational training: minibatches for the data term,
//! local-reparameterization noise for the weights, Adam on `−ELBO`.

mod adam;

use std::fmt::Write as _;
use std::path::PathBuf;

pub use adam::{adam_step, AdamState};

use crate::autodiff::{Tape, Var};
use crate::bayes_nn::{save_checkpoint, BayesNet, EvalMode, GaussianPosterior, Noise, WeightVariance, MU_FLOOR};
use crate::data_io::{minibatches, Dataset};
use crate::objectives::{regularizer_on_tape, regularizer_value, ObjectiveKind, ObjectiveSpec};
use crate::rng::RngState;
use crate::sparsify::{self, SparsityReport, DEFAULT_TRIM_THRESHOLD};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `log σ` cap applied by default under the Gamma hyperprior.
pub const GAMMA_LOG_SIGMA_CLIP: f64 = -4.0;

const SHUFFLE_STREAM: u64 = 0x5348;
const NOISE_STREAM: u64 = 0x4e4f;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// First epoch of the linear decay to zero.
    pub lr_decay_start_epoch: usize,
    pub log_sigma_clip: Option<f64>,
    pub seed: u64,
    pub objective: ObjectiveSpec,
    /// Evaluate and checkpoint every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub trim_threshold: f64,
    /// Count biases in compression statistics.
    pub include_biases: bool,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults for `objective`: Adam at 1e-3, batch 100, decay from the
    /// midpoint, and the `log σ < −4` clip for the Gamma hyperprior.
    pub fn new(objective: ObjectiveSpec, epochs: usize) -> Self {
        let log_sigma_clip = matches!(objective.kind, ObjectiveKind::GammaMap2 { .. }).then_some(GAMMA_LOG_SIGMA_CLIP);
        Self {
            epochs,
            batch_size: 100,
            lr0: 1e-3,
            lr_decay_start_epoch: epochs / 2,
            log_sigma_clip,
            seed: 0,
            objective,
            eval_every: 1,
            trim_threshold: DEFAULT_TRIM_THRESHOLD,
            include_biases: false,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr_decay_start_epoch > self.epochs {
            return Err(Error::Config(format!(
                "lr_decay_start_epoch {} exceeds epochs {}",
                self.lr_decay_start_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.trim_threshold >= 0.0) {
            return Err(Error::Config("trim threshold must be >= 0".into()));
        }
        Ok(())
    }

    fn variance(&self) -> WeightVariance {
        match self.objective.kind {
            ObjectiveKind::FixedAlphaDropout { alpha } => WeightVariance::FixedAlpha(alpha),
            _ => WeightVariance::Free,
        }
    }
}

/// Learning rate for `epoch`: constant, then linear to zero at `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_decay_start_epoch || cfg.epochs == cfg.lr_decay_start_epoch {
        cfg.lr0
    } else {
        let left = cfg.epochs.saturating_sub(epoch) as f64;
        cfg.lr0 * left / (cfg.epochs - cfg.lr_decay_start_epoch) as f64
    }
}

/// Regularizer weight for `epoch`: `min(1, epoch / anneal_epochs)`.
pub fn anneal_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.objective.anneal_epochs {
        0 => 1.0,
        n => (epoch as f64 / n as f64).min(1.0),
    }
}

/// `log σ ← min(log σ, cap)` elementwise.
pub fn clip_log_sigma(post: &GaussianPosterior, cap: f64) -> GaussianPosterior {
    let ls = post.log_sigma().map("clip_log_sigma", |r| r.min(cap)).expect("clipping keeps values finite");
    GaussianPosterior::new(post.mu().clone(), ls).expect("shapes unchanged")
}

fn clip_in_place(t: &mut Tensor, cap: f64) {
    t.data_mut().iter_mut().for_each(|r| *r = r.min(cap));
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `−ELBO` estimate (annealed and scaled regularizer), averaged over the epoch.
    pub train_loss: f64,
    /// Expected log-likelihood estimate `−N · mean CE`.
    pub data_term: f64,
    /// Unscaled regularizer, averaged over the epoch.
    pub reg_term: f64,
    pub lr: f64,
    pub anneal_factor: f64,
    /// Trimmed deterministic-mode error in percent, when evaluated.
    pub test_error: Option<f64>,
    pub compression: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,data_term,reg_term,lr,anneal_factor,test_error,compression";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics history as CSV, followed by a `final` row holding the report's
/// test error and compression.
pub fn metrics_csv(history: &[EpochMetrics], report: Option<&SparsityReport>) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.epoch,
            m.train_loss,
            m.data_term,
            m.reg_term,
            m.lr,
            m.anneal_factor,
            opt(m.test_error),
            opt(m.compression)
        );
    }
    if let Some(r) = report {
        let _ = writeln!(out, "final,,,,,,{},{}", opt(r.test_error), opt(r.compression));
    }
    out
}

/// Which tensor of which layer a trainable slot refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Mu,
    LogSigma,
    BiasMu,
    BiasLogSigma,
}

fn slots(net: &BayesNet, variance: WeightVariance) -> Vec<(usize, Slot, String, Vec<usize>)> {
    let free = variance == WeightVariance::Free;
    let mut out = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        out.push((i, Slot::Mu, format!("layer {i} μ"), l.weight.shape().to_vec()));
        if free {
            out.push((i, Slot::LogSigma, format!("layer {i} log σ"), l.weight.shape().to_vec()));
        }
        if let Some(b) = &l.bias {
            out.push((i, Slot::BiasMu, format!("layer {i} bias μ"), b.shape().to_vec()));
            if free && l.bias_is_bayesian() {
                out.push((i, Slot::BiasLogSigma, format!("layer {i} bias log σ"), b.shape().to_vec()));
            }
        }
    }
    out
}

fn slot_tensor(net: &mut BayesNet, layer: usize, slot: Slot) -> &mut Tensor {
    let l = &mut net.layers[layer];
    match slot {
        Slot::Mu => l.weight.parts_mut().0,
        Slot::LogSigma => l.weight.parts_mut().1,
        Slot::BiasMu => l.bias.as_mut().expect("slot exists").parts_mut().0,
        Slot::BiasLogSigma => l.bias.as_mut().expect("slot exists").parts_mut().1,
    }
}

/// Total regularizer of `net` under `kind` (weights plus Bayesian biases).
pub fn network_regularizer(net: &BayesNet, kind: &ObjectiveKind) -> Result<f64> {
    let mut total = 0.0;
    for l in &net.layers {
        total += regularizer_value(&l.weight, kind)?;
        if l.bias_is_bayesian() {
            if let Some(b) = &l.bias {
                total += regularizer_value(b, kind)?;
            }
        }
    }
    Ok(total)
}

/// Scalar pieces of one minibatch objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct StepTerms {
    /// `−N · mean CE` on the batch.
    pub data_term: f64,
    pub reg_term: f64,
    /// `−(data_term + coef · reg_term)`.
    pub loss: f64,
}

struct RecordedStep {
    tape: Tape,
    loss: Var,
    vars: Vec<crate::bayes_nn::LayerVars>,
    terms: StepTerms,
}

#[allow(clippy::too_many_arguments)]
fn record_step(
    net: &BayesNet,
    batch: &Dataset,
    dataset_size: usize,
    kind: &ObjectiveKind,
    reg_coef: f64,
    variance: WeightVariance,
    mode: EvalMode,
    noise: Option<Noise<'_>>,
) -> Result<RecordedStep> {
    let mut tape = Tape::new();
    let fwd = net.forward_tape(&mut tape, &batch.inputs, mode, noise, variance)?;
    let ce = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
    let data_loss = tape.scale(ce, dataset_size as f64)?;

    let mut reg: Option<Var> = None;
    for (layer, lv) in net.layers.iter().zip(&fwd.vars) {
        let mut parts = Vec::with_capacity(2);
        if let Some(ls) = lv.log_sigma {
            parts.push((lv.mu, ls));
        }
        if let (Some(bm), Some(bs)) = (lv.bias_mu, lv.bias_log_sigma) {
            if layer.bias_is_bayesian() {
                parts.push((bm, bs));
            }
        }
        for (m, s) in parts {
            if let Some(r) = regularizer_on_tape(&mut tape, m, s, kind)? {
                reg = Some(match reg {
                    None => r,
                    Some(acc) => tape.add(acc, r)?,
                });
            }
        }
    }
    let (loss, reg_term) = match reg {
        Some(r) => {
            let scaled = tape.scale(r, -reg_coef)?;
            (tape.add(data_loss, scaled)?, tape.value(r)?.item()?)
        }
        None => (data_loss, 0.0),
    };
    let data_term = -tape.value(data_loss)?.item()?;
    let loss_value = tape.value(loss)?.item()?;
    Ok(RecordedStep {
        tape,
        loss,
        vars: fwd.vars,
        terms: StepTerms {
            data_term,
            reg_term,
            loss: loss_value,
        },
    })
}

/// Evaluates the minibatch objective without taking a step.
///
/// `noise` may supply pre-drawn ε per layer for reproducible estimates.
pub fn objective_terms(
    net: &BayesNet,
    batch: &Dataset,
    dataset_size: usize,
    spec: &ObjectiveSpec,
    anneal: f64,
    mode: EvalMode,
    noise: Option<Noise<'_>>,
) -> Result<StepTerms> {
    let variance = match spec.kind {
        ObjectiveKind::FixedAlphaDropout { alpha } => WeightVariance::FixedAlpha(alpha),
        _ => WeightVariance::Free,
    };
    let coef = spec.reg_scale * anneal;
    Ok(record_step(net, batch, dataset_size, &spec.kind, coef, variance, mode, noise)?.terms)
}

fn wrap_numeric(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numeric {
            epoch,
            location: format!("step {step}"),
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

pub struct TrainOutcome {
    pub net: BayesNet,
    pub history: Vec<EpochMetrics>,
    /// Trimmed evaluation after the final epoch.
    pub report: SparsityReport,
}

/// Trains `net` on `train` and evaluates on `eval` (or on `train` if absent).
pub fn train(net: BayesNet, train: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(net, train, eval, cfg, |_| {})
}

pub fn train_with_progress(
    mut net: BayesNet,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let eval = eval.unwrap_or(train);
    let variance = cfg.variance();
    let slot_list = slots(&net, variance);
    let shapes: Vec<(String, Vec<usize>)> = slot_list.iter().map(|(_, _, n, s)| (n.clone(), s.clone())).collect();
    let mut adam = AdamState::new(&shapes);
    let root = RngState::new(cfg.seed);
    let shuffle_root = root.split(SHUFFLE_STREAM);
    let noise_root = root.split(NOISE_STREAM);
    let n = train.len();
    let kind = cfg.objective.kind;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let anneal = anneal_at(epoch, cfg);
        let coef = cfg.objective.reg_scale * anneal;
        let batches = minibatches(n, cfg.batch_size, &mut shuffle_root.split(epoch as u64))?;
        let (mut loss_acc, mut data_acc, mut reg_acc) = (0.0, 0.0, 0.0);

        for idx in &batches {
            let step_result = (|| -> Result<()> {
                let batch = train.subset(idx)?;
                let mut eps_rng = noise_root.split(global_step as u64);
                let rec = record_step(
                    &net,
                    &batch,
                    n,
                    &kind,
                    coef,
                    variance,
                    EvalMode::Stochastic,
                    Some(Noise::Sample(&mut eps_rng)),
                )?;
                let mut grads = rec.tape.backward(rec.loss)?;
                let grad_list: Vec<Tensor> = slot_list
                    .iter()
                    .map(|(layer, slot, _, shape)| {
                        let lv = &rec.vars[*layer];
                        let var = match slot {
                            Slot::Mu => Some(lv.mu),
                            Slot::LogSigma => lv.log_sigma,
                            Slot::BiasMu => lv.bias_mu,
                            Slot::BiasLogSigma => lv.bias_log_sigma,
                        };
                        var.and_then(|v| grads.take(v)).unwrap_or_else(|| Tensor::zeros(shape))
                    })
                    .collect();
                let w = idx.len() as f64 / n as f64;
                loss_acc += w * rec.terms.loss;
                data_acc += w * rec.terms.data_term;
                reg_acc += w * rec.terms.reg_term;
                drop(rec);

                let mut targets: Vec<*mut Tensor> = Vec::with_capacity(slot_list.len());
                for (layer, slot, _, _) in &slot_list {
                    targets.push(slot_tensor(&mut net, *layer, *slot) as *mut Tensor);
                }
                // SAFETY: every slot names a distinct tensor inside `net`, so the
                // mutable references do not alias; `net` is not otherwise touched
                // while they are alive.
                let mut refs: Vec<&mut Tensor> = targets.into_iter().map(|p| unsafe { &mut *p }).collect();
                adam_step(&mut refs, &grad_list, &mut adam, lr, epoch)?;
                if let Some(cap) = cfg.log_sigma_clip {
                    for ((_, slot, _, _), t) in slot_list.iter().zip(refs.iter_mut()) {
                        if matches!(slot, Slot::LogSigma | Slot::BiasLogSigma) {
                            clip_in_place(t, cap);
                        }
                    }
                }
                Ok(())
            })();
            if let Err(e) = step_result {
                let e = wrap_numeric(e, epoch, global_step);
                if matches!(e, Error::Numeric { .. }) {
                    if let Some(path) = &cfg.checkpoint {
                        save_checkpoint(path, &finalize(&net, variance))?;
                    }
                }
                return Err(e);
            }
            global_step += 1;
        }

        let last = epoch + 1 == cfg.epochs;
        let evaluate = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let (test_error, compression) = if evaluate {
            let snapshot = finalize(&net, variance);
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(path, &snapshot)?;
            }
            let (_, r) = sparsify::evaluate_pruned(&snapshot, eval, cfg.trim_threshold, cfg.include_biases)?;
            (r.test_error, r.compression)
        } else {
            (None, None)
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_acc,
            data_term: data_acc,
            reg_term: reg_acc,
            lr,
            anneal_factor: anneal,
            test_error,
            compression,
        };
        on_epoch(&m);
        history.push(m);
    }

    let net = finalize(&net, variance);
    let (_, report) = sparsify::evaluate_pruned(&net, eval, cfg.trim_threshold, cfg.include_biases)?;
    Ok(TrainOutcome { net, history, report })
}

/// Materializes `log σ` for the fixed-α parameterization (`σ = √α |μ|`).
fn finalize(net: &BayesNet, variance: WeightVariance) -> BayesNet {
    let WeightVariance::FixedAlpha(alpha) = variance else {
        return net.clone();
    };
    let tie = |p: &GaussianPosterior| {
        let ls = p.mu().map("tied log σ", |m| 0.5 * alpha.ln() + m.abs().max(MU_FLOOR).ln()).expect("finite");
        GaussianPosterior::new(p.mu().clone(), ls).expect("same shape")
    };
    let mut out = net.clone();
    for l in &mut out.layers {
        l.weight = tie(&l.weight);
        if let Some(b) = &l.bias {
            l.bias = Some(tie(b));
        }
    }
    out
}

/// One row of a hyperprior sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub a: f64,
    pub test_error: f64,
    pub compression: Option<f64>,
}

/// Trains once per shape parameter `a` with the Gamma hyperprior, sharing
/// seed and initialization across runs.
pub fn sweep_gamma(
    init: &BayesNet,
    train_set: &Dataset,
    eval: Option<&Dataset>,
    base: &TrainConfig,
    b: f64,
    a_values: &[f64],
    mut on_run: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let mut cfg = base.clone();
        cfg.objective.kind = ObjectiveKind::GammaMap2 { a, b };
        let out = train(init.clone(), train_set, eval, &cfg)?;
        let row = SweepRow {
            a,
            test_error: out.report.test_error.unwrap_or(f64::NAN),
            compression: out.report.compression,
        };
        on_run(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Sweep results as CSV with columns `a,error_percent,compression`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("a,error_percent,compression\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.a, r.test_error, opt(r.compression));
    }
    out
}
