//! Deterministic-mode weights, magnitude trimming and compression accounting.

use serde::{Deserialize, Serialize};

use crate::bayes_nn::{BayesNet, GaussianPosterior};
use crate::data_io::Dataset;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_TRIM_THRESHOLD: f64 = 1e-2;

/// The posterior means.
pub fn deterministic_weights(post: &GaussianPosterior) -> Tensor {
    post.mu().clone()
}

/// Zeroes every weight with `|w| < threshold`; the mask marks survivors.
pub fn trim(weights: &Tensor, threshold: f64) -> Result<(Tensor, Vec<bool>)> {
    if !(threshold >= 0.0) {
        return Err(Error::contract(format!("trim threshold must be >= 0, got {threshold}")));
    }
    let mask: Vec<bool> = weights.data().iter().map(|w| w.abs() >= threshold).collect();
    let data = weights
        .data()
        .iter()
        .zip(&mask)
        .map(|(&w, &keep)| if keep { w } else { 0.0 })
        .collect();
    Ok((Tensor::new(weights.shape().to_vec(), data)?, mask))
}

/// `total / nonzero`.
pub fn compression(total: usize, nonzero: usize) -> Result<f64> {
    if nonzero == 0 {
        return Err(Error::Degenerate);
    }
    Ok(total as f64 / nonzero as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub kind: String,
    pub total: usize,
    pub nonzero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub threshold: f64,
    pub include_biases: bool,
    pub layers: Vec<LayerSparsity>,
    pub total: usize,
    pub nonzero: usize,
    /// `None` when every counted weight was trimmed.
    pub compression: Option<f64>,
    /// Deterministic-mode test error (percent) of the trimmed network.
    pub test_error: Option<f64>,
    /// `‖logits(trimmed) − logits(untrimmed)‖∞` on the evaluation set.
    pub max_logit_perturbation: Option<f64>,
}

impl SparsityReport {
    pub fn is_degenerate(&self) -> bool {
        self.nonzero == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad report json: {e}")))
    }
}

/// Nonzero counts after trimming, per layer and overall.
pub fn sparsity_report(net: &BayesNet, threshold: f64, include_biases: bool) -> Result<SparsityReport> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let (_, mask) = trim(layer.weight.mu(), threshold)?;
        let mut total = mask.len();
        let mut nonzero = mask.iter().filter(|&&k| k).count();
        if include_biases {
            if let Some(b) = &layer.bias {
                let (_, bm) = trim(b.mu(), threshold)?;
                total += bm.len();
                nonzero += bm.iter().filter(|&&k| k).count();
            }
        }
        let kind = match layer.spec.kind {
            crate::bayes_nn::LayerKind::Dense { .. } => "dense",
            crate::bayes_nn::LayerKind::Conv2d { .. } => "conv2d",
        };
        layers.push(LayerSparsity {
            layer: i,
            kind: kind.to_string(),
            total,
            nonzero,
        });
    }
    let total = layers.iter().map(|l| l.total).sum();
    let nonzero = layers.iter().map(|l| l.nonzero).sum();
    Ok(SparsityReport {
        threshold,
        include_biases,
        layers,
        total,
        nonzero,
        compression: compression(total, nonzero).ok(),
        test_error: None,
        max_logit_perturbation: None,
    })
}

/// Copy of `net` with trimmed means (biases trimmed only if `include_biases`).
pub fn trimmed_net(net: &BayesNet, threshold: f64, include_biases: bool) -> Result<BayesNet> {
    let mut out = net.clone();
    for layer in &mut out.layers {
        let (w, _) = trim(layer.weight.mu(), threshold)?;
        layer.weight = GaussianPosterior::new(w, layer.weight.log_sigma().clone())?;
        if include_biases {
            if let Some(b) = &layer.bias {
                let (bw, _) = trim(b.mu(), threshold)?;
                layer.bias = Some(GaussianPosterior::new(bw, b.log_sigma().clone())?);
            }
        }
    }
    Ok(out)
}

/// Percentage of misclassified samples under deterministic-mode evaluation.
pub fn error_rate(net: &BayesNet, data: &Dataset) -> Result<f64> {
    let logits = net.predict(&data.inputs, 1000)?;
    Ok(error_from_logits(&logits, &data.labels))
}

fn error_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let wrong = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Trims `net`, evaluates it on `eval`, and fills in the full report.
pub fn evaluate_pruned(
    net: &BayesNet,
    eval: &Dataset,
    threshold: f64,
    include_biases: bool,
) -> Result<(BayesNet, SparsityReport)> {
    let mut report = sparsity_report(net, threshold, include_biases)?;
    let pruned = trimmed_net(net, threshold, include_biases)?;
    let full = net.predict(&eval.inputs, 1000)?;
    let cut = pruned.predict(&eval.inputs, 1000)?;
    let perturbation = full
        .data()
        .iter()
        .zip(cut.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    report.test_error = Some(error_from_logits(&cut, &eval.labels));
    report.max_logit_perturbation = Some(perturbation);
    Ok((pruned, report))
}
