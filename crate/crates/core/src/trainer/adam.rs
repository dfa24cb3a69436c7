use crate::tensor::Tensor;
use crate::{Error, Result};

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments for parameters of the given names and shapes.
    pub fn new(params: &[(String, Vec<usize>)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
            v: params.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One Adam descent step on `params` using `grads`.
///
/// All gradients are checked before any parameter is touched, so on error
/// the parameters and moments are left exactly as they were.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    epoch: usize,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!("adam_step: shape mismatch for {}", state.names[i])));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                epoch,
                location: state.names[i].clone(),
                detail: format!("gradient element {j} is {}", g.data()[j]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}
