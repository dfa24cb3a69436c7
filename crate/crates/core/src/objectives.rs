//! Regularizers and analytic identities for variational ARD.
//!
//! Sign convention: every regularizer is the term *added* to the expected
//! log-likelihood in the ELBO, so the ARD-family terms are `≤ 0`.
//!
//! Per-weight terms are exposed with their partial derivatives with respect
//! to `(μ, ρ = log σ)` so the training tape can use them directly.

use statrs::function::gamma::ln_gamma;

use crate::autodiff::{Tape, Var};
use crate::bayes_nn::GaussianPosterior;
use crate::quadrature;
use crate::tensor::{sigmoid, Tensor};
use crate::{Error, Result};

/// Clamp applied to `log α` wherever it feeds a dropout-rate regularizer.
pub const LOG_ALPHA_MAX: f64 = 8.0 * std::f64::consts::LN_10;
pub const LOG_ALPHA_MIN: f64 = -LOG_ALPHA_MAX;

/// Constants of the sigmoid approximation to the Sparse VD KL term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdoConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub c: f64,
}

impl SvdoConstants {
    pub const STANDARD: Self = Self {
        k1: 0.63576,
        k2: 1.87320,
        k3: 1.48695,
        c: -0.63576,
    };
}

impl Default for SvdoConstants {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    /// `−½ Σ log(1 + μ²/σ²)`, the ARD ELBO with τ optimized out.
    Ard,
    /// `σ² = α μ²` with one frozen α; the regularizer is constant and dropped.
    FixedAlphaDropout { alpha: f64 },
    /// `−½ Σ log(1 + 1/αⱼ)` with per-weight α.
    ArdDropout,
    /// Sparse VD sigmoid approximation.
    SparseVd,
    /// Gamma(a, b) hyperprior on τ, τ set to its MAP-II value.
    GammaMap2 { a: f64, b: f64 },
}

impl ObjectiveKind {
    /// CLI name.
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Ard => "ard",
            ObjectiveKind::FixedAlphaDropout { .. } => "fixed-alpha",
            ObjectiveKind::ArdDropout => "ard-dropout",
            ObjectiveKind::SparseVd => "svdo",
            ObjectiveKind::GammaMap2 { .. } => "gamma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Multiplier on the regularizer, in `[0, 1]`; 0 trains the data term alone.
    pub reg_scale: f64,
    /// Epochs over which the regularizer weight ramps from 0 to 1.
    pub anneal_epochs: usize,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, reg_scale: f64, anneal_epochs: usize) -> Result<Self> {
        let spec = Self {
            kind,
            reg_scale,
            anneal_epochs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg_scale >= 0.0 && self.reg_scale <= 1.0) {
            return Err(Error::contract(format!(
                "reg_scale must lie in [0, 1], got {}",
                self.reg_scale
            )));
        }
        match self.kind {
            ObjectiveKind::GammaMap2 { a, b } => check_gamma_params(a, b),
            ObjectiveKind::FixedAlphaDropout { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::contract(format!("fixed α must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

fn check_gamma_params(a: f64, b: f64) -> Result<()> {
    if !(a > 0.5 && a.is_finite()) {
        return Err(Error::contract(format!(
            "Gamma hyperprior needs a > 1/2 for τ* to exist, got a = {a}"
        )));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::contract(format!("Gamma hyperprior needs b > 0, got b = {b}")));
    }
    Ok(())
}

fn check_positive(name: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|&v| v > 0.0) {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} must be strictly positive")))
    }
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Per-weight terms: (value, ∂/∂μ, ∂/∂ρ)
// ---------------------------------------------------------------------------

/// ARD term `−½ log(1 + μ²/σ²)`.
pub fn ard_term(mu: f64, rho: f64) -> (f64, f64, f64) {
    let inv_var = (-2.0 * rho).exp();
    let r = mu * mu * inv_var;
    let value = -0.5 * r.ln_1p();
    let dmu = -mu * inv_var / (1.0 + r);
    let drho = r / (1.0 + r);
    (value, dmu, drho)
}

/// Clamped `log α = 2ρ − 2 log|μ|` with its partials (zero inside the clamp).
pub fn log_alpha_term(mu: f64, rho: f64) -> (f64, f64, f64) {
    if mu.abs() < crate::bayes_nn::MU_FLOOR {
        return (LOG_ALPHA_MAX, 0.0, 0.0);
    }
    let la = 2.0 * rho - 2.0 * mu.abs().ln();
    if la > LOG_ALPHA_MAX {
        (LOG_ALPHA_MAX, 0.0, 0.0)
    } else if la < LOG_ALPHA_MIN {
        (LOG_ALPHA_MIN, 0.0, 0.0)
    } else {
        (la, -2.0 / mu, 2.0)
    }
}

/// ARD-dropout term `−½ log(1 + 1/α)` as a function of `log α`, with its derivative.
pub fn ard_dropout_term(log_alpha: f64) -> (f64, f64) {
    (-0.5 * softplus(-log_alpha), 0.5 * sigmoid(-log_alpha))
}

/// Sparse VD term `k1·σ(k2 + k3 log α) − ½ log(1 + 1/α) + C` and its derivative in `log α`.
pub fn svdo_term(log_alpha: f64, k: &SvdoConstants) -> (f64, f64) {
    let s = sigmoid(k.k2 + k.k3 * log_alpha);
    let (ard, dard) = ard_dropout_term(log_alpha);
    (k.k1 * s + ard + k.c, k.k1 * k.k3 * s * (1.0 - s) + dard)
}

/// `1/α = μ²/σ²` clamped to the `log α` range; `None` when the clamp is active.
#[inline]
fn inv_alpha(mu: f64, rho: f64) -> (f64, bool) {
    const R_MIN: f64 = 1e-8;
    const R_MAX: f64 = 1e8;
    if mu.abs() < crate::bayes_nn::MU_FLOOR {
        return (R_MIN, false);
    }
    let r = mu * mu * (-2.0 * rho).exp();
    if r < R_MIN {
        (R_MIN, false)
    } else if r > R_MAX {
        (R_MAX, false)
    } else {
        (r, true)
    }
}

/// ARD-dropout term in `(μ, ρ)` with the `log α` clamp: same values as
/// composing [`log_alpha_term`] with [`ard_dropout_term`], two transcendentals.
pub fn ard_dropout_pair(mu: f64, rho: f64) -> (f64, f64, f64) {
    let (r, live) = inv_alpha(mu, rho);
    let value = -0.5 * r.ln_1p();
    if !live {
        return (value, 0.0, 0.0);
    }
    let q = r / (1.0 + r);
    (value, -q / mu, q)
}

/// Sparse VD term in `(μ, ρ)` with the `log α` clamp.
pub fn svdo_pair(mu: f64, rho: f64, k: &SvdoConstants) -> (f64, f64, f64) {
    let (r, live) = inv_alpha(mu, rho);
    let la = -r.ln();
    let s = sigmoid(k.k2 + k.k3 * la);
    let value = k.k1 * s - 0.5 * r.ln_1p() + k.c;
    if !live {
        return (value, 0.0, 0.0);
    }
    let d = k.k1 * k.k3 * s * (1.0 - s) + 0.5 * r / (1.0 + r);
    (value, -2.0 * d / mu, 2.0 * d)
}

/// Gamma MAP-II constant `C = 1 − a + a log b − log Γ(a) + ½(2a−1) log(2a−1)`.
pub fn gamma_constant(a: f64, b: f64) -> f64 {
    let two_a = 2.0 * a - 1.0;
    1.0 - a + a * b.ln() - ln_gamma(a) + 0.5 * two_a * two_a.ln()
}

/// Gamma MAP-II term `½ log(σ²/(σ²+μ²+2b)^{2a−1}) + C`; `c` is the precomputed constant.
pub fn gamma_term(mu: f64, rho: f64, a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let s2 = (2.0 * rho).exp();
    let t = s2 + mu * mu + 2.0 * b;
    let k = 2.0 * a - 1.0;
    let value = rho - 0.5 * k * t.ln() + c;
    (value, -k * mu / t, 1.0 - k * s2 / t)
}

// ---------------------------------------------------------------------------
// Whole-posterior regularizers
// ---------------------------------------------------------------------------

pub fn ard_reg(post: &GaussianPosterior) -> f64 {
    post.pairs().map(|(m, r)| ard_term(m, r).0).sum()
}

pub fn ard_dropout_reg(alpha: &Tensor) -> Result<f64> {
    check_positive("α", alpha)?;
    Ok(alpha.data().iter().map(|a| ard_dropout_term(a.ln()).0).sum())
}

pub fn svdo_reg(alpha: &Tensor) -> Result<f64> {
    svdo_reg_with(alpha, &SvdoConstants::STANDARD)
}

pub fn svdo_reg_with(alpha: &Tensor, k: &SvdoConstants) -> Result<f64> {
    check_positive("α", alpha)?;
    Ok(alpha
        .data()
        .iter()
        .map(|a| svdo_term(a.ln().clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX), k).0)
        .sum())
}

pub fn gamma_map2_reg(post: &GaussianPosterior, a: f64, b: f64) -> Result<f64> {
    check_gamma_params(a, b)?;
    let c = gamma_constant(a, b);
    Ok(post.pairs().map(|(m, r)| gamma_term(m, r, a, b, c).0).sum())
}

/// `τᵢ* = 1/(μᵢ² + σᵢ²)`.
pub fn optimal_tau(post: &GaussianPosterior) -> Tensor {
    let data = post.pairs().map(|(m, r)| 1.0 / (m * m + (2.0 * r).exp())).collect();
    Tensor::from_parts(post.shape().to_vec(), data)
}

/// `τᵢ* = (2a − 1)/(σᵢ² + μᵢ² + 2b)`.
pub fn optimal_tau_gamma(post: &GaussianPosterior, a: f64, b: f64) -> Result<Tensor> {
    if !(a > 0.5) {
        return Err(Error::contract(format!("τ* under the Gamma hyperprior needs a > 1/2, got {a}")));
    }
    if !(b >= 0.0) {
        return Err(Error::contract(format!("b must be nonnegative, got {b}")));
    }
    let data = post
        .pairs()
        .map(|(m, r)| (2.0 * a - 1.0) / ((2.0 * r).exp() + m * m + 2.0 * b))
        .collect();
    Tensor::new(post.shape().to_vec(), data)
}

/// `Σᵢ KL(N(μᵢ, σᵢ²) ‖ N(0, τᵢ⁻¹))`.
pub fn kl_given_tau(post: &GaussianPosterior, tau: &Tensor) -> Result<f64> {
    if tau.shape() != post.shape() {
        return Err(Error::dim("τ shape differs from posterior"));
    }
    check_positive("τ", tau)?;
    Ok(post
        .pairs()
        .zip(tau.data())
        .map(|((m, r), &t)| kl_term(m, r, t))
        .sum())
}

/// Single-weight `KL(N(μ, σ²) ‖ N(0, τ⁻¹))`.
pub fn kl_term(mu: f64, rho: f64, tau: f64) -> f64 {
    let s2 = (2.0 * rho).exp();
    -0.5 + 0.5 * tau * (s2 + mu * mu) - 0.5 * (tau.ln() + 2.0 * rho)
}

/// `Σᵢ log Gamma(τᵢ | a, b)` (shape a, rate b).
pub fn log_gamma_prior(tau: &Tensor, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::contract("Gamma density needs a, b > 0"));
    }
    check_positive("τ", tau)?;
    let norm = a * b.ln() - ln_gamma(a);
    Ok(tau.data().iter().map(|&t| norm + (a - 1.0) * t.ln() - b * t).sum())
}

fn check_density_params(a: f64, b: f64) -> Result<()> {
    if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("density needs a, b > 0, got a = {a}, b = {b}")))
    }
}

/// Generalized Student-t density with `ν = 2a`, location 0, precision `λ = a/b`.
pub fn student_pdf(w: f64, a: f64, b: f64) -> Result<f64> {
    check_density_params(a, b)?;
    let nu = 2.0 * a;
    let lambda = a / b;
    let log_pdf = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu)
        + 0.5 * (lambda / (std::f64::consts::PI * nu)).ln()
        - 0.5 * (nu + 1.0) * (lambda * w * w / nu).ln_1p();
    Ok(log_pdf.exp())
}

/// Absolute tolerance of [`marginal_prior_quadrature`].
pub const MARGINAL_ABS_TOL: f64 = 1e-9;

/// `∫ N(w | 0, τ⁻¹) Gamma(τ | a, b) dτ` by adaptive quadrature in `s = log τ`.
pub fn marginal_prior_quadrature(w: f64, a: f64, b: f64) -> Result<f64> {
    check_density_params(a, b)?;
    let rate = 0.5 * w * w + b;
    let shape = a + 0.5;
    // log integrand: shape·s − rate·eˢ + const, peaked at s* = log(shape/rate)
    let norm = a * b.ln() - ln_gamma(a) - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let peak = (shape / rate).ln();
    let lo = peak - 80.0 / shape;
    let hi = peak + 7.0;
    let f = |s: f64| (shape * s - rate * s.exp() + norm).exp();
    quadrature::integrate(f, lo, hi, MARGINAL_ABS_TOL, 0.0).map(|q| q.value)
}

/// `data_term + reg_scale · anneal · reg_term`.
pub fn elbo_value(data_term: f64, reg_term: f64, spec: &ObjectiveSpec, anneal: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&anneal) {
        return Err(Error::contract(format!("anneal factor {anneal} outside [0, 1]")));
    }
    Ok(data_term + spec.reg_scale * anneal * reg_term)
}

/// Records the regularizer of one posterior on the tape.
///
/// Returns `None` for the fixed-α objective, whose regularizer is constant.
pub fn regularizer_on_tape(
    tape: &mut Tape,
    mu: Var,
    log_sigma: Var,
    kind: &ObjectiveKind,
) -> Result<Option<Var>> {
    let v = match *kind {
        ObjectiveKind::FixedAlphaDropout { .. } => return Ok(None),
        ObjectiveKind::Ard => tape.pair_reduce(mu, log_sigma, ard_term)?,
        ObjectiveKind::ArdDropout => tape.pair_reduce(mu, log_sigma, ard_dropout_pair)?,
        ObjectiveKind::SparseVd => {
            let k = SvdoConstants::STANDARD;
            tape.pair_reduce(mu, log_sigma, move |m, r| svdo_pair(m, r, &k))?
        }
        ObjectiveKind::GammaMap2 { a, b } => {
            check_gamma_params(a, b)?;
            let c = gamma_constant(a, b);
            tape.pair_reduce(mu, log_sigma, move |m, r| gamma_term(m, r, a, b, c))?
        }
    };
    Ok(Some(v))
}

/// Plain-value regularizer of one posterior for the given objective.
pub fn regularizer_value(post: &GaussianPosterior, kind: &ObjectiveKind) -> Result<f64> {
    Ok(match *kind {
        ObjectiveKind::FixedAlphaDropout { .. } => 0.0,
        ObjectiveKind::Ard => ard_reg(post),
        ObjectiveKind::ArdDropout => post
            .pairs()
            .map(|(m, r)| ard_dropout_pair(m, r).0)
            .sum(),
        ObjectiveKind::SparseVd => post
            .pairs()
            .map(|(m, r)| svdo_pair(m, r, &SvdoConstants::STANDARD).0)
            .sum(),
        ObjectiveKind::GammaMap2 { a, b } => gamma_map2_reg(post, a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{LN_2, PI};

    fn single(mu: f64, sigma: f64) -> GaussianPosterior {
        GaussianPosterior::new(Tensor::scalar(mu), Tensor::scalar(sigma.ln())).unwrap()
    }

    #[test]
    fn ard_examples() {
        let zero = GaussianPosterior::with_constant_log_sigma(Tensor::zeros(&[4]), -1.0);
        assert_eq!(ard_reg(&zero), 0.0);
        assert!((ard_reg(&single(1.0, 1.0)) + 0.5 * LN_2).abs() < 1e-15);
        assert!((ard_reg(&single(1.0, 1.0)) + 0.346_573_6).abs() < 1e-7);
    }

    #[test]
    fn ard_dropout_examples() {
        let one = Tensor::scalar(1.0);
        assert!((ard_dropout_reg(&one).unwrap() + 0.5 * LN_2).abs() < 1e-15);
        let big = ard_dropout_reg(&Tensor::scalar(1e12)).unwrap();
        assert!(big < 0.0 && big > -1e-12);
        assert!(ard_dropout_reg(&Tensor::scalar(0.0)).is_err());
        assert!(ard_dropout_reg(&Tensor::scalar(-1.0)).is_err());
    }

    #[test]
    fn svdo_at_alpha_one() {
        // hand evaluation: k1·σ(k2) − ½ ln 2 − k1
        let k1 = 0.63576;
        let want = k1 / (1.0 + (-1.87320f64).exp()) - 0.5 * LN_2 - k1;
        let got = svdo_reg(&Tensor::scalar(1.0)).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!(svdo_reg(&Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn svdo_tail_bound_at_large_alpha() {
        let a = Tensor::scalar(1e6);
        let gap = ard_dropout_reg(&a).unwrap() - svdo_reg(&a).unwrap();
        assert!(gap > 0.0 && gap < 1e-9, "gap {gap}");
    }

    #[test]
    fn gamma_parameter_checks() {
        let p = single(0.3, 0.2);
        assert!(gamma_map2_reg(&p, 0.505, 1e-8).is_ok());
        assert!(gamma_map2_reg(&p, 0.5, 1e-8).is_err());
        assert!(gamma_map2_reg(&p, 1.0, 0.0).is_err());
        assert!(optimal_tau_gamma(&p, 0.5, 1.0).is_err());
        assert!(ObjectiveSpec::new(ObjectiveKind::GammaMap2 { a: 0.4, b: 1e-8 }, 1.0, 0).is_err());
        assert!(ObjectiveSpec::new(ObjectiveKind::Ard, -0.1, 0).is_err());
        assert!(ObjectiveSpec::new(ObjectiveKind::Ard, 1.5, 0).is_err());
        assert!(ObjectiveSpec::new(ObjectiveKind::Ard, 0.0, 0).is_ok());
        assert!(ObjectiveSpec::new(ObjectiveKind::Ard, 0.05, 20).is_ok());
    }

    #[test]
    fn tau_examples() {
        assert!((optimal_tau(&single(0.6, 0.8)).data()[0] - 1.0).abs() < 1e-15);
        assert!((optimal_tau(&single(0.0, 1.0)).data()[0] - 1.0).abs() < 1e-15);
        let t = optimal_tau_gamma(&single(0.5, 0.5), 0.75, 0.5).unwrap();
        assert!((t.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        let p = single(0.7, 0.4);
        let g = optimal_tau_gamma(&p, 1.0, 0.0).unwrap();
        assert!((g.data()[0] - optimal_tau(&p).data()[0]).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_when_q_equals_p() {
        let p = single(0.0, 1.0);
        assert!(kl_given_tau(&p, &Tensor::scalar(1.0)).unwrap().abs() < 1e-15);
        assert!(kl_given_tau(&p, &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn cauchy_special_case() {
        assert!((student_pdf(0.0, 0.5, 0.5).unwrap() - 1.0 / PI).abs() < 1e-14);
        assert!((student_pdf(2.0, 0.5, 0.5).unwrap() - 1.0 / (5.0 * PI)).abs() < 1e-14);
        assert!(student_pdf(1.0, 0.0, 1.0).is_err());
        assert!(marginal_prior_quadrature(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn elbo_combination() {
        let spec = ObjectiveSpec::new(ObjectiveKind::Ard, 0.05, 20).unwrap();
        assert_eq!(elbo_value(-10.0, -4.0, &spec, 0.0).unwrap(), -10.0);
        assert!((elbo_value(-10.0, -4.0, &spec, 1.0).unwrap() + 10.2).abs() < 1e-12);
        let full = ObjectiveSpec::new(ObjectiveKind::Ard, 1.0, 0).unwrap();
        assert_eq!(elbo_value(-10.0, -4.0, &full, 1.0).unwrap(), -14.0);
        assert!(elbo_value(0.0, 0.0, &spec, 1.5).is_err());
    }

    #[test]
    fn softplus_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - LN_2).abs() < 1e-16);
    }

    #[test]
    fn log_alpha_clamps() {
        assert_eq!(log_alpha_term(0.0, 0.0), (LOG_ALPHA_MAX, 0.0, 0.0));
        assert_eq!(log_alpha_term(1.0, -30.0), (LOG_ALPHA_MIN, 0.0, 0.0));
        let (la, dm, dr) = log_alpha_term(0.5, -1.0);
        assert!((la - (-2.0 - 2.0 * 0.5f64.ln())).abs() < 1e-15);
        assert_eq!((dm, dr), (-4.0, 2.0));
    }

    #[test]
    fn fused_dropout_terms_match_composition() {
        let k = SvdoConstants::STANDARD;
        for &mu in &[1e-14, -3e-5, 0.01, -0.7, 2.5] {
            for &rho in &[-25.0, -6.0, -1.0, 0.0, 3.0, 12.0] {
                let (la, dla_m, dla_r) = log_alpha_term(mu, rho);
                let (v, d) = ard_dropout_term(la);
                let (pv, pm, pr) = ard_dropout_pair(mu, rho);
                assert!((pv - v).abs() <= 1e-12 * v.abs().max(1e-300), "{mu} {rho}");
                assert!((pm - d * dla_m).abs() <= 1e-10 * pm.abs().max(1e-12));
                assert!((pr - d * dla_r).abs() <= 1e-12);
                let (v, d) = svdo_term(la, &k);
                let (pv, pm, pr) = svdo_pair(mu, rho, &k);
                assert!((pv - v).abs() <= 1e-12, "{mu} {rho}");
                assert!((pm - d * dla_m).abs() <= 1e-10 * pm.abs().max(1e-12));
                assert!((pr - d * dla_r).abs() <= 1e-12);
            }
        }
    }
}
