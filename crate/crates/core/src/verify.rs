//! Self-checks that need no data: analytic identities of the regularizers,
//! finite-difference gradient checks, and local-reparameterization moments.

use std::fmt;

use rand::Rng;

use crate::autodiff::Tape;
use crate::bayes_nn::{
    BayesLayer, BayesNet, BiasMode, EvalMode, GaussianPosterior, LayerKind, LayerSpec, Noise, WeightVariance,
};
use crate::objectives::{
    ard_dropout_term, ard_term, gamma_constant, gamma_term, kl_term, marginal_prior_quadrature,
    regularizer_on_tape, regularizer_value, student_pdf, svdo_term, ObjectiveKind, SvdoConstants,
};
use crate::quadrature;
use crate::rng::{sample_standard_normal, RngState};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured quantity (an error, a gap, a ratio, ...).
    pub observed: f64,
    /// What `observed` was compared against.
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &str, observed: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: observed < threshold,
            observed,
            threshold,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<34} observed {:>12.4e}  threshold {:>10.3e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Analytic,
    Gradient,
    Moment,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Analytic, Suite::Gradient, Suite::Moment];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Analytic => "analytic",
            Suite::Gradient => "gradient",
            Suite::Moment => "moment",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Analytic => analytic_checks(&SvdoConstants::STANDARD, seed),
        Suite::Gradient => gradient_checks(seed),
        Suite::Moment => moment_checks(seed),
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(move |i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
}

/// Random `(μ, σ)` pairs with `|μ|, σ ∈ [0.1, 2]`.
fn random_pairs(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let mut g = RngState::new(seed).next_generator();
    (0..n)
        .map(|_| {
            let m: f64 = g.gen_range(0.1..2.0) * if g.gen_bool(0.5) { 1.0 } else { -1.0 };
            (m, g.gen_range(0.1..2.0))
        })
        .collect()
}

pub const QUADRATURE_W: [f64; 5] = [0.0, 0.5, -0.5, 2.0, -2.0];
pub const QUADRATURE_A: [f64; 3] = [0.6, 1.0, 2.0];
pub const QUADRATURE_B: [f64; 3] = [0.5, 1.0, 2.0];

/// Identity checks on the regularizers; `k` lets callers probe the Sparse VD
/// checks with perturbed constants.
pub fn analytic_checks(k: &SvdoConstants, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let pairs = random_pairs(seed, 200);

    // d/dτ KL at τ*, by central differences.
    let mut worst: f64 = 0.0;
    for &(m, s) in &pairs {
        let rho = s.ln();
        let tau = 1.0 / (m * m + s * s);
        let h = 1e-5 * tau;
        let d = (kl_term(m, rho, tau + h) - kl_term(m, rho, tau - h)) / (2.0 * h);
        worst = worst.max(d.abs());
    }
    out.push(CheckResult::below("tau_star_stationary", worst, 1e-8, "max |dKL/dτ| at τ*, 200 pairs"));

    let (a, b) = (0.75, 0.3);
    let mut worst: f64 = 0.0;
    for &(m, s) in &pairs {
        let rho = s.ln();
        let objective = |t: f64| kl_term(m, rho, t) - ((a - 1.0) * t.ln() - b * t);
        let tau = (2.0 * a - 1.0) / (s * s + m * m + 2.0 * b);
        let h = 1e-5 * tau;
        worst = worst.max(((objective(tau + h) - objective(tau - h)) / (2.0 * h)).abs());
    }
    out.push(CheckResult::below(
        "tau_star_gamma_stationary",
        worst,
        1e-8,
        "Gamma(0.75, 0.3) hyperprior",
    ));

    let worst = pairs
        .iter()
        .map(|&(m, s)| {
            let rho = s.ln();
            (ard_term(m, rho).0 + kl_term(m, rho, 1.0 / (m * m + s * s))).abs()
        })
        .fold(0.0, f64::max);
    out.push(CheckResult::below("ard_equals_neg_kl", worst, 1e-10, "max |R + KL(τ*)|"));

    let mut g = RngState::new(seed).split(1).next_generator();
    let mut scan_min = f64::INFINITY;
    for &(m, s) in pairs.iter().take(10) {
        let rho = s.ln();
        let at_opt = kl_term(m, rho, 1.0 / (m * m + s * s));
        for _ in 0..100 {
            let tau = 10f64.powf(g.gen_range(-4.0..4.0));
            scan_min = scan_min.min(kl_term(m, rho, tau) - at_opt);
        }
    }
    out.push(CheckResult {
        name: "tau_star_minimizes_kl".into(),
        passed: scan_min >= -1e-14,
        observed: scan_min,
        threshold: -1e-14,
        detail: "min KL(τ) − KL(τ*) over 10³ random τ".into(),
    });

    let mut max_ard: f64 = f64::NEG_INFINITY;
    let mut zero_ok = true;
    let mut g = RngState::new(seed).split(2).next_generator();
    for _ in 0..10_000 {
        let m: f64 = g.gen_range(-3.0..3.0);
        let rho: f64 = g.gen_range(-6.0..2.0);
        max_ard = max_ard.max(ard_term(m, rho).0);
        zero_ok &= ard_term(0.0, rho).0 == 0.0;
    }
    out.push(CheckResult {
        name: "ard_nonpositive".into(),
        passed: max_ard < 0.0 && zero_ok,
        observed: max_ard,
        threshold: 0.0,
        detail: "max term over 10⁴ pairs with μ ≠ 0; exactly 0 at μ = 0".into(),
    });

    let c = gamma_constant(1.0, 1e-12);
    let worst = pairs
        .iter()
        .map(|&(m, s)| {
            let rho = s.ln();
            (gamma_term(m, rho, 1.0, 1e-12, c).0 - c - ard_term(m, rho).0).abs()
        })
        .fold(0.0, f64::max);
    out.push(CheckResult::below(
        "gamma_a1_reduces_to_ard",
        worst,
        1e-8,
        "a = 1, b = 1e-12, constant removed",
    ));

    let grid: Vec<f64> = log_grid(1e-8, 1e8, 1000).collect();
    let gaps: Vec<f64> = grid
        .iter()
        .map(|al| svdo_term(al.ln(), k).0 - ard_dropout_term(al.ln()).0)
        .collect();
    let max_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.push(CheckResult {
        name: "svdo_lower_bound".into(),
        passed: max_gap <= 0.0,
        observed: max_gap,
        threshold: 0.0,
        detail: "max (svdo − ard_dropout) on 10³-point α grid".into(),
    });
    let monotone = gaps.windows(2).all(|w| w[1] >= w[0]);
    out.push(CheckResult {
        name: "svdo_gap_monotone".into(),
        passed: monotone,
        observed: if monotone { 0.0 } else { 1.0 },
        threshold: 0.0,
        detail: "ard_dropout − svdo non-increasing in α".into(),
    });
    let la = 1e6f64.ln();
    let limit = (svdo_term(la, k).0 - ard_dropout_term(la).0).abs();
    out.push(CheckResult::below("svdo_limit_alpha_1e6", limit, 1e-9, "|gap| at α = 1e6"));

    let mut worst: f64 = 0.0;
    let mut at = (0.0, 0.0, 0.0);
    for &a in &QUADRATURE_A {
        for &b in &QUADRATURE_B {
            for &w in &QUADRATURE_W {
                let e = (marginal_prior_quadrature(w, a, b)? - student_pdf(w, a, b)?).abs();
                if e > worst {
                    worst = e;
                    at = (w, a, b);
                }
            }
        }
    }
    out.push(CheckResult::below(
        "quadrature_matches_student_t",
        worst,
        1e-6,
        format!("45-point grid, worst at (w, a, b) = {at:?}"),
    ));

    let e = (marginal_prior_quadrature(0.0, 1.0, 1.0)? - student_pdf(0.0, 1.0, 1.0)?).abs();
    out.push(CheckResult::below("quadrature_at_origin", e, 1e-6, "w = 0, a = b = 1"));

    let mut worst: f64 = 0.0;
    let mut window_min = f64::INFINITY;
    for &a in &QUADRATURE_A {
        for &b in &QUADRATURE_B {
            let (window, total) = student_mass(a, b)?;
            window_min = window_min.min(window);
            worst = worst.max((total - 1.0).abs());
        }
    }
    out.push(CheckResult::below(
        "student_t_normalized",
        worst,
        1e-6,
        format!("max |mass − 1|; smallest mass inside [−50, 50] is {window_min:.6}"),
    ));

    let xi = 1e-4;
    let r = (marginal_prior_quadrature(0.1, xi, xi)? * 0.1) / marginal_prior_quadrature(1.0, xi, xi)?;
    out.push(CheckResult {
        name: "log_uniform_limit".into(),
        passed: (0.99..=1.01).contains(&r),
        observed: r,
        threshold: 0.01,
        detail: "p(0.1)·0.1 / p(1)·1 at a = b = 1e-4, must lie in [0.99, 1.01]".into(),
    });
    Ok(out)
}

/// Student-t mass inside `[−50, 50]`, and the total including both tails.
///
/// The tails are integrated with `u = 1/w` on `(0, 1/50]`.
pub fn student_mass(a: f64, b: f64) -> Result<(f64, f64)> {
    let pdf = |w: f64| student_pdf(w, a, b).unwrap_or(f64::NAN);
    let mut window = 0.0;
    for (lo, hi) in [(-50.0, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 50.0)] {
        window += quadrature::integrate(pdf, lo, hi, 1e-12, 1e-12)?.value;
    }
    let tail = quadrature::integrate(
        |u: f64| if u == 0.0 { 0.0 } else { pdf(1.0 / u) / (u * u) },
        0.0,
        1.0 / 50.0,
        1e-12,
        1e-12,
    )?
    .value;
    Ok((window, window + 2.0 * tail))
}

/// `|a − b| / max(|a|, |b|)`, or the absolute difference when both are tiny.
fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

const FD_STEP: f64 = 1e-3;

fn fd_max_rel_err(x: &Tensor, analytic: &Tensor, f: &mut dyn FnMut(&Tensor) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut at = |k: f64| -> Result<f64> {
            let mut t = x.clone();
            t.data_mut()[i] += k * FD_STEP;
            f(&t)
        };
        // fourth-order central stencil
        let fd = (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], fd));
    }
    Ok(worst)
}

fn regularizer_kinds() -> [ObjectiveKind; 4] {
    [
        ObjectiveKind::Ard,
        ObjectiveKind::ArdDropout,
        ObjectiveKind::SparseVd,
        ObjectiveKind::GammaMap2 { a: 0.51, b: 1e-8 },
    ]
}

pub const GRADIENT_INSTANCES: usize = 50;

/// Finite-difference checks of every regularizer and both layer types.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let root = RngState::new(seed).split(0x6772);

    for (ki, kind) in regularizer_kinds().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for inst in 0..GRADIENT_INSTANCES {
            let mut g = root.split_path(&[ki as u64, inst as u64]).next_generator();
            let n = 6;
            // keep log α well inside the clamp so the terms are smooth
            let mu: Vec<f64> = (0..n)
                .map(|_| g.gen_range(0.05..2.0) * if g.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let rho: Vec<f64> = (0..n).map(|_| g.gen_range(-4.0..1.0)).collect();
            let mu = Tensor::new(vec![2, 3], mu)?;
            let rho = Tensor::new(vec![2, 3], rho)?;

            let mut tape = Tape::new();
            let m = tape.param(mu.clone());
            let r = tape.param(rho.clone());
            let reg = regularizer_on_tape(&mut tape, m, r, &kind)?.expect("regularizer present");
            let grads = tape.backward(reg)?;
            let (gm, gr) = (grads.get(m).expect("μ grad").clone(), grads.get(r).expect("ρ grad").clone());

            let rho_fixed = rho.clone();
            worst = worst.max(fd_max_rel_err(&mu, &gm, &mut |x| {
                regularizer_value(&GaussianPosterior::new(x.clone(), rho_fixed.clone())?, &kind)
            })?);
            worst = worst.max(fd_max_rel_err(&rho, &gr, &mut |x| {
                regularizer_value(&GaussianPosterior::new(mu.clone(), x.clone())?, &kind)
            })?);
        }
        out.push(CheckResult::below(
            &format!("grad_reg_{}", kind.name()),
            worst,
            1e-4,
            format!("{GRADIENT_INSTANCES} instances, max relative error"),
        ));
    }

    for (li, conv) in [false, true].into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for inst in 0..GRADIENT_INSTANCES {
            let mut rng = root.split_path(&[100 + li as u64, inst as u64]);
            let mut g = rng.next_generator();
            let (spec, x) = if conv {
                let c = g.gen_range(1..3);
                let f = g.gen_range(1..4);
                let k = g.gen_range(1..4);
                let stride = g.gen_range(1..3);
                let padding = g.gen_range(0..2);
                let hw = k + stride * g.gen_range(1..3);
                let spec = LayerSpec {
                    kind: LayerKind::Conv2d {
                        in_channels: c,
                        filters: f,
                        kernel_h: k,
                        kernel_w: k,
                        stride,
                        padding,
                    },
                    bias: BiasMode::Bayesian,
                };
                (spec, sample_standard_normal(&mut rng, &[2, c, hw, hw]))
            } else {
                let fan_in = g.gen_range(1..6);
                let fan_out = g.gen_range(1..5);
                let spec = LayerSpec {
                    kind: LayerKind::Dense { fan_in, fan_out },
                    bias: BiasMode::Bayesian,
                };
                (spec, sample_standard_normal(&mut rng, &[3, fan_in]))
            };
            let layer = BayesLayer::init(spec, &mut rng);
            // σ large enough that the noise path carries real gradient
            let ls = layer.weight.log_sigma().map("shift", |r| r + 4.0)?;
            let layer = BayesLayer::new(spec, GaussianPosterior::new(layer.weight.mu().clone(), ls)?, layer.bias)?;
            let net = BayesNet::new(vec![layer])?;
            let out_shape = net.forward(&x, EvalMode::Deterministic, None, WeightVariance::Free)?.shape().to_vec();
            let eps = vec![sample_standard_normal(&mut rng, &out_shape)];
            let probe = sample_standard_normal(&mut rng, &out_shape);

            let loss_of = |net: &BayesNet, x: &Tensor| -> Result<f64> {
                let y = net.forward(x, EvalMode::Stochastic, Some(Noise::Given(&eps)), WeightVariance::Free)?;
                Ok(y.mul(&probe)?.sum())
            };

            let mut tape = Tape::new();
            let fwd = net.forward_tape(&mut tape, &x, EvalMode::Stochastic, Some(Noise::Given(&eps)), WeightVariance::Free)?;
            let p = tape.constant(probe.clone());
            let prod = tape.mul(fwd.logits, p)?;
            let loss = tape.sum(prod)?;
            let grads = tape.backward(loss)?;
            let lv = fwd.vars[0];

            let base = &net.layers[0];
            let gm = grads.get(lv.mu).expect("μ grad").clone();
            worst = worst.max(fd_max_rel_err(base.weight.mu(), &gm, &mut |t| {
                let mut n2 = net.clone();
                n2.layers[0].weight = GaussianPosterior::new(t.clone(), base.weight.log_sigma().clone())?;
                loss_of(&n2, &x)
            })?);
            let gs = grads.get(lv.log_sigma.expect("free")).expect("log σ grad").clone();
            worst = worst.max(fd_max_rel_err(base.weight.log_sigma(), &gs, &mut |t| {
                let mut n2 = net.clone();
                n2.layers[0].weight = GaussianPosterior::new(base.weight.mu().clone(), t.clone())?;
                loss_of(&n2, &x)
            })?);
            let bias = base.bias.as_ref().expect("bias");
            let gbm = grads.get(lv.bias_mu.expect("bias")).expect("bias grad").clone();
            worst = worst.max(fd_max_rel_err(bias.mu(), &gbm, &mut |t| {
                let mut n2 = net.clone();
                n2.layers[0].bias = Some(GaussianPosterior::new(t.clone(), bias.log_sigma().clone())?);
                loss_of(&n2, &x)
            })?);
            let gbs = grads.get(lv.bias_log_sigma.expect("bias")).expect("bias grad").clone();
            worst = worst.max(fd_max_rel_err(bias.log_sigma(), &gbs, &mut |t| {
                let mut n2 = net.clone();
                n2.layers[0].bias = Some(GaussianPosterior::new(bias.mu().clone(), t.clone())?);
                loss_of(&n2, &x)
            })?);
        }
        out.push(CheckResult::below(
            if conv { "grad_layer_conv2d" } else { "grad_layer_dense" },
            worst,
            1e-4,
            format!("{GRADIENT_INSTANCES} instances, μ, log σ and bias"),
        ));
    }
    Ok(out)
}

pub const MOMENT_DRAWS: usize = 100_000;

/// Empirical output moments under local reparameterization against the
/// analytic `x·μ` and `x²·σ²`, each within five standard errors.
pub fn moment_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let root = RngState::new(seed).split(0x6d6f);
    let mut out = Vec::new();
    for conv in [false, true] {
        let mut rng = root.split(conv as u64);
        let (spec, x) = if conv {
            let spec = LayerSpec {
                kind: LayerKind::Conv2d {
                    in_channels: 2,
                    filters: 2,
                    kernel_h: 2,
                    kernel_w: 2,
                    stride: 1,
                    padding: 0,
                },
                bias: BiasMode::None,
            };
            (spec, sample_standard_normal(&mut rng, &[1, 2, 3, 3]))
        } else {
            let spec = LayerSpec {
                kind: LayerKind::Dense { fan_in: 4, fan_out: 3 },
                bias: BiasMode::None,
            };
            (spec, sample_standard_normal(&mut rng, &[1, 4]))
        };
        let layer = BayesLayer::init(spec, &mut rng);
        let ls = layer.weight.log_sigma().map("shift", |r| r + 4.5)?;
        let weight = GaussianPosterior::new(layer.weight.mu().clone(), ls)?;
        let net = BayesNet::new(vec![BayesLayer::new(spec, weight.clone(), None)?])?;

        let mean = net.forward(&x, EvalMode::Deterministic, None, WeightVariance::Free)?;
        let x2 = x.square()?;
        let var_net = BayesNet::new(vec![BayesLayer::new(
            spec,
            GaussianPosterior::new(weight.variance()?, weight.log_sigma().clone())?,
            None,
        )?])?;
        let var = var_net.forward(&x2, EvalMode::Deterministic, None, WeightVariance::Free)?;

        let rows: Vec<usize> = vec![0; MOMENT_DRAWS];
        let xs = x.select_rows(&rows)?;
        let draws = net.forward(&xs, EvalMode::Stochastic, Some(Noise::Sample(&mut rng)), WeightVariance::Free)?;
        let k = mean.len();
        let n = MOMENT_DRAWS as f64;
        let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
        for j in 0..k {
            let vals = draws.data().iter().skip(j).step_by(k);
            let (s, s2) = vals.fold((0.0, 0.0), |(s, s2), &v| (s + v, s2 + v * v));
            let m_hat = s / n;
            let v_hat = (s2 - n * m_hat * m_hat) / (n - 1.0);
            let (m, v) = (mean.data()[j], var.data()[j]);
            worst_mean = worst_mean.max((m_hat - m).abs() / (v / n).sqrt());
            worst_var = worst_var.max((v_hat - v).abs() / (v * (2.0 / (n - 1.0)).sqrt()));
        }
        let layer_name = if conv { "conv2d" } else { "dense" };
        out.push(CheckResult::below(
            &format!("moment_mean_{layer_name}"),
            worst_mean,
            5.0,
            format!("{MOMENT_DRAWS} draws, max standardized error over {k} outputs"),
        ));
        out.push(CheckResult::below(
            &format!("moment_variance_{layer_name}"),
            worst_var,
            5.0,
            format!("{MOMENT_DRAWS} draws, max standardized error over {k} outputs"),
        ));
    }
    Ok(out)
}

/// One formatted line per check.
pub fn format_table(results: &[CheckResult]) -> String {
    results.iter().map(|r| format!("{r}\n")).collect()
}
