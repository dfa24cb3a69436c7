use ardsparse::autodiff::{Tape, Var};
use ardsparse::rng::RngState;
use ardsparse::{Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const INSTANCES: usize = 50;

/// Entries with magnitude in [0.1, 2] and random sign (or positive only).
fn magnitudes(g: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = g.gen_range(0.1..2.0);
            if positive || g.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(params: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).unwrap().item().unwrap()
}

fn analytic(params: &[Tensor], build: &Build) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect()
}

fn bumped(params: &[Tensor], which: usize, idx: usize, delta: f64) -> Vec<Tensor> {
    let mut out = params.to_vec();
    let mut data = out[which].data().to_vec();
    data[idx] += delta;
    out[which] = Tensor::new(out[which].shape().to_vec(), data).unwrap();
    out
}

/// Largest per-coordinate relative error between backward and central differences.
fn max_fd_error(params: &[Tensor], build: &Build) -> f64 {
    let grads = analytic(params, build);
    let mut worst = 0.0f64;
    for (which, p) in params.iter().enumerate() {
        for idx in 0..p.len() {
            let up = eval(&bumped(params, which, idx, H), build);
            let down = eval(&bumped(params, which, idx, -H), build);
            let fd = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(grads[which].data()[idx], fd));
        }
    }
    worst
}

/// `Σ op(x) ⊙ w` with a fixed random weighting, so no coordinate is trivial.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone());
    let prod = tape.mul(out, c)?;
    tape.sum(prod)
}

fn check_op(name: &str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>)) {
    let mut g = RngState::new(seed).next_generator();
    for i in 0..INSTANCES {
        let (params, build) = make(&mut g);
        let err = max_fd_error(&params, &*build);
        assert!(err < 1e-4, "{name} instance {i}: relative error {err:e}");
    }
}

fn unary(
    name: &str,
    seed: u64,
    positive: bool,
    op: fn(&mut Tape, Var) -> Result<Var>,
) {
    check_op(name, seed, |g| {
        let rows = g.gen_range(1..5);
        let cols = g.gen_range(1..5);
        let x = magnitudes(g, &[rows, cols], positive);
        let w = magnitudes(g, &[rows, cols], false);
        (vec![x], Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted(t, y, &w)
        }))
    });
}

fn binary(name: &str, seed: u64, op: fn(&mut Tape, Var, Var) -> Result<Var>) {
    check_op(name, seed, |g| {
        let shape = [g.gen_range(1..5), g.gen_range(1..5)];
        let a = magnitudes(g, &shape, false);
        let b = magnitudes(g, &shape, false);
        let w = magnitudes(g, &shape, false);
        (vec![a, b], Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted(t, y, &w)
        }))
    });
}

#[test]
fn elementwise_ops_match_finite_differences() {
    unary("square", 1, false, |t, a| t.square(a));
    unary("sqrt", 2, true, |t, a| t.sqrt(a));
    unary("exp", 3, false, |t, a| t.exp(a));
    unary("ln", 4, true, |t, a| t.ln(a));
    unary("sigmoid", 5, false, |t, a| t.sigmoid(a));
    unary("relu", 6, false, |t, a| t.relu(a));
    unary("scale", 7, false, |t, a| t.scale(a, -1.7));
    binary("add", 8, |t, a, b| t.add(a, b));
    binary("sub", 9, |t, a, b| t.sub(a, b));
    binary("mul", 10, |t, a, b| t.mul(a, b));
}

#[test]
fn reductions_and_reshape_match_finite_differences() {
    check_op("sum_mean_reshape", 11, |g| {
        let (r, c) = (g.gen_range(1..5), g.gen_range(1..5));
        let x = magnitudes(g, &[r, c], false);
        let w = magnitudes(g, &[r * c], false);
        (vec![x], Box::new(move |t, v| {
            let sq = t.square(v[0])?;
            let m = t.mean(sq)?;
            let flat = t.reshape(v[0], &[r * c])?;
            let s = weighted(t, flat, &w)?;
            let sm = t.mul(s, m)?;
            t.add(sm, s)
        }))
    });
}

#[test]
fn matmul_and_bias_match_finite_differences() {
    check_op("matmul_add_bias", 12, |g| {
        let (m, k, n) = (g.gen_range(1..5), g.gen_range(1..5), g.gen_range(1..5));
        let a = magnitudes(g, &[m, k], false);
        let b = magnitudes(g, &[k, n], false);
        let bias = magnitudes(g, &[n], false);
        let w = magnitudes(g, &[m, n], false);
        (vec![a, b, bias], Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_bias(y, v[2])?;
            weighted(t, y, &w)
        }))
    });
}

#[test]
fn conv2d_and_channel_bias_match_finite_differences() {
    check_op("conv2d", 13, |g| {
        let k = g.gen_range(1..4);
        let stride = g.gen_range(1..3);
        let pad = g.gen_range(0..2);
        let steps = g.gen_range(0..3);
        let hw = k + stride * steps;
        let (b, c, f) = (g.gen_range(1..3), g.gen_range(1..3), g.gen_range(1..3));
        let x = magnitudes(g, &[b, c, hw, hw], false);
        let kern = magnitudes(g, &[f, c, k, k], false);
        let bias = magnitudes(g, &[f], false);
        let out = (hw + 2 * pad - k) / stride + 1;
        let w = magnitudes(g, &[b, f, out, out], false);
        (vec![x, kern, bias], Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            let y = t.add_channel_bias(y, v[2])?;
            weighted(t, y, &w)
        }))
    });
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    check_op("softmax_cross_entropy", 14, |g| {
        let (b, k) = (g.gen_range(1..6), g.gen_range(2..6));
        let logits = magnitudes(g, &[b, k], false);
        let labels: Vec<usize> = (0..b).map(|_| g.gen_range(0..k)).collect();
        (vec![logits], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)))
    });
}

#[test]
fn pair_reduce_matches_finite_differences() {
    check_op("pair_reduce", 15, |g| {
        let n = g.gen_range(1..8);
        let a = magnitudes(g, &[n], false);
        let b = magnitudes(g, &[n], false);
        (vec![a, b], Box::new(|t, v| {
            t.pair_reduce(v[0], v[1], |x, y| (x * x * y.exp(), 2.0 * x * y.exp(), x * x * y.exp()))
        }))
    });
}

fn three_layer(tape: &mut Tape, v: &[Var], x: &Tensor, labels: &[usize]) -> Result<Var> {
    let x = tape.constant(x.clone());
    let h = tape.matmul(x, v[0])?;
    let h = tape.add_bias(h, v[1])?;
    let h = tape.sigmoid(h)?;
    let h = tape.matmul(h, v[2])?;
    let h = tape.exp(h)?;
    let h = tape.sqrt(h)?;
    let logits = tape.matmul(h, v[3])?;
    tape.softmax_cross_entropy(logits, labels)
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    check_op("three_layer", 16, |g| {
        let (b, d, h1, h2, k) = (
            g.gen_range(1..5),
            g.gen_range(1..5),
            g.gen_range(1..5),
            g.gen_range(1..5),
            g.gen_range(2..5),
        );
        let x = magnitudes(g, &[b, d], false);
        let labels: Vec<usize> = (0..b).map(|_| g.gen_range(0..k)).collect();
        let params = vec![
            magnitudes(g, &[d, h1], false),
            magnitudes(g, &[h1], false),
            magnitudes(g, &[h1, h2], false),
            magnitudes(g, &[h2, k], false),
        ];
        (params, Box::new(move |t, v| three_layer(t, v, &x, &labels)))
    });
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut g = RngState::new(17).next_generator();
    for _ in 0..INSTANCES {
        let x = magnitudes(&mut g, &[3, 4], false);
        let w = magnitudes(&mut g, &[4, 2], false);
        let labels = [0, 1, 1];
        let l1 = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let c = t.constant(x.clone());
            let y = t.matmul(c, v[0])?;
            t.softmax_cross_entropy(y, &labels)
        };
        let l2 = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let s = t.square(v[0])?;
            let e = t.sigmoid(s)?;
            t.sum(e)
        };
        let both = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let a = l1(t, v)?;
            let b = l2(t, v)?;
            t.add(a, b)
        };
        let params = [w];
        let (g1, g2, g12) = (analytic(&params, &l1), analytic(&params, &l2), analytic(&params, &both));
        for i in 0..g12[0].len() {
            let sum = g1[0].data()[i] + g2[0].data()[i];
            assert!((g12[0].data()[i] - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }
}

#[test]
fn backward_is_repeatable_and_accumulates_fan_out() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = tape.square(p).unwrap();
    let half = tape.scale(sq, 0.5).unwrap();
    let s = tape.sum(half).unwrap();
    let lin = tape.sum(p).unwrap();
    let loss = tape.add(s, lin).unwrap();
    let first = tape.backward(loss).unwrap();
    let second = tape.backward(loss).unwrap();
    assert_eq!(first.get(p), second.get(p));
    // d/dp (Σp²/2 + Σp) = p + 1
    assert_eq!(first.get(p).unwrap().data(), &[2.0, -1.0, 1.5]);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(tape.backward(p).is_err(), "non-scalar loss");
    let mut other = Tape::new();
    let q = other.param(Tensor::scalar(1.0));
    assert!(tape.backward(q).is_err(), "foreign node");
    assert!(tape.value(q).is_err());
}
