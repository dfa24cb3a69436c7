use ardsparse::bayes_nn::{load_checkpoint, BayesLayer, BayesNet, BiasMode, EvalMode, GaussianPosterior, LayerKind, LayerSpec, Noise};
use ardsparse::data_io::{synthetic_relevance, Dataset};
use ardsparse::objectives::{ObjectiveKind, ObjectiveSpec};
use ardsparse::par;
use ardsparse::rng::sample_standard_normal;
use ardsparse::sparsify::error_rate;
use ardsparse::trainer::{adam_step, metrics_csv, objective_terms, train, AdamState, TrainConfig};
use ardsparse::{Error, RngState, Tensor};

fn dense(fan_in: usize, fan_out: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Dense { fan_in, fan_out },
        bias: BiasMode::Point,
    }
}

fn config(kind: ObjectiveKind, reg_scale: f64, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(ObjectiveSpec::new(kind, reg_scale, 2).unwrap(), epochs);
    cfg.batch_size = 32;
    cfg.lr0 = 1e-2;
    cfg.seed = 7;
    cfg
}

#[test]
fn minibatch_estimator_averages_to_full_batch_objective() {
    let data = synthetic_relevance(97, 3, 2, 11).unwrap();
    let net = BayesNet::init(&[dense(5, 8), dense(8, 2)], 3).unwrap();
    let n = data.len();
    let mut rng = RngState::new(5);
    let noise = vec![sample_standard_normal(&mut rng, &[n, 8]), sample_standard_normal(&mut rng, &[n, 2])];
    for kind in [
        ObjectiveKind::ArdDropout,
        ObjectiveKind::Ard,
        ObjectiveKind::SparseVd,
        ObjectiveKind::GammaMap2 { a: 0.6, b: 1e-3 },
        ObjectiveKind::FixedAlphaDropout { alpha: 0.4 },
    ] {
        let spec = ObjectiveSpec::new(kind, 1.0, 0).unwrap();
        let full = objective_terms(&net, &data, n, &spec, 1.0, EvalMode::Stochastic, Some(Noise::Given(&noise))).unwrap();
        let batches = ardsparse::data_io::minibatches(n, 10, &mut RngState::new(2)).unwrap();
        let mut avg = 0.0;
        for idx in &batches {
            let batch = data.subset(idx).unwrap();
            let eps: Vec<Tensor> = noise.iter().map(|e| e.select_rows(idx).unwrap()).collect();
            let t = objective_terms(&net, &batch, n, &spec, 1.0, EvalMode::Stochastic, Some(Noise::Given(&eps))).unwrap();
            avg += idx.len() as f64 / n as f64 * t.loss;
        }
        let err = (avg - full.loss).abs() / full.loss.abs().max(1.0);
        assert!(err < 1e-8, "{}: batch average {avg} vs full {}", kind.name(), full.loss);
    }
}

/// Plain-scalar Adam, written independently of the tensor version.
fn scalar_adam(p: &mut [f64], grads: &[Vec<f64>], lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_scalar_reference_over_100_steps() {
    let start = vec![0.5, -1.5, 2.0, 0.0, 3.0];
    let mut g = RngState::new(3);
    let grads: Vec<Vec<f64>> = (0..100).map(|_| sample_standard_normal(&mut g, &[5]).data().to_vec()).collect();
    let mut reference = start.clone();
    scalar_adam(&mut reference, &grads, 1e-2);

    let mut p = Tensor::new(vec![5], start).unwrap();
    let mut state = AdamState::new(&[("p".into(), vec![5])]);
    for gr in &grads {
        adam_step(&mut [&mut p], &[Tensor::new(vec![5], gr.clone()).unwrap()], &mut state, 1e-2, 0).unwrap();
    }
    for (a, b) in p.data().iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
    assert_eq!(state.step, 100);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    let mut state = AdamState::new(&[("p".into(), vec![2])]);
    let g = Tensor::new(vec![2], vec![0.3, -7.0]).unwrap();
    adam_step(&mut [&mut p], &[g], &mut state, 1e-3, 0).unwrap();
    assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    assert!((p.data()[1] - (1.0 + 1e-3)).abs() < 1e-10);
}

fn near_deterministic(net: BayesNet) -> BayesNet {
    let layers = net
        .layers
        .into_iter()
        .map(|l| {
            let w = GaussianPosterior::with_constant_log_sigma(l.weight.mu().clone(), -40.0);
            BayesLayer::new(l.spec, w, l.bias).unwrap()
        })
        .collect();
    BayesNet::new(layers).unwrap()
}

#[test]
fn data_term_only_training_decreases_loss() {
    let data = synthetic_relevance(400, 4, 4, 1).unwrap();
    let net = near_deterministic(BayesNet::init(&[dense(8, 16), dense(16, 2)], 2).unwrap());
    let mut cfg = config(ObjectiveKind::ArdDropout, 0.0, 5);
    cfg.lr0 = 1e-3;
    cfg.lr_decay_start_epoch = 5;
    let out = train(net, &data, None, &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|m| m.train_loss).collect();
    assert!(out.history.iter().all(|m| m.reg_term.is_finite()));
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss increased: {losses:?}");
    }
}

#[test]
fn separable_problem_is_learned() {
    let data = synthetic_relevance(1000, 2, 0, 4).unwrap();
    let net = BayesNet::init(&[dense(2, 16), dense(16, 2)], 5).unwrap();
    let cfg = config(ObjectiveKind::ArdDropout, 1.0, 30);
    let out = train(net, &data, None, &cfg).unwrap();
    let err = error_rate(&out.net, &data).unwrap();
    assert!(err <= 1.0, "train error {err}%");
}

fn small_conv_setup() -> (BayesNet, Dataset) {
    let specs = [
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels: 1,
                filters: 3,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
            },
            bias: BiasMode::Bayesian,
        },
        dense(3 * 5 * 5, 2),
    ];
    let flat = synthetic_relevance(60, 25, 0, 9).unwrap();
    let inputs = flat.inputs.reshape(&[60, 1, 5, 5]).unwrap();
    let data = Dataset::new(inputs, flat.labels, 2).unwrap();
    (BayesNet::init(&specs, 1).unwrap(), data)
}

#[test]
fn same_seed_gives_identical_history_and_means() {
    let (net, data) = small_conv_setup();
    let cfg = config(ObjectiveKind::SparseVd, 1.0, 3);
    let a = train(net.clone(), &data, None, &cfg).unwrap();
    let b = train(net.clone(), &data, None, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.net, b.net);
    assert_eq!(metrics_csv(&a.history, Some(&a.report)), metrics_csv(&b.history, Some(&b.report)));

    let c = par::sequential(|| train(net, &data, None, &cfg).unwrap());
    assert_eq!(a.net, c.net);
    assert_eq!(a.history, c.history);
}

#[test]
fn every_objective_trains_and_checkpoints() {
    let (net, data) = small_conv_setup();
    let dir = tempfile::tempdir().unwrap();
    for kind in [
        ObjectiveKind::Ard,
        ObjectiveKind::ArdDropout,
        ObjectiveKind::SparseVd,
        ObjectiveKind::GammaMap2 { a: 0.505, b: 1e-8 },
        ObjectiveKind::FixedAlphaDropout { alpha: 0.25 },
    ] {
        let mut cfg = config(kind, 1.0, 2);
        let path = dir.path().join(format!("{}.ckpt", kind.name()));
        cfg.checkpoint = Some(path.clone());
        let out = train(net.clone(), &data, None, &cfg).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(load_checkpoint(&path).unwrap(), out.net);
        if let Some(cap) = cfg.log_sigma_clip {
            assert!(out.net.layers.iter().all(|l| l.weight.log_sigma().data().iter().all(|&s| s <= cap)));
        }
        if let ObjectiveKind::FixedAlphaDropout { alpha } = kind {
            let l = &out.net.layers[1].weight;
            for (m, s) in l.mu().data().iter().zip(l.log_sigma().data()) {
                let ratio = (2.0 * s).exp() / (m * m);
                assert!((ratio / alpha - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn divergence_aborts_with_numeric_error_and_checkpoint() {
    let (net, data) = small_conv_setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    let mut cfg = config(ObjectiveKind::Ard, 1.0, 50);
    cfg.lr0 = 1e6;
    cfg.lr_decay_start_epoch = 50;
    cfg.checkpoint = Some(path.clone());
    match train(net, &data, None, &cfg) {
        Err(Error::Numeric { .. }) => assert!(load_checkpoint(&path).is_ok()),
        Err(other) => panic!("expected numeric abort, got {other}"),
        Ok(_) => panic!("lr 1e6 should diverge"),
    }
}

#[test]
fn bad_config_is_rejected_before_training() {
    let (net, data) = small_conv_setup();
    let mut cfg = config(ObjectiveKind::ArdDropout, 1.0, 2);
    cfg.batch_size = 0;
    assert!(matches!(train(net, &data, None, &cfg), Err(Error::Config(_))));
    assert!(ObjectiveSpec::new(ObjectiveKind::GammaMap2 { a: 0.4, b: 1e-8 }, 1.0, 0).is_err());
}
