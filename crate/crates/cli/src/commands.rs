use std::fs;
use std::path::Path;
use std::time::Instant;

use ardsparse::bayes_nn::{load_checkpoint, save_checkpoint, BayesNet};
use ardsparse::data_io::{load_idx, Dataset};
use ardsparse::sparsify::{self, evaluate_pruned};
use ardsparse::trainer::{self, metrics_csv, sweep_csv, EpochMetrics, SweepRow};
use ardsparse::verify::{self, Suite};
use ardsparse::Error;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn config(e: Error) -> Self {
        Self::new(EXIT_CONFIG, e.to_string())
    }

    fn data(e: Error) -> Self {
        Self::new(EXIT_DATA, e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric { .. } | Error::NonFinite { .. } | Error::Quadrature(_) => EXIT_NUMERIC,
            Error::Format { .. } | Error::Io(_) => EXIT_DATA,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e.to_string())
    }
}

pub type Outcome = Result<i32, Failure>;

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

fn limit(ds: Dataset, n: Option<usize>) -> Result<Dataset, Failure> {
    match n {
        Some(n) if n < ds.len() => ds.head(n).map_err(Failure::config),
        _ => Ok(ds),
    }
}

fn load_split(dir: &Path, prefix: &str) -> Result<Dataset, Failure> {
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
    .map_err(|e| match e {
        Error::Io(io) => Failure::new(EXIT_DATA, format!("cannot read {prefix} data in {}: {io}", dir.display())),
        other => Failure::data(other),
    })
}

pub fn load_data(cfg: &RunConfig) -> Result<Data, Failure> {
    let train = limit(load_split(&cfg.data_dir, "train")?, cfg.train_limit)?;
    let test = limit(load_split(&cfg.data_dir, "t10k")?, cfg.test_limit)?;
    Ok(Data { train, test })
}

pub fn load_test(cfg: &RunConfig) -> Result<Dataset, Failure> {
    limit(load_split(&cfg.data_dir, "t10k")?, cfg.test_limit)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))
}

fn progress(m: &EpochMetrics) {
    let extra = match (m.test_error, m.compression) {
        (Some(e), Some(c)) => format!("  error {e:.2}%  compression {c:.1}x"),
        (Some(e), None) => format!("  error {e:.2}%  compression -"),
        _ => String::new(),
    };
    eprintln!(
        "epoch {:>3}  loss {:.4e}  data {:.4e}  reg {:.4e}  lr {:.2e}  anneal {:.2}{extra}",
        m.epoch, m.train_loss, m.data_term, m.reg_term, m.lr, m.anneal_factor
    );
}

pub fn cmd_train(cfg: &RunConfig) -> Outcome {
    let tc = cfg.train_config().map_err(Failure::config)?;
    let specs = cfg.layer_specs().map_err(Failure::config)?;
    let data = load_data(cfg)?;
    let net = BayesNet::init(&specs, cfg.seed).map_err(Failure::config)?;
    write(&cfg.out_dir.join("config.txt"), &cfg.canonical())?;
    eprintln!("training {} with {} on {} samples", net.describe(), tc.objective.kind.name(), data.train.len());
    let start = Instant::now();
    let out = trainer::train_with_progress(net, &data.train, Some(&data.test), &tc, progress)?;
    write(&cfg.out_dir.join("metrics.csv"), &metrics_csv(&out.history, Some(&out.report)))?;
    write(&cfg.out_dir.join("report.json"), &out.report.to_json())?;
    println!(
        "test error {:.2}%  compression {}  ({:.0} s)",
        out.report.test_error.unwrap_or(f64::NAN),
        out.report.compression.map(|c| format!("{c:.1}x")).unwrap_or_else(|| "degenerate".into()),
        start.elapsed().as_secs_f64()
    );
    println!("outputs in {}", cfg.out_dir.display());
    Ok(EXIT_OK)
}

fn load_net(path: &Path) -> Result<BayesNet, Failure> {
    load_checkpoint(path).map_err(Failure::data)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Outcome {
    let net = load_net(checkpoint)?;
    let test = load_test(cfg)?;
    let err = sparsify::error_rate(&net, &test)?;
    println!("deterministic-mode test error {err:.2}% on {} samples", test.len());
    Ok(EXIT_OK)
}

pub fn cmd_prune(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Outcome {
    let net = load_net(checkpoint)?;
    let test = load_test(cfg)?;
    let (pruned, report) = evaluate_pruned(&net, &test, cfg.trim_threshold, cfg.include_biases)?;
    println!("{}", report.to_json());
    if let Some(path) = out {
        save_checkpoint(path, &pruned).map_err(Failure::data)?;
    }
    if report.is_degenerate() {
        eprintln!("warning: every counted weight was trimmed");
    }
    Ok(EXIT_OK)
}

pub fn cmd_verify(suites: &[Suite], seed: u64) -> Outcome {
    let start = Instant::now();
    let mut failed = Vec::new();
    for &suite in suites {
        println!("[{}]", suite.name());
        let results = verify::run_suite(suite, seed)?;
        print!("{}", verify::format_table(&results));
        failed.extend(results.into_iter().filter(|r| !r.passed));
    }
    println!("{:.1} s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        println!("all checks passed");
        Ok(EXIT_OK)
    } else {
        for r in &failed {
            eprintln!("failed: {} (observed {:e}, threshold {:e})", r.name, r.observed, r.threshold);
        }
        Ok(EXIT_VERIFY)
    }
}

pub fn cmd_sweep(cfg: &RunConfig, a_values: &[f64]) -> Outcome {
    if cfg.objective != "gamma" {
        return Err(Failure::new(EXIT_CONFIG, "sweep needs objective = gamma"));
    }
    let mut base = cfg.train_config().map_err(Failure::config)?;
    for &a in a_values {
        let mut c = cfg.clone();
        c.a = a;
        c.train_config().map_err(Failure::config)?;
    }
    base.checkpoint = None;
    let specs = cfg.layer_specs().map_err(Failure::config)?;
    let data = load_data(cfg)?;
    let net = BayesNet::init(&specs, cfg.seed).map_err(Failure::config)?;
    let print_row = |r: &SweepRow| {
        println!(
            "a = {:<6}  error {:.2}%  compression {}",
            r.a,
            r.test_error,
            r.compression.map(|c| format!("{c:.1}x")).unwrap_or_else(|| "degenerate".into())
        )
    };
    let rows = trainer::sweep_gamma(&net, &data.train, Some(&data.test), &base, cfg.b, a_values, print_row)?;
    write(&cfg.out_dir.join("sweep.csv"), &sweep_csv(&rows))?;
    println!("outputs in {}", cfg.out_dir.display());
    Ok(EXIT_OK)
}
