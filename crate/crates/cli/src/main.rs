mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ardsparse::verify::Suite;
use commands::{Failure, EXIT_CONFIG};
use config::RunConfig;

/// Sparse Bayesian networks by variational ARD.
#[derive(Parser)]
#[command(name = "ardsparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoint, metrics CSV and report.
    Train(RunArgs),
    /// Deterministic-mode test error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Trim a checkpoint and print its sparsity report.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the trimmed checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the built-in analytic, gradient and moment checks.
    Verify {
        /// analytic, gradient, moment or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per Gamma shape parameter.
    Sweep {
        /// Comma-separated values of a.
        #[arg(long, value_delimiter = ',', default_value = "0.505,0.510,0.515,0.520")]
        a_values: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ard, fixed-alpha, ard-dropout, svdo or gamma.
    #[arg(long)]
    objective: Option<String>,
    /// Gamma shape.
    #[arg(long)]
    a: Option<String>,
    /// Gamma rate.
    #[arg(long)]
    b: Option<String>,
    /// Frozen dropout rate for fixed-alpha.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    anneal_epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    /// Any other key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let bad = |e: ardsparse::Error| Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        };
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(bad)?,
            None => RunConfig::default(),
        };
        let named = [
            ("objective", &self.objective),
            ("a", &self.a),
            ("b", &self.b),
            ("alpha", &self.alpha),
            ("arch", &self.arch),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr0", &self.lr),
            ("anneal_epochs", &self.anneal_epochs),
            ("seed", &self.seed),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("trim_threshold", &self.threshold),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v).map_err(bad)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Failure {
                code: EXIT_CONFIG,
                message: format!("--set expects KEY=VALUE, got `{kv}`"),
            })?;
            cfg.set(k, v).map_err(bad)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> commands::Outcome {
    let with_cfg = |run: &RunArgs, f: &dyn Fn(&RunConfig) -> commands::Outcome| {
        let cfg = run.resolve()?;
        if run.print_config {
            print!("{}", cfg.canonical());
            return Ok(commands::EXIT_OK);
        }
        f(&cfg)
    };
    match cli.command {
        Command::Train(run) => with_cfg(&run, &commands::cmd_train),
        Command::Eval { checkpoint, run } => with_cfg(&run, &|c| commands::cmd_eval(c, &checkpoint)),
        Command::Prune { checkpoint, out, run } => {
            with_cfg(&run, &|c| commands::cmd_prune(c, &checkpoint, out.as_deref()))
        }
        Command::Sweep { a_values, run } => with_cfg(&run, &|c| commands::cmd_sweep(c, &a_values)),
        Command::Verify { suite, seed } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![Suite::parse(&suite).ok_or_else(|| Failure {
                    code: EXIT_CONFIG,
                    message: format!("unknown suite `{suite}`"),
                })?]
            };
            commands::cmd_verify(&suites, seed)
        }
    }
}

/// Keeps large tensor buffers on the heap instead of mapping and unmapping
/// them on every training step.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds; called before any
    // other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
