//! `key = value` run configuration with flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ardsparse::bayes_nn::{parse_architecture, BiasMode, LayerSpec};
use ardsparse::objectives::{ObjectiveKind, ObjectiveSpec};
use ardsparse::trainer::{TrainConfig, GAMMA_LOG_SIGMA_CLIP};
use ardsparse::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clip {
    /// `−4` under the Gamma hyperprior, off otherwise.
    Auto,
    Off,
    At(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub bias: BiasMode,
    pub objective: String,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub reg_scale: f64,
    pub anneal_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// `None` decays from the midpoint.
    pub lr_decay_start_epoch: Option<usize>,
    pub log_sigma_clip: Clip,
    pub seed: u64,
    pub eval_every: usize,
    pub trim_threshold: f64,
    pub include_biases: bool,
    pub data_dir: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "mlp:784-300-100-10".into(),
            bias: BiasMode::Point,
            objective: "ard-dropout".into(),
            a: 0.505,
            b: 1e-8,
            alpha: 1.0,
            reg_scale: 1.0,
            anneal_epochs: 5,
            epochs: 30,
            batch_size: 100,
            lr0: 1e-3,
            lr_decay_start_epoch: None,
            log_sigma_clip: Clip::Auto,
            seed: 1,
            eval_every: 1,
            trim_threshold: 1e-2,
            include_biases: false,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

pub const KEYS: [&str; 21] = [
    "arch",
    "bias",
    "objective",
    "a",
    "b",
    "alpha",
    "reg_scale",
    "anneal_epochs",
    "epochs",
    "batch_size",
    "lr0",
    "lr_decay_start_epoch",
    "log_sigma_clip",
    "seed",
    "eval_every",
    "trim_threshold",
    "include_biases",
    "data_dir",
    "train_limit",
    "test_limit",
    "out_dir",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn opt_num(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn bias_name(b: BiasMode) -> &'static str {
    match b {
        BiasMode::None => "none",
        BiasMode::Point => "point",
        BiasMode::Bayesian => "bayesian",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "arch" => self.arch = v.to_string(),
            "bias" => {
                self.bias = match v {
                    "none" => BiasMode::None,
                    "point" => BiasMode::Point,
                    "bayesian" => BiasMode::Bayesian,
                    _ => return Err(Error::Config(format!("bias: expected none|point|bayesian, got `{v}`"))),
                }
            }
            "objective" => self.objective = v.to_string(),
            "a" => self.a = num("a", v)?,
            "b" => self.b = num("b", v)?,
            "alpha" => self.alpha = num("alpha", v)?,
            "reg_scale" => self.reg_scale = num("reg_scale", v)?,
            "anneal_epochs" => self.anneal_epochs = num("anneal_epochs", v)?,
            "epochs" => self.epochs = num("epochs", v)?,
            "batch_size" => self.batch_size = num("batch_size", v)?,
            "lr0" => self.lr0 = num("lr0", v)?,
            "lr_decay_start_epoch" => self.lr_decay_start_epoch = opt_num("lr_decay_start_epoch", v)?,
            "log_sigma_clip" => {
                self.log_sigma_clip = match v {
                    "auto" => Clip::Auto,
                    "none" => Clip::Off,
                    _ => Clip::At(num("log_sigma_clip", v)?),
                }
            }
            "seed" => self.seed = num("seed", v)?,
            "eval_every" => self.eval_every = num("eval_every", v)?,
            "trim_threshold" => self.trim_threshold = num("trim_threshold", v)?,
            "include_biases" => self.include_biases = num("include_biases", v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_limit" => self.train_limit = opt_num("train_limit", v)?,
            "test_limit" => self.test_limit = opt_num("test_limit", v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn get(&self, key: &str) -> String {
        let opt = |v: Option<usize>, none: &str| v.map(|x| x.to_string()).unwrap_or_else(|| none.to_string());
        match key {
            "arch" => self.arch.clone(),
            "bias" => bias_name(self.bias).into(),
            "objective" => self.objective.clone(),
            "a" => self.a.to_string(),
            "b" => self.b.to_string(),
            "alpha" => self.alpha.to_string(),
            "reg_scale" => self.reg_scale.to_string(),
            "anneal_epochs" => self.anneal_epochs.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr0" => self.lr0.to_string(),
            "lr_decay_start_epoch" => opt(self.lr_decay_start_epoch, "auto"),
            "log_sigma_clip" => match self.log_sigma_clip {
                Clip::Auto => "auto".into(),
                Clip::Off => "none".into(),
                Clip::At(v) => v.to_string(),
            },
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "trim_threshold" => self.trim_threshold.to_string(),
            "include_biases" => self.include_biases.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "train_limit" => opt(self.train_limit, "none"),
            "test_limit" => opt(self.test_limit, "none"),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("key list is closed"),
        }
    }

    /// One `key = value` line per key, in a fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    pub fn objective_kind(&self) -> Result<ObjectiveKind> {
        Ok(match self.objective.as_str() {
            "ard" => ObjectiveKind::Ard,
            "fixed-alpha" => ObjectiveKind::FixedAlphaDropout { alpha: self.alpha },
            "ard-dropout" => ObjectiveKind::ArdDropout,
            "svdo" => ObjectiveKind::SparseVd,
            "gamma" => ObjectiveKind::GammaMap2 { a: self.a, b: self.b },
            other => {
                return Err(Error::Config(format!(
                    "unknown objective `{other}` (ard, fixed-alpha, ard-dropout, svdo, gamma)"
                )))
            }
        })
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        Ok(parse_architecture(&self.arch)?
            .into_iter()
            .map(|kind| LayerSpec { kind, bias: self.bias })
            .collect())
    }

    /// Validated trainer configuration; rejects bad objective parameters
    /// before any data is touched.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let spec = ObjectiveSpec::new(self.objective_kind()?, self.reg_scale, self.anneal_epochs)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = TrainConfig::new(spec, self.epochs);
        cfg.batch_size = self.batch_size;
        cfg.lr0 = self.lr0;
        if let Some(s) = self.lr_decay_start_epoch {
            cfg.lr_decay_start_epoch = s;
        }
        cfg.log_sigma_clip = match self.log_sigma_clip {
            Clip::Auto => matches!(spec.kind, ObjectiveKind::GammaMap2 { .. }).then_some(GAMMA_LOG_SIGMA_CLIP),
            Clip::Off => None,
            Clip::At(v) => Some(v),
        };
        cfg.seed = self.seed;
        cfg.eval_every = self.eval_every;
        cfg.trim_threshold = self.trim_threshold;
        cfg.include_biases = self.include_biases;
        cfg.checkpoint = Some(self.out_dir.join("model.ckpt"));
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut c = RunConfig::default();
        c.set("objective", "gamma").unwrap();
        c.set("b", "1e-8").unwrap();
        c.set("log_sigma_clip", "-3.5").unwrap();
        c.set("train_limit", "1000").unwrap();
        let text = c.canonical();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical(), text);
        assert_eq!(RunConfig::parse(&RunConfig::default().canonical()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let c = RunConfig::parse("# run\n\nepochs = 3   # short\nseed=9\n").unwrap();
        assert_eq!((c.epochs, c.seed), (3, 9));
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
    }

    #[test]
    fn gamma_defaults_and_rejection() {
        let mut c = RunConfig::default();
        c.set("objective", "gamma").unwrap();
        assert_eq!(c.train_config().unwrap().log_sigma_clip, Some(-4.0));
        c.set("log_sigma_clip", "none").unwrap();
        assert_eq!(c.train_config().unwrap().log_sigma_clip, None);
        c.set("a", "0.4").unwrap();
        assert!(matches!(c.train_config(), Err(Error::Config(_))));
        let plain = RunConfig::default().train_config().unwrap();
        assert_eq!(plain.log_sigma_clip, None);
        assert_eq!(plain.lr_decay_start_epoch, 15);
    }

    #[test]
    fn every_objective_name_maps() {
        for name in ["ard", "fixed-alpha", "ard-dropout", "svdo", "gamma"] {
            let mut c = RunConfig::default();
            c.set("objective", name).unwrap();
            assert_eq!(c.objective_kind().unwrap().name(), name);
        }
    }
}
