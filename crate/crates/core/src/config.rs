//! Training configuration and its flat `key = value` text format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::{AggregatorKind, AggregatorShape};
use crate::error::{Error, Result};
use crate::objective::LrSchedule;

/// Metric that decides whether a dev epoch improved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopMetric {
    Accuracy,
    Loss,
}

impl FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(StopMetric::Accuracy),
            "loss" => Ok(StopMetric::Loss),
            other => Err(Error::config(format!(
                "unknown stop metric `{other}` (expected accuracy|loss)"
            ))),
        }
    }
}

impl std::fmt::Display for StopMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopMetric::Accuracy => "accuracy",
            StopMetric::Loss => "loss",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub embedding_size: usize,
    pub lstm_hidden: usize,
    /// Width of the classifier's hidden layer.
    pub mlp_hidden: usize,
    pub capsule_dim: usize,
    pub capsules: usize,
    pub iterations: usize,
    pub l2: f64,
    /// Apply the L2 penalty to the embedding table as well.
    pub l2_embedding: bool,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_steps: usize,
    pub batch_size: usize,
    pub batch_low: usize,
    /// Initial sliding-bucket size in examples.
    pub bucket_window: usize,
    pub dropout: f64,
    pub aggregator: AggregatorKind,
    /// Document-level aggregator; defaults to `aggregator`.
    pub sentence_aggregator: Option<AggregatorKind>,
    pub hierarchical: bool,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub stop_metric: StopMetric,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub min_freq: usize,
    pub lowercase: bool,
    pub separator: String,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::sst2()
    }
}

impl TrainConfig {
    pub fn sst2() -> Self {
        TrainConfig {
            embedding_size: 300,
            lstm_hidden: 200,
            mlp_hidden: 200,
            capsule_dim: 200,
            capsules: 5,
            iterations: 3,
            l2: 1e-5,
            l2_embedding: false,
            learning_rate: 0.0003,
            lr_decay: 0.95,
            lr_decay_steps: 500,
            batch_size: 64,
            batch_low: 16,
            bucket_window: 256,
            dropout: 0.5,
            aggregator: AggregatorKind::Routing(crate::aggregation::Direction::Standard),
            sentence_aggregator: None,
            hierarchical: false,
            seed: 1,
            max_epochs: 100,
            patience: 7,
            stop_metric: StopMetric::Accuracy,
            clip_norm: None,
            min_freq: 1,
            lowercase: true,
            separator: "<sssss>".into(),
            train_path: None,
            dev_path: None,
            test_path: None,
            embeddings_path: None,
        }
    }

    pub fn sst1() -> Self {
        TrainConfig {
            l2: 1e-6,
            learning_rate: 0.0001,
            dropout: 0.2,
            ..TrainConfig::sst2()
        }
    }

    fn document(l2: f64, lr: f64, decay: f64) -> Self {
        TrainConfig {
            l2,
            learning_rate: lr,
            lr_decay: decay,
            lr_decay_steps: 1000,
            batch_size: 32,
            batch_low: 32,
            dropout: 0.2,
            hierarchical: true,
            ..TrainConfig::sst2()
        }
    }

    pub fn yelp13() -> Self {
        TrainConfig::document(1e-5, 0.0001, 0.9)
    }

    pub fn yelp14() -> Self {
        TrainConfig::document(1e-5, 0.0002, 0.9)
    }

    pub fn imdb() -> Self {
        TrainConfig::document(1e-6, 0.0001, 0.95)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sst2" => Ok(TrainConfig::sst2()),
            "sst1" => Ok(TrainConfig::sst1()),
            "yelp13" => Ok(TrainConfig::yelp13()),
            "yelp14" => Ok(TrainConfig::yelp14()),
            "imdb" => Ok(TrainConfig::imdb()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected sst2|sst1|yelp13|yelp14|imdb)"
            ))),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.learning_rate,
            decay: self.lr_decay,
            decay_steps: self.lr_decay_steps,
        }
    }

    pub fn aggregator_shape(&self) -> AggregatorShape {
        AggregatorShape {
            capsules: self.capsules,
            capsule_dim: self.capsule_dim,
            iterations: self.iterations,
        }
    }

    pub fn document_aggregator(&self) -> AggregatorKind {
        self.sentence_aggregator.unwrap_or(self.aggregator)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_size", self.embedding_size),
            ("lstm_hidden", self.lstm_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("capsule_dim", self.capsule_dim),
            ("capsules", self.capsules),
            ("batch_size", self.batch_size),
            ("batch_low", self.batch_low),
            ("bucket_window", self.bucket_window),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("min_freq", self.min_freq),
        ];
        if self.iterations < 1 {
            return Err(Error::config("iterations must be ≥ 1"));
        }
        for (key, v) in positive {
            if v < 1 {
                return Err(Error::config(format!("{key} must be ≥ 1")));
            }
        }
        if self.batch_low > self.batch_size {
            return Err(Error::config("batch_low must not exceed batch_size"));
        }
        if self.l2.is_nan() || self.l2 < 0.0 {
            return Err(Error::config("regularization rate must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("clip_norm must be > 0"));
            }
        }
        if self.separator.is_empty() || self.separator.contains(char::is_whitespace) {
            return Err(Error::config("separator must be a single non-empty token"));
        }
        self.schedule().validate()
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("{key}: expected {what}, got `{value}`"));
        let uint = || {
            value
                .parse::<usize>()
                .map_err(|_| bad("a non-negative integer"))
        };
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let boolean = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "embedding_size" => self.embedding_size = uint()?,
            "lstm_hidden" => self.lstm_hidden = uint()?,
            "mlp_hidden" => self.mlp_hidden = uint()?,
            "capsule_dim" => self.capsule_dim = uint()?,
            "capsules" => self.capsules = uint()?,
            "iterations" => self.iterations = uint()?,
            "l2" => self.l2 = float()?,
            "l2_embedding" => self.l2_embedding = boolean()?,
            "learning_rate" => self.learning_rate = float()?,
            "lr_decay" => self.lr_decay = float()?,
            "lr_decay_steps" => self.lr_decay_steps = uint()?,
            "batch_size" => self.batch_size = uint()?,
            "batch_low" => self.batch_low = uint()?,
            "bucket_window" => self.bucket_window = uint()?,
            "dropout" => self.dropout = float()?,
            "aggregator" => self.aggregator = value.parse()?,
            "sentence_aggregator" => {
                self.sentence_aggregator = if value.is_empty() {
                    None
                } else {
                    Some(value.parse()?)
                }
            }
            "hierarchical" => self.hierarchical = boolean()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("a non-negative integer"))?,
            "max_epochs" => self.max_epochs = uint()?,
            "patience" => self.patience = uint()?,
            "stop_metric" => self.stop_metric = value.parse()?,
            "clip_norm" => {
                self.clip_norm = if value.is_empty() || value == "off" {
                    None
                } else {
                    Some(float()?)
                }
            }
            "min_freq" => self.min_freq = uint()?,
            "lowercase" => self.lowercase = boolean()?,
            "separator" => self.separator = value.to_string(),
            "train" => self.train_path = path(),
            "dev" => self.dev_path = path(),
            "test" => self.test_path = path(),
            "embeddings" => self.embeddings_path = path(),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. A leading
    /// `preset = name` line resets to that preset first.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let result = if key == "preset" {
                TrainConfig::preset(value).map(|p| *self = p)
            } else {
                self.set(key, value)
            };
            result.map_err(|e| match e {
                Error::Config(message) => {
                    Error::Config(format!("{}:{}: {message}", origin.display(), n + 1))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key in a fixed order; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let entries: Vec<(&str, String)> = vec![
            ("embedding_size", self.embedding_size.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("capsule_dim", self.capsule_dim.to_string()),
            ("capsules", self.capsules.to_string()),
            ("iterations", self.iterations.to_string()),
            ("l2", self.l2.to_string()),
            ("l2_embedding", self.l2_embedding.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_steps", self.lr_decay_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("batch_low", self.batch_low.to_string()),
            ("bucket_window", self.bucket_window.to_string()),
            ("dropout", self.dropout.to_string()),
            ("aggregator", self.aggregator.to_string()),
            (
                "sentence_aggregator",
                self.sentence_aggregator
                    .map(|k| k.to_string())
                    .unwrap_or_default(),
            ),
            ("hierarchical", self.hierarchical.to_string()),
            ("seed", self.seed.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("stop_metric", self.stop_metric.to_string()),
            (
                "clip_norm",
                self.clip_norm.map_or("off".to_string(), |c| c.to_string()),
            ),
            ("min_freq", self.min_freq.to_string()),
            ("lowercase", self.lowercase.to_string()),
            ("separator", self.separator.clone()),
            ("train", opt_path(&self.train_path)),
            ("dev", opt_path(&self.dev_path)),
            ("test", opt_path(&self.test_path)),
            ("embeddings", opt_path(&self.embeddings_path)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
