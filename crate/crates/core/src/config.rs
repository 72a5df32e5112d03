//! Flat `key = value` configuration covering data generation, training and
//! evaluation. `#` starts a comment; unknown keys are rejected with the
//! offending line number.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::TransformSpec;
use crate::error::{Error, Result};
use crate::loss::LossSwitches;

/// Base learning rate per 256 samples of batch.
pub const LR_PER_256: f64 = 0.0675;

pub fn scaled_base_lr(batch_size: usize) -> f64 {
    LR_PER_256 * batch_size as f64 / 256.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub xi: f64,
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    /// Memory bank size `K`.
    pub bank_size: usize,
    /// Batch size `N`.
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub ema_m: f64,
    pub seed: u64,
    pub switches: LossSwitches,
    /// Capacity of the past-probability queue; 0 disables it.
    pub prob_queue: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub transform: TransformSpec,
    /// Checkpoint period in epochs; 0 writes only the initial and final ones.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let batch_size = 64;
        Self {
            tau: 0.2,
            xi: 0.9,
            lambda: 2.0,
            sinkhorn_iters: 3,
            bank_size: 256,
            batch_size,
            epochs: 200,
            base_lr: scaled_base_lr(batch_size),
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            ema_m: 0.99,
            seed: 0,
            switches: LossSwitches::default(),
            prob_queue: 0,
            hidden: vec![64, 64],
            out_dim: 16,
            transform: TransformSpec::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Encoder layer widths for inputs of dimension `d_in`.
    pub fn dims(&self, d_in: usize) -> Vec<usize> {
        let mut dims = vec![d_in];
        dims.extend(&self.hidden);
        dims.push(self.out_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be > 0, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("lambda", self.lambda)?;
        positive("base_lr", self.base_lr)?;
        if self.bank_size == 0 {
            return Err(Error::param("bank_size", "must be positive"));
        }
        let lo = 1.0 / (self.bank_size as f64 + 1.0);
        if !(self.xi >= lo && self.xi <= 1.0) {
            return Err(Error::param(
                "xi",
                format!("must lie in [{lo}, 1], got {}", self.xi),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if self.batch_size > self.bank_size {
            return Err(Error::param(
                "batch_size",
                format!("batch {} exceeds bank {}", self.batch_size, self.bank_size),
            ));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::param("sinkhorn_iters", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::param(
                "sgd_momentum",
                format!("must lie in [0, 1), got {}", self.sgd_momentum),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Error::param(
                "ema_m",
                format!("must lie in [0, 1], got {}", self.ema_m),
            ));
        }
        if self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::param(
                "architecture",
                "layer widths must be positive",
            ));
        }
        if self.hidden.len() > 4 {
            return Err(Error::param(
                "hidden",
                "at most 4 hidden layers (depth 2-5)",
            ));
        }
        self.transform.validate()
    }

    /// Training keys in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tau", self.tau.to_string()),
            ("xi", self.xi.to_string()),
            ("lambda", self.lambda.to_string()),
            ("sinkhorn_iters", self.sinkhorn_iters.to_string()),
            ("bank_size", self.bank_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("sgd_momentum", self.sgd_momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("ema_m", self.ema_m.to_string()),
            ("seed", self.seed.to_string()),
            ("uniform_labels", self.switches.uniform_labels.to_string()),
            ("xsim_reg", self.switches.xsim_reg.to_string()),
            ("prob_queue", self.prob_queue.to_string()),
            ("hidden", join(&self.hidden)),
            ("out_dim", self.out_dim.to_string()),
            ("noise_sigma", self.transform.noise_sigma.to_string()),
            ("scale_min", self.transform.scale_min.to_string()),
            ("scale_max", self.transform.scale_max.to_string()),
            ("mask_fraction", self.transform.mask_fraction.to_string()),
            ("flip_prob", self.transform.flip_prob.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub separation: f64,
    pub data_seed: u64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 400,
            d_in: 16,
            separation: 6.0,
            data_seed: 0,
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    /// Evaluate the input of the last linear layer instead of the output.
    pub penultimate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            probe_steps: 500,
            probe_lr: 0.5,
            penultimate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value {value:?} for '{key}': {e}"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Every recognized key.
    pub const KEYS: &'static [&'static str] = &[
        "tau",
        "xi",
        "lambda",
        "sinkhorn_iters",
        "bank_size",
        "batch_size",
        "epochs",
        "base_lr",
        "sgd_momentum",
        "weight_decay",
        "ema_m",
        "seed",
        "uniform_labels",
        "xsim_reg",
        "prob_queue",
        "hidden",
        "out_dim",
        "noise_sigma",
        "scale_min",
        "scale_max",
        "mask_fraction",
        "flip_prob",
        "checkpoint_every",
        "classes",
        "per_class",
        "d_in",
        "separation",
        "data_seed",
        "test_fraction",
        "knn_k",
        "probe_steps",
        "probe_lr",
        "penultimate",
    ];

    /// Sets one key. A `batch_size` change rescales `base_lr` unless
    /// `base_lr` is set explicitly afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "tau" => t.tau = parse_value(key, value)?,
            "xi" => t.xi = parse_value(key, value)?,
            "lambda" => t.lambda = parse_value(key, value)?,
            "sinkhorn_iters" => t.sinkhorn_iters = parse_value(key, value)?,
            "bank_size" => t.bank_size = parse_value(key, value)?,
            "batch_size" => {
                t.batch_size = parse_value(key, value)?;
                t.base_lr = scaled_base_lr(t.batch_size);
            }
            "epochs" => t.epochs = parse_value(key, value)?,
            "base_lr" => t.base_lr = parse_value(key, value)?,
            "sgd_momentum" => t.sgd_momentum = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "ema_m" => t.ema_m = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "uniform_labels" => t.switches.uniform_labels = parse_value(key, value)?,
            "xsim_reg" => t.switches.xsim_reg = parse_value(key, value)?,
            "prob_queue" => t.prob_queue = parse_value(key, value)?,
            "hidden" => t.hidden = parse_list(key, value)?,
            "out_dim" => t.out_dim = parse_value(key, value)?,
            "noise_sigma" => t.transform.noise_sigma = parse_value(key, value)?,
            "scale_min" => t.transform.scale_min = parse_value(key, value)?,
            "scale_max" => t.transform.scale_max = parse_value(key, value)?,
            "mask_fraction" => t.transform.mask_fraction = parse_value(key, value)?,
            "flip_prob" => t.transform.flip_prob = parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            "classes" => self.data.classes = parse_value(key, value)?,
            "per_class" => self.data.per_class = parse_value(key, value)?,
            "d_in" => self.data.d_in = parse_value(key, value)?,
            "separation" => self.data.separation = parse_value(key, value)?,
            "data_seed" => self.data.data_seed = parse_value(key, value)?,
            "test_fraction" => self.data.test_fraction = parse_value(key, value)?,
            "knn_k" => self.eval.knn_k = parse_value(key, value)?,
            "probe_steps" => self.eval.probe_steps = parse_value(key, value)?,
            "probe_lr" => self.eval.probe_lr = parse_value(key, value)?,
            "penultimate" => self.eval.penultimate = parse_value(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                reason: format!("expected 'key = value', got {line:?}"),
            })?;
            self.set(key.trim(), value)
                .map_err(|reason| Error::Config {
                    line: i + 1,
                    reason,
                })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        if d.classes == 0 || d.per_class == 0 || d.d_in == 0 {
            return Err(Error::param(
                "data",
                "classes, per_class and d_in must be positive",
            ));
        }
        if !(d.separation > 0.0) {
            return Err(Error::param(
                "separation",
                format!("must be > 0, got {}", d.separation),
            ));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::param(
                "test_fraction",
                format!("must lie in [0, 1), got {}", d.test_fraction),
            ));
        }
        if self.eval.knn_k == 0 {
            return Err(Error::param("knn_k", "must be positive"));
        }
        Ok(())
    }

    /// Fully resolved configuration in key order; parses back to `self`.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let e = &self.eval;
        let mut pairs = self.train.to_pairs();
        pairs.extend([
            ("classes", d.classes.to_string()),
            ("per_class", d.per_class.to_string()),
            ("d_in", d.d_in.to_string()),
            ("separation", d.separation.to_string()),
            ("data_seed", d.data_seed.to_string()),
            ("test_fraction", d.test_fraction.to_string()),
            ("knn_k", e.knn_k.to_string()),
            ("probe_steps", e.probe_steps.to_string()),
            ("probe_lr", e.probe_lr.to_string()),
            ("penultimate", e.penultimate.to_string()),
        ]);
        pairs
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
