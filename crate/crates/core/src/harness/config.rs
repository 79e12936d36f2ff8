//! Experiment configuration: a flat `key = value` text file.
//!
//! Lines starting with `#` are comments. Keys under `manifest.` are ignored
//! so a written run manifest can be fed back in as a config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::alloc::Heuristic;
use crate::error::{Error, Result};
use crate::layers::{LayerSpec, NetworkSpec, WeightKind};
use crate::rigl::RiglConfig;

/// Raw key-value pairs in file order of appearance, deduplicated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if k.starts_with("manifest.") {
                continue;
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        Ok(KeyValues { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.map.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// How the trainable support is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// DCT-plus-sparse layers with a heuristic support and `S = 0`.
    Dctps,
    /// Plain sparse layers with a heuristic support.
    Random,
    /// Every weight trainable.
    Dense,
    Snip,
    Force,
    Synflow,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dctps" => Ok(Method::Dctps),
            "random" => Ok(Method::Random),
            "dense" => Ok(Method::Dense),
            "snip" => Ok(Method::Snip),
            "force" => Ok(Method::Force),
            "synflow" => Ok(Method::Synflow),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Dctps => "dctps",
            Method::Random => "random",
            Method::Dense => "dense",
            Method::Snip => "snip",
            Method::Force => "force",
            Method::Synflow => "synflow",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { files: Vec<PathBuf>, classes: usize },
    Synthetic { n: usize, dim: usize, classes: usize, spread: f64 },
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataSource,
    /// Use at most this many samples (0 keeps all).
    pub data_limit: usize,
    pub val_fraction: f64,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub alpha_init: Vec<f64>,
    pub alpha_trainable: bool,
    pub bias: bool,
    pub method: Method,
    pub density: f64,
    pub heuristic: Heuristic,
    pub prune_steps: usize,
    pub prune_batches: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rigl: Option<RiglConfig>,
    pub wallclock: bool,
    pub spectrum_k: usize,
}

const KEYS: &[&str] = &[
    "seed",
    "data.kind",
    "data.images",
    "data.labels",
    "data.files",
    "data.classes",
    "data.n",
    "data.dim",
    "data.spread",
    "data.limit",
    "data.val_fraction",
    "network.input",
    "network.layers",
    "network.alpha_init",
    "network.alpha_trainable",
    "network.bias",
    "method",
    "density",
    "heuristic",
    "prune.steps",
    "prune.batches",
    "optim.kind",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.decay_epochs",
    "optim.decay_factor",
    "train.epochs",
    "train.batch_size",
    "rigl.enabled",
    "rigl.delta_t",
    "rigl.alpha",
    "rigl.t_end_frac",
    "metrics.wallclock",
    "spectrum.k",
];

fn parse_value<T: std::str::FromStr>(kv: &KeyValues, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad list entry `{s}` for `{key}`"))))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        if let Some(unknown) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key `{unknown}`")));
        }
        let data = match kv.get("data.kind").unwrap_or("synthetic") {
            "idx" => DataSource::Idx {
                images: kv.get("data.images").ok_or_else(|| Error::Config("data.images is required for idx".into()))?.into(),
                labels: kv.get("data.labels").ok_or_else(|| Error::Config("data.labels is required for idx".into()))?.into(),
            },
            "cifar" => DataSource::Cifar {
                files: parse_list::<String>("data.files", kv.get("data.files").unwrap_or(""))?
                    .into_iter()
                    .map(PathBuf::from)
                    .collect(),
                classes: parse_value(kv, "data.classes", 10)?,
            },
            "synthetic" => DataSource::Synthetic {
                n: parse_value(kv, "data.n", 200)?,
                dim: parse_value(kv, "data.dim", 2)?,
                classes: parse_value(kv, "data.classes", 2)?,
                spread: parse_value(kv, "data.spread", 0.5)?,
            },
            other => return Err(Error::Config(format!("unknown data.kind `{other}`"))),
        };
        let default_input = match &data {
            DataSource::Synthetic { dim, .. } => dim.to_string(),
            DataSource::Cifar { .. } => "3,32,32".into(),
            DataSource::Idx { .. } => "1,28,28".into(),
        };
        let input_shape = parse_list("network.input", kv.get("network.input").unwrap_or(&default_input))?;
        let layers = NetworkSpec::parse_layers(kv.get("network.layers").unwrap_or("fc:16,fc:2"))?;
        let optimizer = match kv.get("optim.kind").unwrap_or("adam") {
            "adam" => OptimizerKind::Adam,
            "sgd" | "sgd-momentum" => OptimizerKind::Sgd,
            other => return Err(Error::Config(format!("unknown optim.kind `{other}`"))),
        };
        let default_lr = match optimizer {
            OptimizerKind::Adam => 1e-3,
            OptimizerKind::Sgd => 0.1,
        };
        let method: Method = parse_value(kv, "method", Method::Dctps)?;
        let rigl = if parse_value(kv, "rigl.enabled", false)? {
            let defaults = RiglConfig::default();
            let cfg = RiglConfig {
                delta_t: parse_value(kv, "rigl.delta_t", defaults.delta_t)?,
                alpha: parse_value(kv, "rigl.alpha", defaults.alpha)?,
                t_end_frac: parse_value(kv, "rigl.t_end_frac", defaults.t_end_frac)?,
            };
            cfg.validate()?;
            Some(cfg)
        } else {
            None
        };
        let cfg = TrainConfig {
            seed: parse_value(kv, "seed", 0)?,
            data,
            data_limit: parse_value(kv, "data.limit", 0)?,
            val_fraction: parse_value(kv, "data.val_fraction", 0.1)?,
            input_shape,
            layers,
            alpha_init: parse_list("network.alpha_init", kv.get("network.alpha_init").unwrap_or("1"))?,
            alpha_trainable: parse_value(kv, "network.alpha_trainable", true)?,
            bias: parse_value(kv, "network.bias", true)?,
            method,
            density: parse_value(kv, "density", 0.01)?,
            heuristic: parse_value(kv, "heuristic", Heuristic::Epl)?,
            prune_steps: parse_value(kv, "prune.steps", 0)?,
            prune_batches: parse_value(kv, "prune.batches", 1)?,
            optimizer,
            lr: parse_value(kv, "optim.lr", default_lr)?,
            momentum: parse_value(kv, "optim.momentum", 0.9)?,
            weight_decay: parse_value(kv, "optim.weight_decay", 5e-4)?,
            decay_epochs: parse_list("optim.decay_epochs", kv.get("optim.decay_epochs").unwrap_or("120,160"))?,
            decay_factor: parse_value(kv, "optim.decay_factor", 0.1)?,
            epochs: parse_value(kv, "train.epochs", 160)?,
            batch_size: parse_value(kv, "train.batch_size", 64)?,
            rigl,
            wallclock: parse_value(kv, "metrics.wallclock", false)?,
            spectrum_k: parse_value(kv, "spectrum.k", 20)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("data.val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must be in (0, 1], got {}", self.density)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.prune_batches == 0 {
            return Err(Error::Config("prune.batches must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("optim.weight_decay must be >= 0 and optim.momentum in [0, 1)".into()));
        }
        if self.rigl.is_some() && matches!(self.method, Method::Dense) {
            return Err(Error::Config("rigl needs a sparse method".into()));
        }
        if self.spectrum_k == 0 {
            return Err(Error::Config("spectrum.k must be positive".into()));
        }
        self.network_spec().prunable_count()?;
        Ok(())
    }

    /// Layer parameterisation implied by the method.
    pub fn weight_kind(&self) -> WeightKind {
        match self.method {
            Method::Dctps => WeightKind::Dctps,
            Method::Dense => WeightKind::Dense,
            // Pruning methods score a dense network and are sparsified after.
            Method::Snip | Method::Force | Method::Synflow => WeightKind::Dense,
            Method::Random => WeightKind::Sparse,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::new(self.input_shape.clone(), self.layers.clone(), self.weight_kind());
        spec.alpha_init = self.alpha_init.clone();
        spec.alpha_trainable = self.alpha_trainable;
        spec.bias = self.bias;
        spec
    }

    /// Learning rate for `epoch` (0-based): step decay for SGD, constant
    /// for Adam.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.optimizer {
            OptimizerKind::Adam => self.lr,
            OptimizerKind::Sgd => {
                let passed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
                self.lr * self.decay_factor.powi(passed as i32)
            }
        }
    }

    /// Every setting, defaults included, as config text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        match &self.data {
            DataSource::Idx { images, labels } => {
                put("data.kind", "idx".into());
                put("data.images", images.display().to_string());
                put("data.labels", labels.display().to_string());
            }
            DataSource::Cifar { files, classes } => {
                put("data.kind", "cifar".into());
                put("data.files", files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join(","));
                put("data.classes", classes.to_string());
            }
            DataSource::Synthetic { n, dim, classes, spread } => {
                put("data.kind", "synthetic".into());
                put("data.n", n.to_string());
                put("data.dim", dim.to_string());
                put("data.classes", classes.to_string());
                put("data.spread", format!("{spread:?}"));
            }
        }
        put("data.limit", self.data_limit.to_string());
        put("data.val_fraction", format!("{:?}", self.val_fraction));
        put("network.input", join(&self.input_shape));
        put("network.layers", join(&self.layers));
        put("network.alpha_init", self.alpha_init.iter().map(|a| format!("{a:?}")).collect::<Vec<_>>().join(","));
        put("network.alpha_trainable", self.alpha_trainable.to_string());
        put("network.bias", self.bias.to_string());
        put("method", self.method.to_string());
        put("density", format!("{:?}", self.density));
        put("heuristic", self.heuristic.to_string());
        put("prune.steps", self.prune_steps.to_string());
        put("prune.batches", self.prune_batches.to_string());
        put(
            "optim.kind",
            match self.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .into(),
        );
        put("optim.lr", format!("{:?}", self.lr));
        put("optim.momentum", format!("{:?}", self.momentum));
        put("optim.weight_decay", format!("{:?}", self.weight_decay));
        put("optim.decay_epochs", join(&self.decay_epochs));
        put("optim.decay_factor", format!("{:?}", self.decay_factor));
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("rigl.enabled", self.rigl.is_some().to_string());
        let r = self.rigl.unwrap_or_default();
        put("rigl.delta_t", r.delta_t.to_string());
        put("rigl.alpha", format!("{:?}", r.alpha));
        put("rigl.t_end_frac", format!("{:?}", r.t_end_frac));
        put("metrics.wallclock", self.wallclock.to_string());
        put("spectrum.k", self.spectrum_k.to_string());
        out
    }
}
