//! End-to-end runs: load data, choose the trainable support, train, and
//! write the manifest, metrics and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc::SupportPlan;
use crate::error::{Error, Result};
use crate::layers::{build_network, Batch, Network};
use crate::saliency::{iterative_prune, sparsify, LayerReport, Mask, PruneMethod, PruneSchedule};

use super::checkpoint::atomic_write;
use super::config::{DataSource, Method, TrainConfig};
use super::data::{load_cifar, load_idx, synthetic_blobs, Dataset};
use super::seeds;
use super::train::{metrics_csv, train_with, TrainOutcome};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Loads the configured dataset and applies `data.limit`.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let ds = match &cfg.data {
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
        DataSource::Cifar { files, classes } => load_cifar(files, *classes)?,
        DataSource::Synthetic { n, dim, classes, spread } => {
            synthetic_blobs(*n, *dim, *classes, *spread, seeds::derive(cfg.seed, seeds::DATA))?
        }
    };
    Ok(ds.limit(cfg.data_limit))
}

/// Network and data ready for training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub checksum: String,
    pub net: Network,
    /// Pruning mask, for saliency methods.
    pub mask: Option<Mask>,
}

impl Prepared {
    pub fn allocation(&self) -> LayerReport {
        Mask::of_network(&self.net).report()
    }
}

/// Batches used to score saliency: the first `prune.batches` batches of a
/// seeded permutation of the training set.
pub fn prune_batches(cfg: &TrainConfig, train: &Dataset) -> Vec<Batch> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::PRUNE)));
    idx.chunks(cfg.batch_size).take(cfg.prune_batches).map(|c| train.batch(c)).collect()
}

/// Builds the network the config describes, including support selection.
pub fn build_for(cfg: &TrainConfig, train: &Dataset) -> Result<(Network, Option<Mask>)> {
    let spec = cfg.network_spec();
    let init_seed = seeds::derive(cfg.seed, seeds::INIT);
    match cfg.method {
        Method::Dense => Ok((build_network(&spec, None, init_seed)?, None)),
        Method::Dctps | Method::Random => {
            let plan = SupportPlan::with_density(spec.layer_shapes()?, cfg.density, cfg.heuristic, seeds::derive(cfg.seed, seeds::ALLOC))?;
            Ok((build_network(&spec, Some(&plan), init_seed)?, None))
        }
        Method::Snip | Method::Force | Method::Synflow => {
            let dense = build_network(&spec, None, init_seed)?;
            let method: PruneMethod = cfg.method.to_string().parse()?;
            let steps = if cfg.prune_steps == 0 { method.default_steps() } else { cfg.prune_steps };
            let batches = prune_batches(cfg, train);
            let (mask, _) = iterative_prune(&dense, method, PruneSchedule::new(steps, cfg.density)?, &batches)?;
            Ok((sparsify(&dense, &mask)?, Some(mask)))
        }
    }
}

pub fn prepare(cfg: &TrainConfig) -> Result<Prepared> {
    let data = load_dataset(cfg)?;
    let want: usize = cfg.input_shape.iter().product();
    if data.dim() != want {
        return Err(Error::Config(format!(
            "network.input {:?} has {want} values but samples have shape {:?}",
            cfg.input_shape, data.shape
        )));
    }
    let checksum = data.checksum();
    let (train, val) = data.split(cfg.val_fraction, seeds::derive(cfg.seed, seeds::SPLIT));
    let (net, mask) = build_for(cfg, &train)?;
    if net.output_len() < data.classes {
        return Err(Error::Config(format!("network has {} outputs for {} classes", net.output_len(), data.classes)));
    }
    Ok(Prepared {
        train,
        val,
        checksum,
        net,
        mask,
    })
}

/// Resolved config plus everything else needed to reproduce the run. The
/// text parses back as a config since `manifest.` keys are ignored.
pub fn manifest_text(cfg: &TrainConfig, prepared: &Prepared) -> String {
    let mut out = cfg.to_text();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "manifest.{k} = {v}");
    };
    put("version", VERSION.into());
    for (name, stream) in [
        ("data", seeds::DATA),
        ("split", seeds::SPLIT),
        ("alloc", seeds::ALLOC),
        ("init", seeds::INIT),
        ("shuffle", seeds::SHUFFLE),
        ("prune", seeds::PRUNE),
    ] {
        put(&format!("seed.{name}"), seeds::derive(cfg.seed, stream).to_string());
    }
    put("dataset.sha256", prepared.checksum.clone());
    put("dataset.train", prepared.train.len().to_string());
    put("dataset.val", prepared.val.len().to_string());
    let report = prepared.allocation();
    for (i, (shape, nnz)) in report.rows.iter().enumerate() {
        put(&format!("alloc.{i}"), format!("{}x{} nnz={nnz}", shape.rows, shape.cols));
    }
    put("alloc.density", format!("{:?}", report.global_density()));
    put("trainable", prepared.net.trainable_count().to_string());
    out
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub manifest: String,
    pub metrics_csv: String,
    pub allocation: LayerReport,
}

/// Runs the experiment. With `out`, writes `manifest.txt`,
/// `allocation.csv`, `metrics.csv` (rewritten after every epoch),
/// `best.ckpt`, `final.ckpt` and, for pruning methods, `mask.txt`.
pub fn run(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunResult> {
    let mut prepared = prepare(cfg)?;
    let manifest = manifest_text(cfg, &prepared);
    let allocation = prepared.allocation();
    if let Some(dir) = out {
        atomic_write(&dir.join("manifest.txt"), manifest.as_bytes())?;
        atomic_write(&dir.join("allocation.csv"), allocation.to_csv().as_bytes())?;
        if let Some(mask) = &prepared.mask {
            atomic_write(&dir.join("mask.txt"), mask.to_rle().as_bytes())?;
        }
    }
    let mut rows = Vec::new();
    let mut write_err = None;
    let outcome = train_with(cfg, &mut prepared.net, &prepared.train, &prepared.val, |row| {
        rows.push(row.clone());
        if let Some(dir) = out {
            if let Err(e) = atomic_write(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let metrics = metrics_csv(&outcome.metrics);
    if let Some(dir) = out {
        atomic_write(&dir.join("metrics.csv"), metrics.as_bytes())?;
        outcome.best.save(&dir.join("best.ckpt"))?;
        outcome.last.save(&dir.join("final.ckpt"))?;
    }
    Ok(RunResult {
        outcome,
        manifest,
        metrics_csv: metrics,
        allocation,
    })
}
