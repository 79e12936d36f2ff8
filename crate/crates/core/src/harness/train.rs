//! Mini-batch training with per-epoch metrics, best-validation tracking and
//! optional drop-and-grow support updates.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{BackwardOptions, Network, Weights};
use crate::rigl::rigl_step;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::Dataset;
use super::optim::Optimizer;
use super::seeds;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_acc,seconds,flops";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based epoch.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
    /// Multiply-adds counted in the training passes of this epoch.
    pub flops: u64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.6},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_acc, r.seconds, r.flops
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    /// State after the epoch with the highest validation accuracy (earliest
    /// on ties); the initial state when no epoch ran.
    pub best: Checkpoint,
    pub best_epoch: Option<usize>,
    pub last: Checkpoint,
    /// Support updates applied, as `(step, layer, swapped)`.
    pub rigl_updates: Vec<(usize, usize, usize)>,
}

/// Top-1 accuracy of `net` on `data`, evaluated in chunks of `batch`.
pub fn accuracy(net: &Network, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = data.batch(chunk);
        let pred = net.predict(&b.inputs, b.len())?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `net` in place. Data order is drawn from the config seed.
pub fn train(cfg: &TrainConfig, net: &mut Network, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, net, train_set, val_set, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    net: &mut Network,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay, net);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::SHUFFLE));
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = Checkpoint::from_network(net)?;
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut rigl_updates = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut flops) = (0.0, 0, 0u64);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let update = cfg.rigl.is_some_and(|r| r.is_update(step, total_steps));
            let batch = train_set.batch(chunk);
            let opts = BackwardOptions {
                dense_grads: update,
                input_grad: false,
            };
            let res = net
                .loss_and_grad(&batch.inputs, &batch.labels, opts, &mut flops)
                .map_err(|e| diverged(e, epoch + 1))?;
            loss_sum += res.loss * batch.len() as f64;
            correct += res.correct;
            optimizer.step(net, &res.grads, lr).map_err(|e| diverged(e, epoch + 1))?;
            if let (true, Some(rc)) = (update, cfg.rigl) {
                let fraction = rc.drop_fraction(step, total_steps);
                let mut w_idx = 0;
                for (layer, g) in net.layers_mut().iter_mut().zip(&res.grads.layers) {
                    let (Some(op), Some(g)) = (layer.weight_op_mut(), g) else { continue };
                    if let (Some(old), Some(grid)) = (op.sparse(), g.dense.as_deref()) {
                        let upd = rigl_step(old, grid, fraction)?;
                        if !upd.dropped.is_empty() {
                            optimizer.remap_support(w_idx, old, &upd.matrix);
                            rigl_updates.push((step, w_idx, upd.dropped.len()));
                            match op.weights_mut() {
                                Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => *s = upd.matrix,
                                Weights::Dense(_) => unreachable!("dense layers have no support"),
                            }
                        }
                    }
                    w_idx += 1;
                }
            }
        }
        let val_acc = accuracy(net, val_set, cfg.batch_size.max(256))?;
        let row = MetricsRow {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            seconds: if cfg.wallclock { started.elapsed().as_secs_f64() } else { 0.0 },
            flops,
        };
        log::info!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            row.val_acc
        );
        // With no validation data the latest epoch counts as best.
        if val_set.is_empty() || val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = Some(epoch + 1);
            best = Checkpoint::from_network(net)?;
        }
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        metrics,
        best,
        best_epoch,
        last: Checkpoint::from_network(net)?,
        rigl_updates,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { epoch },
        other => other,
    }
}
