//! Per-layer multiply-add counts for one forward pass of a single sample.

use std::fmt::Write as _;

use crate::layers::{Network, WeightKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: WeightKind,
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    /// Matrix applications per sample: 1 for linear layers, output pixels
    /// for convolutions.
    pub applications: usize,
    pub transform: u64,
    pub sparse: u64,
    pub dense: u64,
    pub bias: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.transform + self.sparse + self.dense + self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(LayerFlops::total).sum()
    }

    /// Extra multiply-adds per training step when full-grid gradients are
    /// materialised every `delta_t` steps, for a batch of `batch` samples.
    pub fn dense_grad_surcharge(&self, batch: usize, delta_t: usize) -> f64 {
        let per_sample: u64 = self
            .layers
            .iter()
            .filter(|l| l.kind != WeightKind::Dense)
            .map(|l| (l.rows * l.cols * l.applications) as u64)
            .sum();
        (per_sample * batch as u64) as f64 / delta_t.max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,rows,cols,nnz,applications,transform,sparse,dense,bias,total\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                l.layer,
                l.kind,
                l.rows,
                l.cols,
                l.nnz,
                l.applications,
                l.transform,
                l.sparse,
                l.dense,
                l.bias,
                l.total()
            );
        }
        let sum = |f: fn(&LayerFlops) -> u64| self.layers.iter().map(f).sum::<u64>();
        let _ = writeln!(
            out,
            "total,,,,{},,{},{},{},{},{}",
            self.layers.iter().map(|l| l.nnz).sum::<usize>(),
            sum(|l| l.transform),
            sum(|l| l.sparse),
            sum(|l| l.dense),
            sum(|l| l.bias),
            self.total()
        );
        out
    }
}

pub fn flop_report(net: &Network) -> FlopReport {
    let mut layers = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let Some(op) = layer.weight_op() else { continue };
        let apps = layer.applications();
        let cost = op.apply_cost();
        let bias = if op.bias().is_some() { op.rows() } else { 0 };
        layers.push(LayerFlops {
            layer: i,
            kind: op.kind(),
            rows: op.rows(),
            cols: op.cols(),
            nnz: op.nnz(),
            applications: apps,
            transform: cost.transform * apps as u64,
            sparse: cost.sparse * apps as u64,
            dense: cost.dense * apps as u64,
            bias: (bias * apps) as u64,
        });
    }
    FlopReport { layers }
}

/// Multiply-adds counted by an instrumented forward pass over one sample,
/// biases excluded. Agrees with [`flop_report`] minus the bias column.
pub fn counted_forward(net: &Network, x: &[f64]) -> crate::Result<u64> {
    let mut ops = 0;
    net.forward_cached(x, 1, &mut ops)?;
    Ok(ops)
}
