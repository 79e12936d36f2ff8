//! Adam and SGD with momentum over a network's trainable parameters:
//! support values, alphas (when trainable) and biases. Weight decay is
//! added to the gradient as `lambda w`.

use crate::error::{Error, Result};
use crate::layers::{NetworkGrads, Network, WeightOp};
use crate::sparse::SparseMatrix;

use super::config::OptimizerKind;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// One SGD-with-momentum update: `buf = mu buf + g + lambda w; w -= lr buf`.
pub fn sgd_step(w: &mut [f64], g: &[f64], buf: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((wi, &gi), bi) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        let d = gi + weight_decay * *wi;
        *bi = momentum * *bi + d;
        *wi -= lr * *bi;
    }
}

/// One bias-corrected Adam update at step `t` (counted from 1).
pub fn adam_step(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64, weight_decay: f64) {
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let d = gi + weight_decay * *wi;
        *mi = BETA1 * *mi + (1.0 - BETA1) * d;
        *vi = BETA2 * *vi + (1.0 - BETA2) * d * d;
        *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Slot {
    fn new(n: usize) -> Self {
        Slot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerState {
    values: Slot,
    alpha: Slot,
    bias: Slot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    step: u64,
    layers: Vec<LayerState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, net: &Network) -> Self {
        let layers = net
            .weight_ops()
            .iter()
            .map(|op| LayerState {
                values: Slot::new(op.nnz()),
                alpha: Slot::new(1),
                bias: Slot::new(op.bias().map_or(0, <[f64]>::len)),
            })
            .collect();
        Optimizer {
            kind,
            momentum,
            weight_decay,
            step: 0,
            layers,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn update(&self, w: &mut [f64], g: &[f64], slot: &mut Slot, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(w, g, &mut slot.m, lr, self.momentum, self.weight_decay),
            OptimizerKind::Adam => adam_step(w, g, &mut slot.m, &mut slot.v, lr, self.step, self.weight_decay),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &NetworkGrads, lr: f64) -> Result<()> {
        // Reject the whole update before touching any parameter.
        for (l, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            let bad = |xs: &[f64]| xs.iter().any(|x| !x.is_finite());
            if bad(&g.values) || bad(&g.bias) || !g.alpha.is_finite() {
                return Err(Error::NonFinite(format!("gradient of layer {l}")));
            }
        }
        self.step += 1;
        let mut states = std::mem::take(&mut self.layers);
        let mut w_idx = 0;
        for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
            let (Some(op), Some(g)) = (layer.weight_op_mut(), g) else { continue };
            let state = &mut states[w_idx];
            self.update(op.values_mut(), &g.values, &mut state.values, lr);
            if let Some(a) = op.alpha().filter(|_| op.alpha_trainable()) {
                let mut alpha = [a];
                self.update(&mut alpha, &[g.alpha], &mut state.alpha, lr);
                op.set_alpha(alpha[0])?;
            }
            if let Some(b) = op.bias_mut() {
                self.update(b, &g.bias, &mut state.bias, lr);
            }
            w_idx += 1;
        }
        self.layers = states;
        Ok(())
    }

    /// Re-aligns the value state of weight layer `layer` after its support
    /// changed: kept coordinates keep their moments, new ones start at 0.
    pub fn remap_support(&mut self, layer: usize, old: &SparseMatrix, new: &SparseMatrix) {
        let slot = &mut self.layers[layer].values;
        slot.m = crate::rigl::remap_state(old, new, &slot.m);
        slot.v = crate::rigl::remap_state(old, new, &slot.v);
    }

    /// Per-layer value state sizes, for consistency checks.
    pub fn value_state_len(&self, layer: usize) -> usize {
        self.layers[layer].values.m.len()
    }
}

/// Trainable scalars of one operator, in optimizer order.
pub fn trainable_params(op: &WeightOp) -> Vec<f64> {
    let mut out = op.values().to_vec();
    if let Some(a) = op.alpha().filter(|_| op.alpha_trainable()) {
        out.push(a);
    }
    if let Some(b) = op.bias() {
        out.extend_from_slice(b);
    }
    out
}
