//! Pruning-at-initialisation scores and iterative global magnitude masking.
//!
//! Every score has the form `G(w) = (dR/dw) * w` for some objective `R`, so a
//! weight that is exactly zero always scores zero. Scores live on the full
//! weight grid of each prunable layer; masks are selected globally.

use std::fmt;
use std::str::FromStr;

use crate::alloc::LayerShape;
use crate::error::{Error, Result};
use crate::layers::{BackwardOptions, Batch, Network, WeightKind, WeightOp, Weights};
use crate::sparse::SparseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Snip,
    Grasp,
    Synflow,
    Force,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snip" => Ok(Method::Snip),
            "grasp" => Ok(Method::Grasp),
            "synflow" => Ok(Method::Synflow),
            "force" => Ok(Method::Force),
            other => Err(Error::Config(format!("unknown saliency method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Snip => "snip",
            Method::Grasp => "grasp",
            Method::Synflow => "synflow",
            Method::Force => "force",
        })
    }
}

/// Per-layer scores over the full `rows x cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub method: Method,
    pub shapes: Vec<LayerShape>,
    pub layers: Vec<Vec<f64>>,
}

impl SaliencyMap {
    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.concat()
    }
}

/// Eq. `G(w) = g * w` elementwise.
pub fn synaptic_saliency(grad: &[f64], weights: &[f64]) -> Vec<f64> {
    grad.iter().zip(weights).map(|(g, w)| g * w).collect()
}

/// `|g * w|`.
pub fn snip_from_grad(grad: &[f64], weights: &[f64]) -> Vec<f64> {
    grad.iter().zip(weights).map(|(g, w)| (g * w).abs()).collect()
}

/// Central-difference Hessian-vector product `H v` from a gradient oracle.
pub fn hvp_fd<F>(w: &[f64], v: &[f64], mut grad: F, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("hvp step must be positive, got {eps}")));
    }
    let shifted = |sign: f64| -> Vec<f64> { w.iter().zip(v).map(|(a, b)| a + sign * eps * b).collect() };
    let gp = grad(&shifted(1.0))?;
    let gm = grad(&shifted(-1.0))?;
    let hv: Vec<f64> = gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Hessian-vector product".into()));
    }
    Ok(hv)
}

/// `-(H g) * w` with `H g` from finite differences of `grad`, step
/// `hvp_eps (1 + |w|_inf)`.
pub fn grasp_from_grad_fn<F>(w: &[f64], mut grad: F, hvp_eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let g = grad(w)?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let w_inf = w.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let hg = hvp_fd(w, &g, grad, hvp_eps * (1.0 + w_inf))?;
    Ok(hg.iter().zip(w).map(|(h, wi)| -(h * wi)).collect())
}

/// Stored prunable values of every weight layer, concatenated.
fn flat_values(net: &Network) -> Vec<f64> {
    net.weight_ops().iter().flat_map(|op| op.values().to_vec()).collect()
}

fn set_flat_values(net: &mut Network, flat: &[f64]) {
    let mut offset = 0;
    for op in net.weight_ops_mut() {
        let n = op.nnz();
        op.values_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

/// Gradient of the summed per-batch mean loss with respect to the stored
/// prunable values.
fn flat_value_grads(net: &Network, batches: &[Batch]) -> Result<Vec<f64>> {
    if batches.is_empty() || batches.iter().any(Batch::is_empty) {
        return Err(Error::InvalidArgument("scoring needs at least one nonempty batch".into()));
    }
    let mut total = vec![0.0; net.weight_ops().iter().map(|op| op.nnz()).sum()];
    for batch in batches {
        let res = net.loss_and_grad(&batch.inputs, &batch.labels, BackwardOptions::default(), &mut 0)?;
        let flat = res.grads.layers.iter().flatten().flat_map(|g| g.values.iter().copied());
        for (t, g) in total.iter_mut().zip(flat) {
            *t += g;
        }
    }
    Ok(total)
}

/// Spreads a flat value-aligned vector onto each layer's full grid.
fn to_grids(net: &Network, flat: &[f64]) -> Vec<Vec<f64>> {
    let mut offset = 0;
    net.weight_ops()
        .iter()
        .map(|op| {
            let n = op.nnz();
            let vals = &flat[offset..offset + n];
            offset += n;
            match op.sparse() {
                None => vals.to_vec(),
                Some(s) => {
                    let mut grid = vec![0.0; op.capacity()];
                    for (&(r, c), &v) in s.support().iter().zip(vals) {
                        grid[r * op.cols() + c] = v;
                    }
                    grid
                }
            }
        })
        .collect()
}

fn map_from(net: &Network, method: Method, flat: &[f64]) -> SaliencyMap {
    SaliencyMap {
        method,
        shapes: net.layer_shapes(),
        layers: to_grids(net, flat),
    }
}

/// `|dL/dw * w|` summed over `batches`.
pub fn snip_scores(net: &Network, batches: &[Batch]) -> Result<SaliencyMap> {
    let g = flat_value_grads(net, batches)?;
    Ok(map_from(net, Method::Snip, &snip_from_grad(&g, &flat_values(net))))
}

/// `-(H g) * w` with the Hessian-vector product from gradient differences.
pub fn grasp_scores(net: &Network, batches: &[Batch], hvp_eps: f64) -> Result<SaliencyMap> {
    let mut probe = net.clone();
    let scores = grasp_from_grad_fn(
        &flat_values(net),
        |w| {
            set_flat_values(&mut probe, w);
            flat_value_grads(&probe, batches)
        },
        hvp_eps,
    )?;
    Ok(map_from(net, Method::Grasp, &scores))
}

/// The linearised network: absolute weights, zero biases.
fn synflow_network(net: &Network) -> Result<Network> {
    let mut lin = net.clone();
    for op in lin.weight_ops_mut() {
        if op.kind() == WeightKind::Dctps {
            return Err(Error::Unsupported(
                "synflow scores are defined for dense and sparse layers, not DCT-plus-sparse ones".into(),
            ));
        }
        op.values_mut().iter_mut().for_each(|v| *v = v.abs());
        if let Some(b) = op.bias_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(lin)
}

/// `R = 1^T prod_l |W_l| 1`, evaluated as the summed output of the
/// linearised network on the all-ones input.
pub fn synflow_objective(net: &Network) -> Result<f64> {
    let lin = synflow_network(net)?;
    let r: f64 = lin.forward(&vec![1.0; lin.input_len()], 1)?.iter().sum();
    if !r.is_finite() {
        return Err(Error::SynflowOverflow { value: r });
    }
    Ok(r)
}

/// Data-free scores `|w| * dR/d|w|`; nonnegative by construction.
pub fn synflow_scores(net: &Network) -> Result<SaliencyMap> {
    let lin = synflow_network(net)?;
    let (out, cache) = lin.forward_cached(&vec![1.0; lin.input_len()], 1, &mut 0)?;
    let r: f64 = out.iter().sum();
    if !r.is_finite() {
        return Err(Error::SynflowOverflow { value: r });
    }
    let grads = lin.backward(&cache, &vec![1.0; out.len()], BackwardOptions::default(), &mut 0)?;
    let g: Vec<f64> = grads.layers.iter().flatten().flat_map(|g| g.values.iter().copied()).collect();
    let scores = synaptic_saliency(&g, &flat_values(&lin));
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::SynflowOverflow { value: f64::INFINITY });
    }
    Ok(map_from(net, Method::Synflow, &scores))
}

/// Exponential density schedule `P_t = P^(t/T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSchedule {
    pub steps: usize,
    pub density: f64,
}

impl PruneSchedule {
    pub fn new(steps: usize, density: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("prune schedule needs at least one step".into()));
        }
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::Config(format!("density must be in (0, 1], got {density}")));
        }
        Ok(PruneSchedule { steps, density })
    }

    pub fn density_at(&self, step: usize) -> f64 {
        if step >= self.steps {
            return self.density;
        }
        self.density.powf(step as f64 / self.steps as f64)
    }

    /// Weights kept after `step` out of `total`: `ceil(P_t N)`. A relative
    /// slack absorbs products such as `0.1 * 100` landing just above an
    /// integer.
    pub fn keep_at(&self, step: usize, total: usize) -> usize {
        let x = self.density_at(step) * total as f64;
        ((x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize).min(total)
    }
}

/// Per-layer boolean keep-mask over the full weight grid (row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub shapes: Vec<LayerShape>,
    pub layers: Vec<Vec<bool>>,
}

impl Mask {
    pub fn full(shapes: &[LayerShape]) -> Self {
        Mask {
            shapes: shapes.to_vec(),
            layers: shapes.iter().map(|s| vec![true; s.capacity()]).collect(),
        }
    }

    pub fn empty(shapes: &[LayerShape]) -> Self {
        Mask {
            shapes: shapes.to_vec(),
            layers: shapes.iter().map(|s| vec![false; s.capacity()]).collect(),
        }
    }

    /// Mask of the current prunable support of a network: every grid entry
    /// of dense layers, the stored support of sparse ones.
    pub fn of_network(net: &Network) -> Self {
        let shapes = net.layer_shapes();
        let layers = net
            .weight_ops()
            .iter()
            .map(|op| match op.sparse() {
                None => vec![true; op.capacity()],
                Some(s) => {
                    let mut m = vec![false; op.capacity()];
                    for &(r, c) in s.support() {
                        m[r * op.cols() + c] = true;
                    }
                    m
                }
            })
            .collect();
        Mask { shapes, layers }
    }

    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.iter().filter(|&&b| b).count()).sum()
    }

    pub fn capacity(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.capacity() as f64
    }

    /// Support coordinates of layer `l`, row-major.
    pub fn support(&self, l: usize) -> Vec<(usize, usize)> {
        let cols = self.shapes[l].cols;
        self.layers[l].iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| (i / cols, i % cols)).collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    pub fn report(&self) -> LayerReport {
        LayerReport {
            rows: self
                .shapes
                .iter()
                .zip(&self.layers)
                .map(|(s, l)| (*s, l.iter().filter(|&&b| b).count()))
                .collect(),
        }
    }

    /// One line per layer: `layer=<i> rows=<m> cols=<n> rle=<runs>` where the
    /// runs alternate zeros and ones over the row-major grid, starting with a
    /// (possibly empty) run of zeros.
    pub fn to_rle(&self) -> String {
        let mut out = String::new();
        for (i, (s, bits)) in self.shapes.iter().zip(&self.layers).enumerate() {
            let mut runs = Vec::new();
            let mut current = false;
            let mut len = 0usize;
            for &b in bits {
                if b == current {
                    len += 1;
                } else {
                    runs.push(len);
                    current = b;
                    len = 1;
                }
            }
            runs.push(len);
            let runs: Vec<String> = runs.iter().map(usize::to_string).collect();
            out.push_str(&format!("layer={i} rows={} cols={} rle={}\n", s.rows, s.cols, runs.join(",")));
        }
        out
    }

    /// Parses [`Mask::to_rle`] output against known layer shapes.
    pub fn from_rle(text: &str, shapes: &[LayerShape]) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let mut fields = std::collections::HashMap::new();
            for part in line.split_whitespace() {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::format("mask", i, format!("field `{part}` is not key=value")))?;
                fields.insert(k, v);
            }
            let num = |k: &str| -> Result<usize> {
                fields
                    .get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format("mask", i, format!("missing or bad `{k}`")))
            };
            let shape = shapes
                .get(i)
                .ok_or_else(|| Error::format("mask", i, "more layers than the network has"))?;
            if num("layer")? != i || num("rows")? != shape.rows || num("cols")? != shape.cols {
                return Err(Error::format("mask", i, "layer header does not match the network"));
            }
            let rle = fields.get("rle").ok_or_else(|| Error::format("mask", i, "missing `rle`"))?;
            let mut bits = Vec::with_capacity(shape.capacity());
            for (j, run) in rle.split(',').enumerate() {
                let n: usize = run.parse().map_err(|_| Error::format("mask", i, format!("bad run `{run}`")))?;
                bits.extend(std::iter::repeat_n(j % 2 == 1, n));
            }
            if bits.len() != shape.capacity() {
                return Err(Error::format("mask", i, format!("runs cover {} of {} weights", bits.len(), shape.capacity())));
            }
            layers.push(bits);
        }
        if layers.len() != shapes.len() {
            return Err(Error::format("mask", layers.len(), "fewer layers than the network has"));
        }
        Ok(Mask {
            shapes: shapes.to_vec(),
            layers,
        })
    }
}

/// Remaining weights per prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub rows: Vec<(LayerShape, usize)>,
}

impl LayerReport {
    pub fn counts(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.1).collect()
    }

    pub fn global_density(&self) -> f64 {
        let nnz: usize = self.rows.iter().map(|r| r.1).sum();
        let cap: usize = self.rows.iter().map(|r| r.0.capacity()).sum();
        nnz as f64 / cap as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,rows,cols,capacity,nonzero,density\n");
        for (i, (s, n)) in self.rows.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{},{n},{:.6}\n", s.rows, s.cols, s.capacity(), *n as f64 / s.capacity() as f64));
        }
        let total: usize = self.rows.iter().map(|r| r.1).sum();
        let cap: usize = self.rows.iter().map(|r| r.0.capacity()).sum();
        out.push_str(&format!("total,,,{cap},{total},{:.6}\n", self.global_density()));
        out
    }
}

/// Zeroes every prunable weight outside `mask`, keeping the layer types.
pub fn apply_mask(net: &mut Network, mask: &Mask) -> Result<()> {
    check_mask(net, mask)?;
    for (op, keep) in net.weight_ops_mut().into_iter().zip(&mask.layers) {
        let cols = op.cols();
        match op.sparse() {
            None => {
                for (v, &k) in op.values_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
            Some(s) => {
                let support = s.support().to_vec();
                for (v, (r, c)) in op.values_mut().iter_mut().zip(support) {
                    if !keep[r * cols + c] {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Rebuilds every prunable layer as a sparse layer whose support is `mask`,
/// carrying over the current weight values. DCT-plus-sparse layers keep their
/// alpha and get the mask as the support of `S`.
pub fn sparsify(net: &Network, mask: &Mask) -> Result<Network> {
    check_mask(net, mask)?;
    let mut out = net.clone();
    for (l, op) in out.weight_ops_mut().into_iter().enumerate() {
        let grid = op.grid_weights();
        let cols = op.cols();
        let support = mask.support(l);
        let values = support.iter().map(|&(r, c)| grid[r * cols + c]).collect();
        let sparse = SparseMatrix::new(op.rows(), cols, support, values)?;
        let weights = match op.weights() {
            Weights::Dctps { alpha, .. } => Weights::Dctps { alpha: *alpha, sparse },
            _ => Weights::Sparse(sparse),
        };
        let rebuilt = WeightOp::new(op.rows(), cols, weights, op.bias().map(<[f64]>::to_vec))?
            .with_alpha_trainable(op.alpha_trainable());
        *op = rebuilt;
    }
    Ok(out)
}

fn check_mask(net: &Network, mask: &Mask) -> Result<()> {
    if mask.shapes != net.layer_shapes() {
        return Err(Error::shape("mask", format!("mask shapes {:?} do not match the network", mask.shapes)));
    }
    Ok(())
}

/// Keeps the `keep` highest-scoring entries among those active in `mask`.
/// Ties go to the lower (layer, row, col).
pub fn top_k_mask(scores: &SaliencyMap, active: &Mask, keep: usize) -> Result<Mask> {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (l, (s, a)) in scores.layers.iter().zip(&active.layers).enumerate() {
        for (i, (&v, &on)) in s.iter().zip(a).enumerate() {
            if on {
                if v.is_nan() {
                    return Err(Error::NonFinite(format!("{} score in layer {l}", scores.method)));
                }
                entries.push((v, l, i));
            }
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mask = Mask::empty(&active.shapes);
    for &(_, l, i) in entries.iter().take(keep) {
        mask.layers[l][i] = true;
    }
    Ok(mask)
}

/// Methods usable with [`iterative_prune`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneMethod {
    /// Rescores with `|g * w|` on the masked network each step; with one
    /// step this is one-shot SNIP, with many it is FORCE-style iterative SNIP.
    Snip,
    Force,
    Synflow,
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snip" => Ok(PruneMethod::Snip),
            "force" => Ok(PruneMethod::Force),
            "synflow" => Ok(PruneMethod::Synflow),
            other => Err(Error::Config(format!("`{other}` is not an iterative pruning method"))),
        }
    }
}

impl PruneMethod {
    /// Usual step count: 1 for SNIP, 60 for FORCE, 100 for SynFlow.
    pub fn default_steps(self) -> usize {
        match self {
            PruneMethod::Snip => 1,
            PruneMethod::Force => 60,
            PruneMethod::Synflow => 100,
        }
    }
}

/// Prunes `net`'s prunable weights to `schedule.density` globally. At step
/// `t` the masked network is rescored and the top `ceil(P_t N)` currently
/// active weights survive, so masks are nested. Returns the final mask and
/// the mask after every step.
pub fn iterative_prune(
    net: &Network,
    method: PruneMethod,
    schedule: PruneSchedule,
    batches: &[Batch],
) -> Result<(Mask, Vec<Mask>)> {
    let mut mask = Mask::of_network(net);
    let total = mask.capacity();
    let mut history = Vec::with_capacity(schedule.steps);
    if schedule.density >= 1.0 {
        return Ok((mask, history));
    }
    let mut masked = net.clone();
    for step in 1..=schedule.steps {
        apply_mask(&mut masked, &mask)?;
        let scores = match method {
            PruneMethod::Snip | PruneMethod::Force => snip_scores(&masked, batches)?,
            PruneMethod::Synflow => synflow_scores(&masked)?,
        };
        let all_zero = scores
            .layers
            .iter()
            .zip(&mask.layers)
            .all(|(s, m)| s.iter().zip(m).all(|(&v, &on)| !on || v == 0.0));
        if all_zero {
            return Err(Error::ZeroSaliency { step });
        }
        let keep = schedule.keep_at(step, total).min(mask.nnz());
        mask = top_k_mask(&scores, &mask, keep)?;
        log::debug!("{method:?} step {step}/{}: kept {keep} of {total}", schedule.steps);
        history.push(mask.clone());
    }
    Ok((mask, history))
}
