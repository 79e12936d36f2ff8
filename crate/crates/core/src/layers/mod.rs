//! Layers and feed-forward networks built from them.
//!
//! Every weight-bearing layer wraps a [`WeightOp`], which is dense, sparse, or
//! DCT-plus-sparse (`W = alpha D + S`). A convolution lowers each input to
//! patches, applies the operator to every patch, and lifts the results back
//! into a feature map. ReLU follows every weight layer except the last one;
//! the head is a softmax cross-entropy.

pub mod conv;
pub mod weight;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::alloc::{LayerShape, SupportPlan};
use crate::dct::Scratch;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tape::{log_sum_exp, softmax};

pub use conv::{lower_patches, ConvGeometry, Pool2d, PoolKind};
pub use weight::{ApplyCost, WeightGrad, WeightKind, WeightOp, Weights};

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(WeightKind::Dense),
            "sparse" => Ok(WeightKind::Sparse),
            "dctps" => Ok(WeightKind::Dctps),
            other => Err(Error::Config(format!("unknown weight kind `{other}`"))),
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightKind::Dense => "dense",
            WeightKind::Sparse => "sparse",
            WeightKind::Dctps => "dctps",
        })
    }
}

/// A fully connected layer `y = W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub op: WeightOp,
}

/// Gradients produced by a single-sample backward pass.
#[derive(Clone, Debug)]
pub struct LayerBackward {
    pub input: Vec<f64>,
    pub grad: WeightGrad,
}

impl Linear {
    pub fn new(op: WeightOp) -> Self {
        Linear { op }
    }

    pub fn in_len(&self) -> usize {
        self.op.cols()
    }

    pub fn out_len(&self) -> usize {
        self.op.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.out_len()];
        let mut dct = vec![0.0; self.out_len()];
        self.op.apply(x, &mut out, Some(&mut dct), true, &mut Scratch::default(), &mut 0);
        Ok(out)
    }

    /// Returns `dx = W^T v`, `dalpha = <D x, v>`, the support-value gradient and `dbias = v`.
    pub fn backward(&self, x: &[f64], v: &[f64]) -> Result<LayerBackward> {
        self.check_input(x)?;
        if v.len() != self.out_len() {
            return Err(Error::shape("linear_backward", format!("upstream length {}, expected {}", v.len(), self.out_len())));
        }
        let mut scratch = Scratch::default();
        let mut dct = vec![0.0; self.out_len()];
        let mut out = vec![0.0; self.out_len()];
        let mut ops = 0;
        self.op.apply(x, &mut out, Some(&mut dct), true, &mut scratch, &mut ops);
        let mut grad = self.op.zero_grad(false);
        self.op.accumulate_grad(x, &dct, v, &mut grad, &mut ops);
        let mut dx = vec![0.0; self.in_len()];
        self.op.apply_t_add(v, &mut dx, &mut scratch, &mut Vec::new(), &mut ops);
        Ok(LayerBackward { input: dx, grad })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_len() {
            return Err(Error::shape("linear", format!("input length {}, expected {}", x.len(), self.in_len())));
        }
        Ok(())
    }
}

/// A 2-D convolution whose flattened filter matrix is `op`
/// (`out_channels x k^2 in_channels`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub geom: ConvGeometry,
    pub op: WeightOp,
}

impl Conv2d {
    pub fn new(geom: ConvGeometry, op: WeightOp) -> Result<Self> {
        if op.cols() != geom.patch_len() {
            return Err(Error::shape(
                "conv2d",
                format!("filter matrix has {} columns, patches have {}", op.cols(), geom.patch_len()),
            ));
        }
        Ok(Conv2d { geom, op })
    }

    pub fn out_channels(&self) -> usize {
        self.op.rows()
    }

    pub fn in_len(&self) -> usize {
        self.geom.input_len()
    }

    pub fn out_len(&self) -> usize {
        self.out_channels() * self.geom.patches()
    }

    /// Maps a `c_in x h x w` image to a `c_out x h' x w'` feature map.
    pub fn forward(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let mut patches = vec![0.0; self.geom.patches() * self.geom.patch_len()];
        self.geom.lower_into(image, &mut patches);
        let mut out = vec![0.0; self.out_len()];
        let mut dct = vec![0.0; self.out_len()];
        self.apply_patches(&patches, &mut out, &mut dct, &mut Scratch::default(), &mut 0);
        Ok(out)
    }

    /// Exact adjoint of lower, multiply, lift.
    pub fn backward(&self, image: &[f64], upstream: &[f64]) -> Result<LayerBackward> {
        self.check_input(image)?;
        if upstream.len() != self.out_len() {
            return Err(Error::shape("conv_backward", format!("upstream length {}, expected {}", upstream.len(), self.out_len())));
        }
        let mut patches = vec![0.0; self.geom.patches() * self.geom.patch_len()];
        self.geom.lower_into(image, &mut patches);
        let mut out = vec![0.0; self.out_len()];
        let mut dct = vec![0.0; self.out_len()];
        let mut scratch = Scratch::default();
        let mut ops = 0;
        self.apply_patches(&patches, &mut out, &mut dct, &mut scratch, &mut ops);
        let mut grad = self.op.zero_grad(false);
        let mut dimage = vec![0.0; self.in_len()];
        self.backward_patches(&patches, &dct, upstream, &mut grad, Some(&mut dimage), &mut scratch, &mut ops);
        Ok(LayerBackward { input: dimage, grad })
    }

    fn check_input(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.in_len() {
            return Err(Error::shape("conv2d", format!("input length {}, expected {}", image.len(), self.in_len())));
        }
        Ok(())
    }

    /// `out` is channel-major (`c_out x patches`); `dct` is patch-major
    /// (`patches x c_out`).
    fn apply_patches(&self, patches: &[f64], out: &mut [f64], dct: &mut [f64], scratch: &mut Scratch, ops: &mut u64) {
        let (np, len, m) = (self.geom.patches(), self.geom.patch_len(), self.out_channels());
        let mut col = vec![0.0; m];
        for p in 0..np {
            self.op.apply(
                &patches[p * len..(p + 1) * len],
                &mut col,
                Some(&mut dct[p * m..(p + 1) * m]),
                true,
                scratch,
                ops,
            );
            for (c, &v) in col.iter().enumerate() {
                out[c * np + p] = v;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_patches(
        &self,
        patches: &[f64],
        dct: &[f64],
        upstream: &[f64],
        grad: &mut WeightGrad,
        dimage: Option<&mut [f64]>,
        scratch: &mut Scratch,
        ops: &mut u64,
    ) {
        let (np, len, m) = (self.geom.patches(), self.geom.patch_len(), self.out_channels());
        let mut v = vec![0.0; m];
        let mut tmp = Vec::new();
        let mut dpatches = dimage.as_ref().map(|_| vec![0.0; np * len]);
        for p in 0..np {
            for (c, vc) in v.iter_mut().enumerate() {
                *vc = upstream[c * np + p];
            }
            if v.iter().all(|&x| x == 0.0) {
                continue;
            }
            let patch = &patches[p * len..(p + 1) * len];
            self.op.accumulate_grad(patch, &dct[p * m..(p + 1) * m], &v, grad, ops);
            if let Some(dp) = dpatches.as_mut() {
                self.op.apply_t_add(&v, &mut dp[p * len..(p + 1) * len], scratch, &mut tmp, ops);
            }
        }
        if let (Some(dimage), Some(dp)) = (dimage, dpatches) {
            self.geom.lift_add(&dp, dimage);
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    Pool(Pool2d),
}

impl Layer {
    pub fn weight_op(&self) -> Option<&WeightOp> {
        match self {
            Layer::Linear(l) => Some(&l.op),
            Layer::Conv(c) => Some(&c.op),
            Layer::Pool(_) => None,
        }
    }

    pub fn weight_op_mut(&mut self) -> Option<&mut WeightOp> {
        match self {
            Layer::Linear(l) => Some(&mut l.op),
            Layer::Conv(c) => Some(&mut c.op),
            Layer::Pool(_) => None,
        }
    }

    pub fn in_len(&self) -> usize {
        match self {
            Layer::Linear(l) => l.in_len(),
            Layer::Conv(c) => c.in_len(),
            Layer::Pool(p) => p.input_len(),
        }
    }

    pub fn out_len(&self) -> usize {
        match self {
            Layer::Linear(l) => l.out_len(),
            Layer::Conv(c) => c.out_len(),
            Layer::Pool(p) => p.output_len(),
        }
    }

    /// Operator applications per sample (1 for linear, #patches for conv).
    pub fn applications(&self) -> usize {
        match self {
            Layer::Linear(_) => 1,
            Layer::Conv(c) => c.geom.patches(),
            Layer::Pool(_) => 0,
        }
    }

    pub fn shape(&self) -> Option<LayerShape> {
        match self {
            Layer::Linear(l) => Some(LayerShape::linear(l.out_len(), l.in_len())),
            Layer::Conv(c) => Some(LayerShape::conv(c.out_channels(), c.geom.in_channels, c.geom.kernel)),
            Layer::Pool(_) => None,
        }
    }
}

/// Layer descriptor in a [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear {
        out: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Pool(PoolKind),
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// `fc:<out>`, `conv:<out>:<kernel>[:<stride>[:<padding>]]`, `maxpool`, `avgpool`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize, default: Option<usize>| -> Result<usize> {
            match parts.get(i) {
                Some(p) => p
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number `{p}` in layer `{s}`"))),
                None => default.ok_or_else(|| Error::Config(format!("layer `{s}` is missing a field"))),
            }
        };
        match parts[0] {
            "fc" | "linear" if parts.len() == 2 => Ok(LayerSpec::Linear { out: num(1, None)? }),
            "conv" if (3..=5).contains(&parts.len()) => Ok(LayerSpec::Conv {
                out_channels: num(1, None)?,
                kernel: num(2, None)?,
                stride: num(3, Some(1))?,
                padding: num(4, Some(0))?,
            }),
            "maxpool" if parts.len() == 1 => Ok(LayerSpec::Pool(PoolKind::Max)),
            "avgpool" if parts.len() == 1 => Ok(LayerSpec::Pool(PoolKind::Avg)),
            _ => Err(Error::Config(format!("cannot parse layer `{s}`"))),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Linear { out } => write!(f, "fc:{out}"),
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv:{out_channels}:{kernel}:{stride}:{padding}"),
            LayerSpec::Pool(PoolKind::Max) => f.write_str("maxpool"),
            LayerSpec::Pool(PoolKind::Avg) => f.write_str("avgpool"),
        }
    }
}

/// Architecture plus parameterisation of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `[n]` for vector inputs or `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub weight_kind: WeightKind,
    /// One value for every weight layer, or a single value for all.
    pub alpha_init: Vec<f64>,
    pub alpha_trainable: bool,
    pub bias: bool,
    /// ReLU after every hidden weight layer; `false` gives a linear network.
    pub relu: bool,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, weight_kind: WeightKind) -> Self {
        NetworkSpec {
            input_shape,
            layers,
            weight_kind,
            alpha_init: vec![1.0],
            alpha_trainable: true,
            bias: true,
            relu: true,
        }
    }

    /// Fully connected stack `sizes[0] -> sizes[1] -> ...`.
    pub fn mlp(sizes: &[usize], weight_kind: WeightKind) -> Self {
        let layers = sizes[1..].iter().map(|&out| LayerSpec::Linear { out }).collect();
        Self::new(vec![sizes[0]], layers, weight_kind)
    }

    /// LeNet-5 layout: two 5x5 conv + 2x2 max-pool stages, then 120-84-classes.
    /// Convolutions use padding 2 so the stack fits small images.
    pub fn lenet5(input_shape: [usize; 3], classes: usize, weight_kind: WeightKind) -> Self {
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: 5,
            stride: 1,
            padding: 2,
        };
        Self::new(
            input_shape.to_vec(),
            vec![
                conv(6),
                LayerSpec::Pool(PoolKind::Max),
                conv(16),
                LayerSpec::Pool(PoolKind::Max),
                LayerSpec::Linear { out: 120 },
                LayerSpec::Linear { out: 84 },
                LayerSpec::Linear { out: classes },
            ],
            weight_kind,
        )
    }

    pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
        text.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
    }

    fn alpha_for(&self, weight_index: usize) -> Result<f64> {
        match self.alpha_init.as_slice() {
            [a] => Ok(*a),
            list => list.get(weight_index).copied().ok_or_else(|| {
                Error::Config(format!("alpha_init has {} entries, need one per weight layer", list.len()))
            }),
        }
    }

    /// Weight-matrix shapes of the prunable layers, in order.
    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        Ok(self.geometry()?.into_iter().filter_map(|g| g.shape).collect())
    }

    /// Prunable weight count `N`.
    pub fn prunable_count(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.iter().map(LayerShape::capacity).sum())
    }

    /// Biases, plus one alpha per DCTpS layer when alpha is trainable.
    pub fn non_prunable_count(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let biases: usize = if self.bias { shapes.iter().map(|s| s.rows).sum() } else { 0 };
        let alphas = if self.weight_kind == WeightKind::Dctps && self.alpha_trainable {
            shapes.len()
        } else {
            0
        };
        Ok(biases + alphas)
    }

    fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid input shape {shape:?}")));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let flat: usize = shape.iter().product();
            let g = match spec {
                LayerSpec::Linear { out: m } => {
                    let g = LayerGeometry {
                        shape: Some(LayerShape::linear(*m, flat)),
                        conv: None,
                        pool: None,
                    };
                    shape = vec![*m];
                    g
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = image_dims(&shape)?;
                    let geom = ConvGeometry::new(c, h, w, *kernel, *stride, *padding)?;
                    shape = vec![*out_channels, geom.out_h(), geom.out_w()];
                    LayerGeometry {
                        shape: Some(LayerShape::conv(*out_channels, c, *kernel)),
                        conv: Some(geom),
                        pool: None,
                    }
                }
                LayerSpec::Pool(kind) => {
                    let [c, h, w] = image_dims(&shape)?;
                    let pool = Pool2d::new(*kind, c, h, w)?;
                    shape = vec![c, pool.out_h(), pool.out_w()];
                    LayerGeometry {
                        shape: None,
                        conv: None,
                        pool: Some(pool),
                    }
                }
            };
            out.push(g);
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Linear { .. })) {
            return Err(Error::Config("the last layer must be fully connected".into()));
        }
        Ok(out)
    }
}

fn image_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::Config(format!("spatial layer needs a c x h x w input, got {other:?}"))),
    }
}

struct LayerGeometry {
    shape: Option<LayerShape>,
    conv: Option<ConvGeometry>,
    pool: Option<Pool2d>,
}

/// Builds a network. DCTpS layers get `S = 0` and the configured alpha;
/// sparse layers get fan-in scaled normal values (variance `2 / fan_in`) on
/// their support; dense layers get the same distribution everywhere; biases
/// start at zero. `plan` supplies supports and is required unless the network
/// is dense.
pub fn build_network(spec: &NetworkSpec, plan: Option<&SupportPlan>, seed: u64) -> Result<Network> {
    let geometry = spec.geometry()?;
    let shapes: Vec<LayerShape> = geometry.iter().filter_map(|g| g.shape).collect();
    if spec.alpha_init.len() != 1 && spec.alpha_init.len() != shapes.len() {
        return Err(Error::Config(format!(
            "alpha_init has {} entries for {} weight layers",
            spec.alpha_init.len(),
            shapes.len()
        )));
    }
    let supports = match (spec.weight_kind, plan) {
        (WeightKind::Dense, _) => None,
        (_, Some(plan)) => {
            if plan.layers != shapes {
                return Err(Error::Config(format!(
                    "support plan shapes {:?} do not match network shapes {shapes:?}",
                    plan.layers
                )));
            }
            Some(crate::alloc::allocate_support(plan)?)
        }
        (kind, None) => return Err(Error::Config(format!("{kind} network needs a support plan"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(geometry.len());
    let mut weight_index = 0;
    for g in geometry {
        if let Some(pool) = g.pool {
            layers.push(Layer::Pool(pool));
            continue;
        }
        let shape = g.shape.expect("weight layer has a shape");
        let (rows, cols) = (shape.rows, shape.cols);
        let std = (2.0 / cols as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = match spec.weight_kind {
            WeightKind::Dense => Weights::Dense((0..rows * cols).map(|_| normal.sample(&mut rng)).collect()),
            WeightKind::Sparse => {
                let mut s = supports.as_ref().expect("supports allocated")[weight_index].clone();
                s.values_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                Weights::Sparse(s)
            }
            WeightKind::Dctps => Weights::Dctps {
                alpha: spec.alpha_for(weight_index)?,
                sparse: supports.as_ref().expect("supports allocated")[weight_index].clone(),
            },
        };
        let bias = spec.bias.then(|| vec![0.0; rows]);
        let op = WeightOp::new(rows, cols, weights, bias)?.with_alpha_trainable(spec.alpha_trainable);
        layers.push(match g.conv {
            Some(geom) => Layer::Conv(Conv2d::new(geom, op)?),
            None => Layer::Linear(Linear::new(op)),
        });
        weight_index += 1;
    }
    let net = Network::new(spec.input_shape.clone(), layers)?;
    Ok(if spec.relu { net } else { net.without_activations() })
}

/// A labelled batch with sample-major inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Options for [`Network::backward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Also materialise full-grid weight gradients for sparse/DCTpS layers.
    pub dense_grads: bool,
    /// Also return the gradient with respect to the network input.
    pub input_grad: bool,
}

/// Gradients of a scalar objective with respect to every layer.
#[derive(Clone, Debug)]
pub struct NetworkGrads {
    /// One entry per layer; `None` for pooling layers.
    pub layers: Vec<Option<WeightGrad>>,
    pub input: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    /// Layer inputs (lowered patches for convolutions), batch-major.
    input: Vec<f64>,
    /// Untouched transform outputs of DCTpS layers.
    dct: Vec<f64>,
    /// ReLU pass-through mask of the layer output.
    relu_mask: Vec<bool>,
    argmax: Vec<usize>,
}

/// Cached intermediates of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    layers: Vec<LayerCache>,
}

/// Output and training statistics for one batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: NetworkGrads,
}

#[derive(Clone, Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    relu_after: Vec<bool>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut expected: usize = input_shape.iter().product();
        for (i, l) in layers.iter().enumerate() {
            if l.in_len() != expected {
                return Err(Error::shape("network", format!("layer {i} takes {} inputs, previous layer gives {expected}", l.in_len())));
            }
            expected = l.out_len();
        }
        let last_weight = layers.iter().rposition(|l| l.weight_op().is_some());
        let relu_after = layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.weight_op().is_some() && Some(i) != last_weight)
            .collect();
        Ok(Network {
            input_shape,
            layers,
            relu_after,
        })
    }

    /// Removes the hidden ReLUs, leaving a composition of affine maps.
    pub fn without_activations(mut self) -> Self {
        self.relu_after.iter_mut().for_each(|r| *r = false);
        self
    }

    pub fn has_activations(&self) -> bool {
        self.relu_after.iter().any(|&r| r)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_len)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Weight operators of the prunable layers, in order.
    pub fn weight_ops(&self) -> Vec<&WeightOp> {
        self.layers.iter().filter_map(Layer::weight_op).collect()
    }

    pub fn weight_ops_mut(&mut self) -> Vec<&mut WeightOp> {
        self.layers.iter_mut().filter_map(Layer::weight_op_mut).collect()
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().filter_map(Layer::shape).collect()
    }

    pub fn prunable_count(&self) -> usize {
        self.weight_ops().iter().map(|op| op.capacity()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.weight_ops().iter().map(|op| op.trainable_count()).sum()
    }

    /// Logits for a batch laid out sample-major.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, batch, &mut 0)?.0)
    }

    pub fn forward_cached(&self, x: &[f64], batch: usize, ops: &mut u64) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != batch * self.input_len() {
            return Err(Error::shape(
                "network_forward",
                format!("batch {batch} of {:?} needs {} values, got {}", self.input_shape, batch * self.input_len(), x.len()),
            ));
        }
        let mut scratch = Scratch::default();
        let mut act = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, &relu) in self.layers.iter().zip(&self.relu_after) {
            let (in_len, out_len) = (layer.in_len(), layer.out_len());
            let mut out = vec![0.0; batch * out_len];
            let mut cache = LayerCache::default();
            match layer {
                Layer::Linear(l) => {
                    let dctps = l.op.kind() == WeightKind::Dctps;
                    if dctps {
                        cache.dct = vec![0.0; batch * out_len];
                    }
                    for b in 0..batch {
                        let dct = dctps.then(|| &mut cache.dct[b * out_len..(b + 1) * out_len]);
                        l.op.apply(&act[b * in_len..(b + 1) * in_len], &mut out[b * out_len..(b + 1) * out_len], dct, true, &mut scratch, ops);
                    }
                    cache.input = act;
                }
                Layer::Conv(c) => {
                    let plen = c.geom.patches() * c.geom.patch_len();
                    let mut patches = vec![0.0; batch * plen];
                    cache.dct = vec![0.0; batch * out_len];
                    for b in 0..batch {
                        let p = &mut patches[b * plen..(b + 1) * plen];
                        c.geom.lower_into(&act[b * in_len..(b + 1) * in_len], p);
                        c.apply_patches(p, &mut out[b * out_len..(b + 1) * out_len], &mut cache.dct[b * out_len..(b + 1) * out_len], &mut scratch, ops);
                    }
                    cache.input = patches;
                }
                Layer::Pool(p) => {
                    cache.argmax = vec![0; batch * out_len];
                    for b in 0..batch {
                        p.forward(
                            &act[b * in_len..(b + 1) * in_len],
                            &mut out[b * out_len..(b + 1) * out_len],
                            &mut cache.argmax[b * out_len..(b + 1) * out_len],
                        );
                    }
                }
            }
            if relu {
                cache.relu_mask = out.iter().map(|&v| v > 0.0).collect();
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            caches.push(cache);
            act = out;
        }
        Ok((act, ForwardCache { batch, layers: caches }))
    }

    /// Back-propagates `upstream` (gradient of the objective with respect to
    /// the outputs, batch-major) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], opts: BackwardOptions, ops: &mut u64) -> Result<NetworkGrads> {
        let batch = cache.batch;
        if upstream.len() != batch * self.output_len() {
            return Err(Error::shape("network_backward", format!("upstream length {}, expected {}", upstream.len(), batch * self.output_len())));
        }
        let mut scratch = Scratch::default();
        let mut tmp = Vec::new();
        let mut grads: Vec<Option<WeightGrad>> = vec![None; self.layers.len()];
        let mut g = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[i];
            if self.relu_after[i] {
                for (gv, &pass) in g.iter_mut().zip(&lc.relu_mask) {
                    if !pass {
                        *gv = 0.0;
                    }
                }
            }
            let need_dx = i > 0 || opts.input_grad;
            let (in_len, out_len) = (layer.in_len(), layer.out_len());
            let mut dx = if need_dx { vec![0.0; batch * in_len] } else { Vec::new() };
            match layer {
                Layer::Linear(l) => {
                    let mut wg = l.op.zero_grad(opts.dense_grads);
                    let dctps = l.op.kind() == WeightKind::Dctps;
                    for b in 0..batch {
                        let v = &g[b * out_len..(b + 1) * out_len];
                        if v.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        let x = &lc.input[b * in_len..(b + 1) * in_len];
                        let dct: &[f64] = if dctps { &lc.dct[b * out_len..(b + 1) * out_len] } else { &[] };
                        l.op.accumulate_grad(x, dct, v, &mut wg, ops);
                        if need_dx {
                            l.op.apply_t_add(v, &mut dx[b * in_len..(b + 1) * in_len], &mut scratch, &mut tmp, ops);
                        }
                    }
                    grads[i] = Some(wg);
                }
                Layer::Conv(c) => {
                    let mut wg = c.op.zero_grad(opts.dense_grads);
                    let plen = c.geom.patches() * c.geom.patch_len();
                    for b in 0..batch {
                        let dimage = need_dx.then(|| &mut dx[b * in_len..(b + 1) * in_len]);
                        c.backward_patches(
                            &lc.input[b * plen..(b + 1) * plen],
                            &lc.dct[b * out_len..(b + 1) * out_len],
                            &g[b * out_len..(b + 1) * out_len],
                            &mut wg,
                            dimage,
                            &mut scratch,
                            ops,
                        );
                    }
                    grads[i] = Some(wg);
                }
                Layer::Pool(p) => {
                    if need_dx {
                        for b in 0..batch {
                            p.backward_add(
                                &g[b * out_len..(b + 1) * out_len],
                                &lc.argmax[b * out_len..(b + 1) * out_len],
                                &mut dx[b * in_len..(b + 1) * in_len],
                            );
                        }
                    }
                }
            }
            g = dx;
        }
        Ok(NetworkGrads {
            layers: grads,
            input: opts.input_grad.then_some(g),
        })
    }

    /// Mean softmax cross-entropy over a batch, with gradients.
    pub fn loss_and_grad(&self, x: &[f64], labels: &[usize], opts: BackwardOptions, ops: &mut u64) -> Result<BatchResult> {
        let batch = labels.len();
        let (logits, cache) = self.forward_cached(x, batch, ops)?;
        let classes = self.output_len();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut upstream = vec![0.0; logits.len()];
        for (b, (row, &label)) in logits.chunks(classes).zip(labels).enumerate() {
            if label >= classes {
                return Err(Error::shape("loss", format!("label {label} with {classes} classes")));
            }
            loss += log_sum_exp(row) - row[label];
            if argmax(row) == label {
                correct += 1;
            }
            let p = softmax(row);
            for (c, pc) in p.into_iter().enumerate() {
                upstream[b * classes + c] = (pc - f64::from(u8::from(c == label))) / batch as f64;
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = self.backward(&cache, &upstream, opts, ops)?;
        Ok(BatchResult { loss, correct, grads })
    }

    /// Mean cross-entropy loss only.
    pub fn loss(&self, x: &[f64], labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x, labels.len())?;
        let classes = self.output_len();
        let total: f64 = logits
            .chunks(classes)
            .zip(labels)
            .map(|(row, &l)| log_sum_exp(row) - row[l])
            .sum();
        Ok(total / labels.len() as f64)
    }

    /// Jacobian-vector product of the logits at a single input `x`, using the
    /// activation pattern at `x`.
    pub fn jvp(&self, x: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
        if tangent.len() != self.input_len() {
            return Err(Error::shape("jvp", format!("tangent length {}, expected {}", tangent.len(), self.input_len())));
        }
        let (_, cache) = self.forward_cached(x, 1, &mut 0)?;
        let mut scratch = Scratch::default();
        let mut t = tangent.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let lc = &cache.layers[i];
            let mut out = vec![0.0; layer.out_len()];
            match layer {
                Layer::Linear(l) => l.op.apply(&t, &mut out, None, false, &mut scratch, &mut 0),
                Layer::Conv(c) => {
                    let (np, len, m) = (c.geom.patches(), c.geom.patch_len(), c.out_channels());
                    let mut patches = vec![0.0; np * len];
                    c.geom.lower_into(&t, &mut patches);
                    let mut col = vec![0.0; m];
                    for p in 0..np {
                        c.op.apply(&patches[p * len..(p + 1) * len], &mut col, None, false, &mut scratch, &mut 0);
                        for (ch, &v) in col.iter().enumerate() {
                            out[ch * np + p] = v;
                        }
                    }
                }
                Layer::Pool(p) => match p.kind {
                    PoolKind::Max => {
                        for (o, &src) in out.iter_mut().zip(&lc.argmax) {
                            *o = t[src];
                        }
                    }
                    PoolKind::Avg => p.forward(&t, &mut out, &mut vec![0; p.output_len()]),
                },
            }
            if self.relu_after[i] {
                for (o, &pass) in out.iter_mut().zip(&lc.relu_mask) {
                    if !pass {
                        *o = 0.0;
                    }
                }
            }
            t = out;
        }
        Ok(t)
    }

    /// Vector-Jacobian product `u^T J` at a single input `x`.
    pub fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_cached(x, 1, &mut 0)?;
        let grads = self.backward(
            &cache,
            cotangent,
            BackwardOptions {
                dense_grads: false,
                input_grad: true,
            },
            &mut 0,
        )?;
        Ok(grads.input.expect("input gradient requested"))
    }

    /// Largest logit index per sample.
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<usize>> {
        let logits = self.forward(x, batch)?;
        Ok(logits.chunks(self.output_len()).map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws fan-in scaled normal values on a fixed support.
pub fn init_sparse_values(s: &mut SparseMatrix, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, (2.0 / s.cols() as f64).sqrt()).expect("finite std");
    s.values_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
}
