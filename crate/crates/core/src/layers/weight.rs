//! The matrix part of a layer, `W = alpha D + S` in its three guises.

use std::sync::Arc;

use crate::dct::{DctPlan, Scratch};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    /// Row-major `rows x cols` matrix; every entry is trainable.
    Dense(Vec<f64>),
    /// Trainable values on a fixed support.
    Sparse(SparseMatrix),
    /// `alpha` times the truncated DCT matrix plus a sparse correction.
    Dctps { alpha: f64, sparse: SparseMatrix },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Dense,
    Sparse,
    Dctps,
}

/// A `rows x cols` linear map with optional bias.
#[derive(Clone, Debug)]
pub struct WeightOp {
    rows: usize,
    cols: usize,
    weights: Weights,
    bias: Option<Vec<f64>>,
    alpha_trainable: bool,
    plan: Option<Arc<DctPlan>>,
}

/// Gradients for one weight operator. `values` is aligned with the stored
/// trainable values (all entries for dense, the support otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGrad {
    pub alpha: f64,
    pub values: Vec<f64>,
    pub bias: Vec<f64>,
    /// Gradient over the full `rows x cols` grid, when requested for a
    /// non-dense operator.
    pub dense: Option<Vec<f64>>,
}

/// Per-application multiply-add cost, split by source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ApplyCost {
    pub transform: u64,
    pub sparse: u64,
    pub dense: u64,
}

impl ApplyCost {
    pub fn total(&self) -> u64 {
        self.transform + self.sparse + self.dense
    }
}

impl WeightOp {
    pub fn new(rows: usize, cols: usize, weights: Weights, bias: Option<Vec<f64>>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!("weight shape {rows}x{cols}")));
        }
        match &weights {
            Weights::Dense(w) if w.len() != rows * cols => {
                return Err(Error::shape("weights", format!("{rows}x{cols} dense needs {} entries, got {}", rows * cols, w.len())))
            }
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } if (s.rows(), s.cols()) != (rows, cols) => {
                return Err(Error::shape("weights", format!("{rows}x{cols} layer, sparse part {}x{}", s.rows(), s.cols())))
            }
            _ => {}
        }
        if let Some(b) = &bias {
            if b.len() != rows {
                return Err(Error::shape("bias", format!("{rows} rows, bias length {}", b.len())));
            }
        }
        let plan = match weights {
            Weights::Dctps { .. } => Some(Arc::new(DctPlan::new(rows.max(cols))?)),
            _ => None,
        };
        Ok(WeightOp {
            rows,
            cols,
            weights,
            bias,
            alpha_trainable: true,
            plan,
        })
    }

    pub fn with_alpha_trainable(mut self, trainable: bool) -> Self {
        self.alpha_trainable = trainable;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn kind(&self) -> WeightKind {
        match self.weights {
            Weights::Dense(_) => WeightKind::Dense,
            Weights::Sparse(_) => WeightKind::Sparse,
            Weights::Dctps { .. } => WeightKind::Dctps,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.bias.as_mut()
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.weights {
            Weights::Dctps { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    pub fn alpha_trainable(&self) -> bool {
        self.alpha_trainable && matches!(self.weights, Weights::Dctps { .. })
    }

    pub fn set_alpha(&mut self, value: f64) -> Result<()> {
        match &mut self.weights {
            Weights::Dctps { alpha, .. } => {
                *alpha = value;
                Ok(())
            }
            _ => Err(Error::InvalidArgument("layer has no alpha".into())),
        }
    }

    pub fn sparse(&self) -> Option<&SparseMatrix> {
        match &self.weights {
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => Some(s),
            Weights::Dense(_) => None,
        }
    }

    pub fn sparse_mut(&mut self) -> Option<&mut SparseMatrix> {
        match &mut self.weights {
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => Some(s),
            Weights::Dense(_) => None,
        }
    }

    /// Trainable weight values (dense entries or support values).
    pub fn values(&self) -> &[f64] {
        match &self.weights {
            Weights::Dense(w) => w,
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => s.values(),
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match &mut self.weights {
            Weights::Dense(w) => w,
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => s.values_mut(),
        }
    }

    /// Number of stored trainable weights (excluding alpha and bias).
    pub fn nnz(&self) -> usize {
        self.values().len()
    }

    pub fn capacity(&self) -> usize {
        self.rows * self.cols
    }

    /// Trainable scalars: weights, plus alpha when trainable, plus bias.
    pub fn trainable_count(&self) -> usize {
        self.nnz() + usize::from(self.alpha_trainable()) + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// The prunable weights laid out over the full grid. The DCT offset is
    /// not a prunable weight and is excluded.
    pub fn grid_weights(&self) -> Vec<f64> {
        match &self.weights {
            Weights::Dense(w) => w.clone(),
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => s.to_dense().into_data(),
        }
    }

    /// Overwrites the prunable weights from a full grid. Sparse operators
    /// accept only grids that vanish off their support.
    pub fn set_grid_weights(&mut self, grid: &[f64]) -> Result<()> {
        if grid.len() != self.capacity() {
            return Err(Error::shape("set_grid_weights", format!("expected {}, got {}", self.capacity(), grid.len())));
        }
        let cols = self.cols;
        match &mut self.weights {
            Weights::Dense(w) => w.copy_from_slice(grid),
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => {
                let mut on_support = vec![false; grid.len()];
                for &(r, c) in s.support() {
                    on_support[r * cols + c] = true;
                }
                if let Some(i) = (0..grid.len()).find(|&i| !on_support[i] && grid[i] != 0.0) {
                    return Err(Error::SupportUpdate {
                        row: i / cols,
                        col: i % cols,
                        reason: "nonzero weight outside the fixed support".into(),
                    });
                }
                let support = s.support().to_vec();
                for (v, (r, c)) in s.values_mut().iter_mut().zip(support) {
                    *v = grid[r * cols + c];
                }
            }
        }
        Ok(())
    }

    /// Effective dense matrix `alpha D + S` (or the plain weights).
    pub fn effective_matrix(&self) -> Result<Vec<f64>> {
        let mut grid = self.grid_weights();
        if let Weights::Dctps { alpha, .. } = self.weights {
            let d = crate::dct::truncated_dct_matrix(self.rows, self.cols)?;
            for (g, dv) in grid.iter_mut().zip(d.data()) {
                *g += alpha * dv;
            }
        }
        Ok(grid)
    }

    pub fn apply_cost(&self) -> ApplyCost {
        match &self.weights {
            Weights::Dense(_) => ApplyCost {
                dense: self.capacity() as u64,
                ..Default::default()
            },
            Weights::Sparse(s) => ApplyCost {
                sparse: s.nnz() as u64,
                ..Default::default()
            },
            Weights::Dctps { sparse, .. } => ApplyCost {
                transform: self.plan().rect_cost(self.rows, self.cols),
                sparse: sparse.nnz() as u64,
                dense: 0,
            },
        }
    }

    pub fn plan(&self) -> &DctPlan {
        self.plan.as_ref().expect("dctps operator has a plan")
    }

    pub fn zero_grad(&self, dense: bool) -> WeightGrad {
        WeightGrad {
            alpha: 0.0,
            values: vec![0.0; self.nnz()],
            bias: vec![0.0; self.bias.as_ref().map_or(0, Vec::len)],
            dense: (dense && self.kind() != WeightKind::Dense).then(|| vec![0.0; self.capacity()]),
        }
    }

    /// `out = W x (+ bias)`. For DCTpS operators the untouched transform
    /// `D x` is written to `dct_out` (length `rows`) for the alpha gradient.
    pub(crate) fn apply(
        &self,
        x: &[f64],
        out: &mut [f64],
        dct_out: Option<&mut [f64]>,
        with_bias: bool,
        scratch: &mut Scratch,
        ops: &mut u64,
    ) {
        match &self.weights {
            Weights::Dense(w) => {
                for (o, row) in out.iter_mut().zip(w.chunks(self.cols)) {
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
                *ops += self.capacity() as u64;
            }
            Weights::Sparse(s) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                s.spmv_add_into(x, out, ops);
            }
            Weights::Dctps { alpha, sparse } => {
                self.plan().rect_apply_into(x, out, scratch, ops);
                if let Some(d) = dct_out {
                    d.copy_from_slice(out);
                }
                out.iter_mut().for_each(|o| *o *= alpha);
                sparse.spmv_add_into(x, out, ops);
            }
        }
        if with_bias {
            if let Some(b) = &self.bias {
                for (o, bv) in out.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
    }

    /// Adds `W^T v` to `dx`.
    pub(crate) fn apply_t_add(&self, v: &[f64], dx: &mut [f64], scratch: &mut Scratch, tmp: &mut Vec<f64>, ops: &mut u64) {
        match &self.weights {
            Weights::Dense(w) => {
                for (row, &vi) in w.chunks(self.cols).zip(v) {
                    if vi == 0.0 {
                        continue;
                    }
                    for (d, a) in dx.iter_mut().zip(row) {
                        *d += a * vi;
                    }
                }
                *ops += self.capacity() as u64;
            }
            Weights::Sparse(s) => s.spmv_t_add_into(v, dx, ops),
            Weights::Dctps { alpha, sparse } => {
                tmp.resize(self.cols, 0.0);
                self.plan().rect_apply_t_into(v, tmp, scratch, ops);
                for (d, t) in dx.iter_mut().zip(tmp.iter()) {
                    *d += alpha * t;
                }
                sparse.spmv_t_add_into(v, dx, ops);
            }
        }
    }

    /// Accumulates parameter gradients for one application with input `x`,
    /// cached transform `dct_x` and upstream gradient `v`.
    pub(crate) fn accumulate_grad(&self, x: &[f64], dct_x: &[f64], v: &[f64], grad: &mut WeightGrad, ops: &mut u64) {
        match &self.weights {
            Weights::Dense(_) => {
                outer_add(v, x, &mut grad.values);
                *ops += self.capacity() as u64;
            }
            Weights::Sparse(s) => s.grad_values_add_into(x, v, &mut grad.values, ops),
            Weights::Dctps { sparse, .. } => {
                if self.alpha_trainable {
                    grad.alpha += crate::tensor::dot(dct_x, v);
                    *ops += self.rows as u64;
                }
                sparse.grad_values_add_into(x, v, &mut grad.values, ops);
            }
        }
        if let Some(dense) = grad.dense.as_mut() {
            outer_add(v, x, dense);
            *ops += self.capacity() as u64;
        }
        for (b, vi) in grad.bias.iter_mut().zip(v) {
            *b += vi;
        }
    }
}

fn outer_add(v: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (row, &vi) in out.chunks_mut(cols).zip(v) {
        if vi == 0.0 {
            continue;
        }
        for (o, xj) in row.iter_mut().zip(x) {
            *o += vi * xj;
        }
    }
}

impl WeightGrad {
    /// Gradient over the full weight grid, if available.
    pub fn grid<'a>(&'a self, op: &WeightOp) -> Option<&'a [f64]> {
        match op.kind() {
            WeightKind::Dense => Some(&self.values),
            _ => self.dense.as_deref(),
        }
    }
}
