//! Dynamic sparse training: periodic drop-and-grow of a fixed-size support.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiglConfig {
    /// Iterations between support updates.
    pub delta_t: usize,
    /// Initial drop fraction.
    pub alpha: f64,
    /// Fraction of training after which the support is frozen.
    pub t_end_frac: f64,
}

impl Default for RiglConfig {
    fn default() -> Self {
        RiglConfig {
            delta_t: 100,
            alpha: 0.3,
            t_end_frac: 0.75,
        }
    }
}

impl RiglConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 {
            return Err(Error::Config("rigl.delta_t must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("rigl.alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.t_end_frac > 0.0 && self.t_end_frac <= 1.0) {
            return Err(Error::Config(format!("rigl.t_end_frac must be in (0, 1], got {}", self.t_end_frac)));
        }
        Ok(())
    }

    pub fn t_end(&self, total_iterations: usize) -> usize {
        (self.t_end_frac * total_iterations as f64).floor() as usize
    }

    /// Whether the support is updated after optimizer step `t` (counted from 1).
    pub fn is_update(&self, t: usize, total_iterations: usize) -> bool {
        t > 0 && t % self.delta_t == 0 && t <= self.t_end(total_iterations)
    }

    pub fn drop_fraction(&self, t: usize, total_iterations: usize) -> f64 {
        cosine_drop_fraction(t, self.t_end(total_iterations), self.alpha)
    }
}

/// `(alpha / 2) (1 + cos(pi t / t_end))` up to `t_end`, zero afterwards.
pub fn cosine_drop_fraction(t: usize, t_end: usize, alpha: f64) -> f64 {
    if t > t_end || t_end == 0 {
        return 0.0;
    }
    0.5 * alpha * (1.0 + (std::f64::consts::PI * t as f64 / t_end as f64).cos())
}

/// Result of one drop-and-grow step.
#[derive(Clone, Debug, PartialEq)]
pub struct RiglUpdate {
    pub matrix: SparseMatrix,
    pub dropped: Vec<(usize, usize)>,
    pub grown: Vec<(usize, usize)>,
}

/// Drops the `floor(f nnz)` smallest-magnitude active entries and grows the
/// same number of previously inactive coordinates with the largest
/// `|dense_grad|`, starting at zero. Ties go to the lower coordinate.
pub fn rigl_step(s: &SparseMatrix, dense_grad: &[f64], fraction: f64) -> Result<RiglUpdate> {
    let (rows, cols) = (s.rows(), s.cols());
    if dense_grad.len() != rows * cols {
        return Err(Error::shape("rigl_step", format!("{rows}x{cols} layer, gradient of length {}", dense_grad.len())));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("drop fraction must be in [0, 1), got {fraction}")));
    }
    if dense_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("regrowth gradient".into()));
    }
    let mut k = (fraction * s.nnz() as f64).floor() as usize;
    let inactive_count = rows * cols - s.nnz();
    if k > inactive_count {
        log::warn!("rigl: only {inactive_count} inactive coordinates, dropping {inactive_count} instead of {k}");
        k = inactive_count;
    }
    if k == 0 {
        return Ok(RiglUpdate {
            matrix: s.clone(),
            dropped: Vec::new(),
            grown: Vec::new(),
        });
    }

    let mut active: Vec<(f64, (usize, usize))> = s.support().iter().zip(s.values()).map(|(&rc, v)| (v.abs(), rc)).collect();
    active.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut dropped: Vec<(usize, usize)> = active[..k].iter().map(|a| a.1).collect();

    let mut is_active = vec![false; rows * cols];
    for &(r, c) in s.support() {
        is_active[r * cols + c] = true;
    }
    let mut inactive: Vec<(f64, usize)> = (0..rows * cols)
        .filter(|&i| !is_active[i])
        .map(|i| (dense_grad[i].abs(), i))
        .collect();
    inactive.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut grown: Vec<(usize, usize)> = inactive[..k].iter().map(|&(_, i)| (i / cols, i % cols)).collect();

    dropped.sort_unstable();
    grown.sort_unstable();
    let matrix = s.support_update(&dropped, &grown)?;
    Ok(RiglUpdate { matrix, dropped, grown })
}

/// Carries per-coordinate state (e.g. optimizer moments) from `old`'s
/// support to `new`'s: surviving coordinates keep theirs, new ones get 0.
pub fn remap_state(old: &SparseMatrix, new: &SparseMatrix, state: &[f64]) -> Vec<f64> {
    new.support()
        .iter()
        .map(|&(r, c)| old.position(r, c).map_or(0.0, |i| state[i]))
        .collect()
}
