//! Fixed-support sparse matrices with trainable values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A sparse `rows x cols` matrix whose support is sorted row-major and free
/// of duplicates. `values[i]` belongs to `support[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    support: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        support: Vec<(usize, usize)>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "sparse matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if support.len() != values.len() {
            return Err(Error::shape(
                "sparse_matrix",
                format!("{} coordinates but {} values", support.len(), values.len()),
            ));
        }
        for (i, &(r, c)) in support.iter().enumerate() {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "coordinate ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if i > 0 && support[i - 1] >= (r, c) {
                return Err(Error::InvalidArgument(format!(
                    "support not strictly sorted at ({r}, {c})"
                )));
            }
        }
        Ok(SparseMatrix {
            rows,
            cols,
            support,
            values,
        })
    }

    /// Builds a matrix from unordered triplets; duplicates are rejected.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = triplets.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::InvalidArgument(format!(
                "duplicate coordinate ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let support = triplets.iter().map(|&(r, c, _)| (r, c)).collect();
        let values = triplets.iter().map(|&(_, _, v)| v).collect();
        Self::new(rows, cols, support, values)
    }

    /// A matrix with the given support and all values zero.
    pub fn zeros_on(rows: usize, cols: usize, support: Vec<(usize, usize)>) -> Result<Self> {
        let values = vec![0.0; support.len()];
        Self::new(rows, cols, support, values)
    }

    pub fn empty(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, Vec::new(), Vec::new())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    pub fn capacity(&self) -> usize {
        self.rows * self.cols
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.capacity() as f64
    }

    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Index of `(row, col)` in the support, if present.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        self.support.binary_search(&(row, col)).ok()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.position(row, col).map_or(0.0, |i| self.values[i])
    }

    pub fn to_dense(&self) -> Tensor {
        let mut dense = Tensor::zeros(&[self.rows, self.cols]);
        let data = dense.data_mut();
        for (&(r, c), &v) in self.support.iter().zip(&self.values) {
            data[r * self.cols + c] = v;
        }
        dense
    }

    /// `y = S x`.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut ops = 0;
        self.spmv_counted(x, &mut ops)
    }

    /// `spmv`, adding one multiply-add per stored entry to `ops`.
    pub fn spmv_counted(&self, x: &[f64], ops: &mut u64) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "spmv",
                format!("matrix {}x{}, input length {}", self.rows, self.cols, x.len()),
            ));
        }
        let mut out = vec![0.0; self.rows];
        self.spmv_add_into(x, &mut out, ops);
        Ok(out)
    }

    /// `x = S^T v`.
    pub fn spmv_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape(
                "spmv_t",
                format!("matrix {}x{}, input length {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        let mut ops = 0;
        self.spmv_t_add_into(v, &mut out, &mut ops);
        Ok(out)
    }

    /// Gradient of `<upstream, S x>` with respect to the stored values:
    /// the entry for `(i, j)` is `upstream[i] * x[j]`.
    pub fn grad_values(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols || upstream.len() != self.rows {
            return Err(Error::shape(
                "grad_values",
                format!(
                    "matrix {}x{}, input length {}, upstream length {}",
                    self.rows,
                    self.cols,
                    x.len(),
                    upstream.len()
                ),
            ));
        }
        let mut out = vec![0.0; self.nnz()];
        let mut ops = 0;
        self.grad_values_add_into(x, upstream, &mut out, &mut ops);
        Ok(out)
    }

    pub(crate) fn spmv_add_into(&self, x: &[f64], out: &mut [f64], ops: &mut u64) {
        for (&(r, c), &v) in self.support.iter().zip(&self.values) {
            out[r] += v * x[c];
        }
        *ops += self.nnz() as u64;
    }

    pub(crate) fn spmv_t_add_into(&self, v: &[f64], out: &mut [f64], ops: &mut u64) {
        for (&(r, c), &s) in self.support.iter().zip(&self.values) {
            out[c] += s * v[r];
        }
        *ops += self.nnz() as u64;
    }

    pub(crate) fn grad_values_add_into(&self, x: &[f64], upstream: &[f64], out: &mut [f64], ops: &mut u64) {
        for (o, &(r, c)) in out.iter_mut().zip(&self.support) {
            *o += upstream[r] * x[c];
        }
        *ops += self.nnz() as u64;
    }

    /// Replaces `drop` coordinates with `grow` coordinates. Grown entries start
    /// at zero and the remaining values keep their coordinates.
    pub fn support_update(&self, drop: &[(usize, usize)], grow: &[(usize, usize)]) -> Result<SparseMatrix> {
        if drop.len() != grow.len() {
            return Err(Error::InvalidArgument(format!(
                "drop set has {} coordinates, grow set {}",
                drop.len(),
                grow.len()
            )));
        }
        let mut keep = vec![true; self.nnz()];
        for &(r, c) in drop {
            match self.position(r, c) {
                Some(i) if keep[i] => keep[i] = false,
                Some(_) => {
                    return Err(Error::SupportUpdate {
                        row: r,
                        col: c,
                        reason: "dropped twice".into(),
                    })
                }
                None => {
                    return Err(Error::SupportUpdate {
                        row: r,
                        col: c,
                        reason: "not in the support".into(),
                    })
                }
            }
        }
        let mut grow_sorted = grow.to_vec();
        grow_sorted.sort_unstable();
        for (i, &(r, c)) in grow_sorted.iter().enumerate() {
            if r >= self.rows || c >= self.cols {
                return Err(Error::SupportUpdate {
                    row: r,
                    col: c,
                    reason: "outside the matrix".into(),
                });
            }
            if i > 0 && grow_sorted[i - 1] == (r, c) {
                return Err(Error::SupportUpdate {
                    row: r,
                    col: c,
                    reason: "grown twice".into(),
                });
            }
            if let Some(p) = self.position(r, c) {
                if keep[p] {
                    return Err(Error::SupportUpdate {
                        row: r,
                        col: c,
                        reason: "already active".into(),
                    });
                }
            }
        }
        let kept = self
            .support
            .iter()
            .zip(&self.values)
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|((&coord, &v), _)| (coord, v));
        let grown = grow_sorted.iter().map(|&coord| (coord, 0.0));
        let mut merged: Vec<((usize, usize), f64)> = kept.chain(grown).collect();
        merged.sort_by_key(|&(coord, _)| coord);
        let (support, values) = merged.into_iter().unzip();
        SparseMatrix::new(self.rows, self.cols, support, values)
    }

    /// Little-endian `(m: u32, n: u32, nnz: u32, nnz x (row: u32, col: u32, value: f64))`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&to_u32(self.rows)?.to_le_bytes())?;
        w.write_all(&to_u32(self.cols)?.to_le_bytes())?;
        w.write_all(&to_u32(self.nnz())?.to_le_bytes())?;
        for (&(r, c), &v) in self.support.iter().zip(&self.values) {
            w.write_all(&(r as u32).to_le_bytes())?;
            w.write_all(&(c as u32).to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let nnz = read_u32(r)? as usize;
        let mut support = Vec::with_capacity(nnz.min(1 << 20));
        let mut values = Vec::with_capacity(nnz.min(1 << 20));
        for _ in 0..nnz {
            let row = read_u32(r)? as usize;
            let col = read_u32(r)? as usize;
            support.push((row, col));
            values.push(read_f64(r)?);
        }
        SparseMatrix::new(rows, cols, support, values)
    }

    /// Encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        12 + 16 * self.nnz()
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn example() -> SparseMatrix {
        SparseMatrix::from_triplets(3, 3, vec![(2, 0, -1.0), (0, 1, 2.0)]).unwrap()
    }

    fn random_sparse(rng: &mut ChaCha8Rng, m: usize, n: usize, nnz: usize) -> SparseMatrix {
        let idx = rand::seq::index::sample(rng, m * n, nnz);
        let triplets = idx
            .iter()
            .map(|i| (i / n, i % n, rng.random_range(-1.0..1.0)))
            .collect();
        SparseMatrix::from_triplets(m, n, triplets).unwrap()
    }

    fn dense_matvec(d: &Tensor, x: &[f64]) -> Vec<f64> {
        let (m, n) = (d.shape()[0], d.shape()[1]);
        (0..m)
            .map(|i| (0..n).map(|j| d.data()[i * n + j] * x[j]).sum())
            .collect()
    }

    #[test]
    fn spmv_definition() {
        let s = example();
        assert_eq!(s.spmv(&[3.0, 4.0, 5.0]).unwrap(), vec![8.0, 0.0, -3.0]);
        let empty = SparseMatrix::empty(3, 3).unwrap();
        assert_eq!(empty.spmv(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert!(s.spmv(&[1.0]).is_err());
    }

    #[test]
    fn spmv_counts_one_op_per_entry() {
        let s = example();
        let mut ops = 0;
        s.spmv_counted(&[1.0, 1.0, 1.0], &mut ops).unwrap();
        assert_eq!(ops, 2);
    }

    #[test]
    fn spmv_t_definition() {
        let s = SparseMatrix::from_triplets(3, 2, vec![(0, 1, 2.0)]).unwrap();
        assert_eq!(s.spmv_t(&[3.0, 0.0, 0.0]).unwrap(), vec![0.0, 6.0]);
        assert!(s.spmv_t(&[1.0]).is_err());
    }

    #[test]
    fn dense_oracle_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sparse(&mut rng, 7, 5, 9);
        let d = s.to_dense();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(max_abs_diff(&s.spmv(&x).unwrap(), &dense_matvec(&d, &x)) <= 1e-12);
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dt = d.transpose().unwrap();
        assert!(max_abs_diff(&s.spmv_t(&v).unwrap(), &dense_matvec(&dt, &v)) <= 1e-12);
    }

    #[test]
    fn grad_values_cases() {
        let s = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 0.5)]).unwrap();
        assert_eq!(s.grad_values(&[3.0, 4.0], &[1.0, 0.0]).unwrap(), vec![4.0]);
        assert_eq!(s.grad_values(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), vec![0.0]);
        assert!(s.grad_values(&[3.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn grad_values_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sparse(&mut rng, 6, 4, 10);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = s.grad_values(&x, &u).unwrap();
        let loss = |vals: &[f64]| {
            let mut t = s.clone();
            t.values_mut().copy_from_slice(vals);
            crate::tensor::dot(&t.spmv(&x).unwrap(), &u)
        };
        let eps = 1e-6;
        let mut fd = vec![0.0; s.nnz()];
        for i in 0..s.nnz() {
            let mut p = s.values().to_vec();
            p[i] += eps;
            let lp = loss(&p);
            p[i] -= 2.0 * eps;
            fd[i] = (lp - loss(&p)) / (2.0 * eps);
        }
        assert!(crate::tensor::rel_error(&g, &fd) <= 1e-6);
    }

    #[test]
    fn rejects_bad_support() {
        assert!(SparseMatrix::new(2, 2, vec![(1, 0), (0, 1)], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::new(2, 2, vec![(2, 0)], vec![1.0]).is_err());
        assert!(SparseMatrix::from_triplets(2, 2, vec![(1, 1, 1.0), (1, 1, 2.0)]).is_err());
    }

    #[test]
    fn support_update_examples() {
        let s = example();
        assert_eq!(s.support_update(&[], &[]).unwrap(), s);
        let t = s.support_update(&[(0, 1)], &[(2, 2)]).unwrap();
        assert_eq!(t.support(), &[(2, 0), (2, 2)]);
        assert_eq!(t.get(2, 2), 0.0);
        assert_eq!(t.get(2, 0), -1.0);
        // Regrowing a just-dropped coordinate is allowed.
        let u = s.support_update(&[(0, 1)], &[(0, 1)]).unwrap();
        assert_eq!(u.get(0, 1), 0.0);
    }

    #[test]
    fn support_update_errors_name_coordinate() {
        let s = example();
        match s.support_update(&[(1, 1)], &[(2, 2)]) {
            Err(Error::SupportUpdate { row: 1, col: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match s.support_update(&[(0, 1)], &[(2, 0)]) {
            Err(Error::SupportUpdate { row: 2, col: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.support_update(&[(0, 1)], &[]).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let s = example();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), s.encoded_len());
        let back = SparseMatrix::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn random_updates_preserve_nnz_and_order(seed in 0u64..500, steps in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n) = (5, 6);
            let mut s = random_sparse(&mut rng, m, n, 11);
            let mut model: BTreeSet<(usize, usize)> = s.support().iter().copied().collect();
            for _ in 0..steps {
                let k = rng.random_range(0..=4usize);
                let active: Vec<_> = model.iter().copied().collect();
                let drop: Vec<_> = rand::seq::index::sample(&mut rng, active.len(), k)
                    .iter().map(|i| active[i]).collect();
                let after_drop: BTreeSet<_> = model.iter().copied().filter(|c| !drop.contains(c)).collect();
                let free: Vec<_> = (0..m * n).map(|i| (i / n, i % n))
                    .filter(|c| !after_drop.contains(c)).collect();
                let grow: Vec<_> = rand::seq::index::sample(&mut rng, free.len(), k)
                    .iter().map(|i| free[i]).collect();
                s = s.support_update(&drop, &grow).unwrap();
                model = after_drop.into_iter().chain(grow.iter().copied()).collect();
                prop_assert_eq!(s.nnz(), 11);
                prop_assert!(s.support().windows(2).all(|w| w[0] < w[1]));
                let actual: BTreeSet<_> = s.support().iter().copied().collect();
                prop_assert_eq!(&actual, &model);
            }
        }

        #[test]
        fn spmv_adjoint_identity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sparse(&mut rng, 6, 9, 13);
            let x: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = crate::tensor::dot(&s.spmv(&x).unwrap(), &v);
            let rhs = crate::tensor::dot(&x, &s.spmv_t(&v).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}
