//! Orthonormal DCT-II and its inverse.
//!
//! The transform is `y = C x` with
//! `C[k, j] = s_k cos(pi (2j + 1) k / 2q)`, `s_0 = sqrt(1/q)`, `s_k = sqrt(2/q)`.
//! `C` is orthogonal, so the inverse is `C^T` and the transform is an isometry.
//!
//! Power-of-two lengths use Lee's recursive factorisation, which costs
//! `(q/2) log2 q` multiplications plus `q` for the normalisation. Every other
//! length falls back to an exact product with the explicit matrix, computing
//! only the rows (or columns) a rectangular application actually needs.
//!
//! Rectangular application follows the truncated-matrix convention: the
//! `q x q` matrix with `q = max(m, n)` keeps its first `m` rows and first `n`
//! columns, so the low-frequency basis vectors survive. For `m > n` that is a
//! DCT of the zero-padded input; for `m < n` it is a truncated output.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Kernel {
    /// `tables[l]` holds `1 / (2 cos((i + 1/2) pi / 2^l))` for `i < 2^(l-1)`.
    Lee { tables: Vec<Vec<f64>> },
    /// Explicit row-major `q x q` matrix.
    Explicit { matrix: Vec<f64> },
}

/// Precomputed state for transforms of one length.
#[derive(Clone, Debug)]
pub struct DctPlan {
    q: usize,
    scale0: f64,
    scale: f64,
    kernel: Kernel,
}

impl DctPlan {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidArgument("DCT length must be positive".into()));
        }
        let kernel = if q.is_power_of_two() {
            let levels = q.trailing_zeros() as usize;
            let mut tables = vec![Vec::new(); levels + 1];
            for (l, table) in tables.iter_mut().enumerate().skip(1) {
                let len = 1usize << l;
                *table = (0..len / 2)
                    .map(|i| 1.0 / (2.0 * ((i as f64 + 0.5) * PI / len as f64).cos()))
                    .collect();
            }
            Kernel::Lee { tables }
        } else {
            Kernel::Explicit {
                matrix: dct_matrix_data(q),
            }
        };
        Ok(DctPlan {
            q,
            scale0: (1.0 / q as f64).sqrt(),
            scale: (2.0 / q as f64).sqrt(),
            kernel,
        })
    }

    pub fn len(&self) -> usize {
        self.q
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when the plan uses the `O(q log q)` factorisation.
    pub fn is_fast(&self) -> bool {
        matches!(self.kernel, Kernel::Lee { .. })
    }

    pub fn dct2(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut ops = 0;
        self.dct2_counted(x, &mut ops)
    }

    pub fn idct2(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut ops = 0;
        self.idct2_counted(y, &mut ops)
    }

    /// `dct2`, adding the multiply-adds performed to `ops`.
    pub fn dct2_counted(&self, x: &[f64], ops: &mut u64) -> Result<Vec<f64>> {
        self.check_len("dct2", x.len())?;
        self.rect_apply_counted(x, self.q, ops)
    }

    pub fn idct2_counted(&self, y: &[f64], ops: &mut u64) -> Result<Vec<f64>> {
        self.check_len("idct2", y.len())?;
        self.rect_apply_t_counted(y, self.q, ops)
    }

    /// Applies the `m x n` truncated DCT matrix to `x` (length `n`).
    pub fn rect_apply(&self, x: &[f64], m: usize) -> Result<Vec<f64>> {
        let mut ops = 0;
        self.rect_apply_counted(x, m, &mut ops)
    }

    /// Applies the transpose of the `m x n` truncated DCT matrix to `v` (length `m`).
    pub fn rect_apply_t(&self, v: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut ops = 0;
        self.rect_apply_t_counted(v, n, &mut ops)
    }

    pub fn rect_apply_counted(&self, x: &[f64], m: usize, ops: &mut u64) -> Result<Vec<f64>> {
        let n = x.len();
        self.check_rect("dct_rect_apply", m, n)?;
        let mut out = vec![0.0; m];
        let mut scratch = Scratch::default();
        self.rect_apply_into(x, &mut out, &mut scratch, ops);
        Ok(out)
    }

    pub fn rect_apply_t_counted(&self, v: &[f64], n: usize, ops: &mut u64) -> Result<Vec<f64>> {
        let m = v.len();
        self.check_rect("dct_rect_apply_t", m, n)?;
        let mut out = vec![0.0; n];
        let mut scratch = Scratch::default();
        self.rect_apply_t_into(v, &mut out, &mut scratch, ops);
        Ok(out)
    }

    /// Number of multiply-adds one `m x n` rectangular application costs.
    /// The adjoint costs the same.
    pub fn rect_cost(&self, m: usize, n: usize) -> u64 {
        match self.kernel {
            Kernel::Lee { .. } => {
                let q = self.q as u64;
                q / 2 * u64::from(self.q.trailing_zeros()) + q
            }
            Kernel::Explicit { .. } => (m * n) as u64,
        }
    }

    /// Unchecked rectangular application; `out.len()` is `m`, `x.len()` is `n`,
    /// and `max(m, n)` must equal the plan length.
    pub(crate) fn rect_apply_into(
        &self,
        x: &[f64],
        out: &mut [f64],
        scratch: &mut Scratch,
        ops: &mut u64,
    ) {
        let (m, n) = (out.len(), x.len());
        debug_assert_eq!(m.max(n), self.q);
        match &self.kernel {
            Kernel::Lee { tables } => {
                scratch.ensure(self.q);
                let Scratch { buf, tmp } = scratch;
                buf[..n].copy_from_slice(x);
                buf[n..self.q].iter_mut().for_each(|v| *v = 0.0);
                lee_forward(&mut buf[..self.q], &mut tmp[..self.q], tables, ops);
                out[0] = buf[0] * self.scale0;
                for k in 1..m {
                    out[k] = buf[k] * self.scale;
                }
                *ops += self.q as u64;
            }
            Kernel::Explicit { matrix } => {
                for (k, o) in out.iter_mut().enumerate() {
                    let row = &matrix[k * self.q..k * self.q + n];
                    *o = row.iter().zip(x).map(|(c, v)| c * v).sum();
                }
                *ops += (m * n) as u64;
            }
        }
    }

    pub(crate) fn rect_apply_t_into(
        &self,
        v: &[f64],
        out: &mut [f64],
        scratch: &mut Scratch,
        ops: &mut u64,
    ) {
        let (m, n) = (v.len(), out.len());
        debug_assert_eq!(m.max(n), self.q);
        match &self.kernel {
            Kernel::Lee { tables } => {
                scratch.ensure(self.q);
                let Scratch { buf, tmp } = scratch;
                buf[0] = v[0] * self.scale0;
                for k in 1..m {
                    buf[k] = v[k] * self.scale;
                }
                buf[m..self.q].iter_mut().for_each(|b| *b = 0.0);
                lee_inverse(&mut buf[..self.q], &mut tmp[..self.q], tables, ops);
                out.copy_from_slice(&buf[..n]);
                *ops += self.q as u64;
            }
            Kernel::Explicit { matrix } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (k, &vk) in v.iter().enumerate() {
                    let row = &matrix[k * self.q..k * self.q + n];
                    for (o, c) in out.iter_mut().zip(row) {
                        *o += c * vk;
                    }
                }
                *ops += (m * n) as u64;
            }
        }
    }

    fn check_len(&self, op: &str, len: usize) -> Result<()> {
        if len != self.q {
            return Err(Error::shape(op, format!("plan length {}, input length {len}", self.q)));
        }
        Ok(())
    }

    fn check_rect(&self, op: &str, m: usize, n: usize) -> Result<()> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("{op}: dimensions must be positive (m={m}, n={n})")));
        }
        if m.max(n) != self.q {
            return Err(Error::shape(
                op,
                format!("plan length {} but max(m={m}, n={n}) = {}", self.q, m.max(n)),
            ));
        }
        Ok(())
    }
}

/// Reusable work buffers for repeated transforms.
#[derive(Default, Debug, Clone)]
pub struct Scratch {
    buf: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn ensure(&mut self, q: usize) {
        if self.buf.len() < q {
            self.buf.resize(q, 0.0);
            self.tmp.resize(q, 0.0);
        }
    }
}

/// Unnormalised DCT-II, `X[k] = sum_j x[j] cos(pi (j + 1/2) k / len)`.
fn lee_forward(v: &mut [f64], tmp: &mut [f64], tables: &[Vec<f64>], ops: &mut u64) {
    let len = v.len();
    if len == 1 {
        return;
    }
    let half = len / 2;
    let coef = &tables[len.trailing_zeros() as usize];
    for i in 0..half {
        let x = v[i];
        let y = v[len - 1 - i];
        tmp[i] = x + y;
        tmp[i + half] = (x - y) * coef[i];
    }
    *ops += half as u64;
    {
        let (t0, t1) = tmp.split_at_mut(half);
        let (v0, v1) = v.split_at_mut(half);
        lee_forward(t0, v0, tables, ops);
        lee_forward(t1, v1, tables, ops);
    }
    for i in 0..half - 1 {
        v[2 * i] = tmp[i];
        v[2 * i + 1] = tmp[i + half] + tmp[i + half + 1];
    }
    v[len - 2] = tmp[half - 1];
    v[len - 1] = tmp[len - 1];
}

/// Transpose of `lee_forward`: `x[j] = X[0] + sum_{k>=1} X[k] cos(pi (j + 1/2) k / len)`.
fn lee_inverse(v: &mut [f64], tmp: &mut [f64], tables: &[Vec<f64>], ops: &mut u64) {
    let len = v.len();
    if len == 1 {
        return;
    }
    let half = len / 2;
    let coef = &tables[len.trailing_zeros() as usize];
    tmp[0] = v[0];
    tmp[half] = v[1];
    for i in 1..half {
        tmp[i] = v[2 * i];
        tmp[i + half] = v[2 * i - 1] + v[2 * i + 1];
    }
    {
        let (t0, t1) = tmp.split_at_mut(half);
        let (v0, v1) = v.split_at_mut(half);
        lee_inverse(t0, v0, tables, ops);
        lee_inverse(t1, v1, tables, ops);
    }
    for i in 0..half {
        let x = tmp[i];
        let y = tmp[i + half] * coef[i];
        v[i] = x + y;
        v[len - 1 - i] = x - y;
    }
    *ops += half as u64;
}

fn dct_matrix_data(q: usize) -> Vec<f64> {
    let s0 = (1.0 / q as f64).sqrt();
    let s = (2.0 / q as f64).sqrt();
    let mut data = vec![0.0; q * q];
    for k in 0..q {
        let sk = if k == 0 { s0 } else { s };
        for j in 0..q {
            data[k * q + j] =
                sk * (PI * (2 * j + 1) as f64 * k as f64 / (2 * q) as f64).cos();
        }
    }
    data
}

/// The explicit `q x q` orthonormal DCT-II matrix.
pub fn dct_matrix(q: usize) -> Result<Tensor> {
    if q == 0 {
        return Err(Error::InvalidArgument("DCT length must be positive".into()));
    }
    Tensor::new(vec![q, q], dct_matrix_data(q))
}

/// The `m x n` truncation of `dct_matrix(max(m, n))`.
pub fn truncated_dct_matrix(m: usize, n: usize) -> Result<Tensor> {
    let q = m.max(n);
    let full = dct_matrix(q)?;
    let data = (0..m)
        .flat_map(|k| full.data()[k * q..k * q + n].to_vec())
        .collect();
    Tensor::new(vec![m, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matvec(mat: &Tensor, x: &[f64]) -> Vec<f64> {
        let (m, n) = mat.as_matrix_dims("test").unwrap();
        (0..m)
            .map(|i| (0..n).map(|j| mat.data()[i * n + j] * x[j]).sum())
            .collect()
    }

    fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_input_maps_to_dc() {
        let plan = DctPlan::new(4).unwrap();
        let y = plan.dct2(&[1.0; 4]).unwrap();
        assert!(max_abs_diff(&y, &[2.0, 0.0, 0.0, 0.0]) < 1e-14);
        assert_eq!(plan.dct2(&[0.0; 4]).unwrap(), vec![0.0; 4]);
        let x = plan.idct2(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(max_abs_diff(&x, &[1.0; 4]) < 1e-14);
    }

    #[test]
    fn basis_vectors_match_matrix() {
        let plan = DctPlan::new(4).unwrap();
        let c = dct_matrix(4).unwrap();
        let col0 = plan.dct2(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected: Vec<f64> = (0..4).map(|k| c.data()[k * 4]).collect();
        assert!(max_abs_diff(&col0, &expected) < 1e-14);
        // Entries s_k cos(pi k / 8).
        for (k, v) in col0.iter().enumerate() {
            let s = if k == 0 { 0.5 } else { (0.5f64).sqrt() };
            assert!((v - s * (PI * k as f64 / 8.0).cos()).abs() < 1e-15);
        }
        let row1 = plan.idct2(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(max_abs_diff(&row1, &c.data()[4..8]) < 1e-14);
    }

    #[test]
    fn small_matrices() {
        assert_eq!(dct_matrix(1).unwrap().data(), &[1.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let m2 = dct_matrix(2).unwrap();
        assert!(max_abs_diff(m2.data(), &[h, h, h, -h]) < 1e-15);
        assert!(dct_matrix(0).is_err());
    }

    #[test]
    fn matrix_is_orthonormal() {
        let c = dct_matrix(16).unwrap();
        let ctc = c.transpose().unwrap().matmul(&c).unwrap();
        let mut eye = vec![0.0; 256];
        for i in 0..16 {
            eye[i * 17] = 1.0;
        }
        assert!(max_abs_diff(ctc.data(), &eye) <= 1e-12);
    }

    #[test]
    fn fast_and_fallback_match_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in (1..=64).chain([100, 128, 257]) {
            let plan = DctPlan::new(q).unwrap();
            let c = dct_matrix(q).unwrap();
            let x = random_vec(&mut rng, q);
            let fast = plan.dct2(&x).unwrap();
            assert!(max_abs_diff(&fast, &matvec(&c, &x)) <= 1e-10, "q={q}");
            let back = plan.idct2(&fast).unwrap();
            assert!(max_abs_diff(&back, &x) <= 1e-10, "q={q}");
        }
    }

    #[test]
    fn rectangular_cases() {
        let plan = DctPlan::new(4).unwrap();
        let y = plan.rect_apply(&[1.0; 4], 2).unwrap();
        assert!(max_abs_diff(&y, &[2.0, 0.0]) < 1e-14);
        assert_eq!(plan.rect_apply(&[0.0, 0.0], 4).unwrap(), vec![0.0; 4]);
        assert!(plan.rect_apply(&[1.0; 4], 0).is_err());
        assert!(plan.rect_apply(&[1.0; 3], 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_vec(&mut rng, 3);
        let plan5 = DctPlan::new(5).unwrap();
        let y = plan5.rect_apply(&x, 5).unwrap();
        let t = truncated_dct_matrix(5, 3).unwrap();
        assert!(max_abs_diff(&y, &matvec(&t, &x)) <= 1e-10);
    }

    #[test]
    fn rectangular_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, n) in &[(3, 8), (8, 3), (5, 5), (16, 7), (7, 16), (10, 25), (25, 10)] {
            let plan = DctPlan::new(m.max(n)).unwrap();
            let x = random_vec(&mut rng, n);
            let v = random_vec(&mut rng, m);
            let lhs: f64 = plan.rect_apply(&x, m).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = plan.rect_apply_t(&v, n).unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10, "({m},{n})");
        }
    }

    #[test]
    fn counted_cost_matches_formula() {
        for &(m, n) in &[(256, 256), (64, 256), (256, 3), (6, 25), (120, 64)] {
            let plan = DctPlan::new(m.max(n)).unwrap();
            let mut ops = 0;
            plan.rect_apply_counted(&vec![1.0; n], m, &mut ops).unwrap();
            assert_eq!(ops, plan.rect_cost(m, n), "({m},{n})");
            let mut ops_t = 0;
            plan.rect_apply_t_counted(&vec![1.0; m], n, &mut ops_t).unwrap();
            assert_eq!(ops_t, plan.rect_cost(m, n), "({m},{n}) adjoint");
        }
    }
}
