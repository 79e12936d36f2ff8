//! Singular values of a network's input-output Jacobian at a probe input.
//!
//! The Jacobian is evaluated at the activation pattern of the probe. Small
//! Jacobians are assembled row by row from vector-Jacobian products and
//! decomposed exactly; large ones fall back to a block subspace iteration
//! on `J^T J` driven by Jacobian-vector and vector-Jacobian products.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::Network;

/// Jacobians with more entries than this use the matrix-free route.
pub const ASSEMBLY_LIMIT: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumResult {
    /// Descending, nonnegative.
    pub values: Vec<f64>,
    pub probe: String,
    pub label: String,
}

impl SpectrumResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# probe={}\n# label={}\n# count={}\nrank,singular_value\n", self.probe, self.label, self.values.len());
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{v:.12e}\n", i + 1));
        }
        out
    }
}

/// Seeded standard-normal probe input.
pub fn probe_input(net: &Network, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..net.input_len()).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `J[i][j] = d out_i / d x_j`, assembled from one VJP per output.
pub fn jacobian(net: &Network, x: &[f64]) -> Result<DMatrix<f64>> {
    let (outputs, inputs) = (net.output_len(), net.input_len());
    check_output(net, x)?;
    let mut j = DMatrix::zeros(outputs, inputs);
    let mut e = vec![0.0; outputs];
    for i in 0..outputs {
        e[i] = 1.0;
        let row = net.vjp(x, &e)?;
        e[i] = 0.0;
        for (c, v) in row.into_iter().enumerate() {
            j[(i, c)] = v;
        }
    }
    Ok(j)
}

fn check_output(net: &Network, x: &[f64]) -> Result<()> {
    let y = net.forward(x, 1)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output at the probe input".into()));
    }
    Ok(())
}

/// Descending singular values of a dense matrix, first `k` kept.
pub fn singular_values(m: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().map(|v| v.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.truncate(k);
    s
}

/// Top-`k` singular values of the Jacobian at `x`.
pub fn jacobian_spectrum(net: &Network, x: &[f64], k: usize) -> Result<Vec<f64>> {
    jacobian_spectrum_with_limit(net, x, k, ASSEMBLY_LIMIT)
}

/// As [`jacobian_spectrum`] with an explicit assembly limit.
pub fn jacobian_spectrum_with_limit(net: &Network, x: &[f64], k: usize, limit: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("spectrum count must be at least 1".into()));
    }
    if net.output_len() * net.input_len() <= limit {
        Ok(singular_values(&jacobian(net, x)?, k))
    } else {
        check_output(net, x)?;
        matrix_free_spectrum(net, x, k, 300, 1e-12)
    }
}

/// Block subspace iteration on `J^T J`, followed by an exact SVD of the
/// projected `J V`.
pub fn matrix_free_spectrum(net: &Network, x: &[f64], k: usize, max_iter: usize, tol: f64) -> Result<Vec<f64>> {
    let n = net.input_len();
    let k = k.min(n).min(net.output_len());
    // A few extra vectors speed up convergence of the leading ones.
    let block = (k + 4).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    v = orthonormalize(v);
    let mut prev: Vec<f64> = Vec::new();
    for _ in 0..max_iter {
        let mut w = DMatrix::zeros(n, block);
        for c in 0..block {
            let jv = net.jvp(x, v.column(c).as_slice())?;
            let jtjv = net.vjp(x, &jv)?;
            w.set_column(c, &nalgebra::DVector::from_vec(jtjv));
        }
        v = orthonormalize(w);
        let s = projected_values(net, x, &v, k)?;
        let converged = prev.len() == s.len()
            && s.iter().zip(&prev).all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs()));
        prev = s;
        if converged {
            break;
        }
    }
    Ok(prev)
}

fn projected_values(net: &Network, x: &[f64], v: &DMatrix<f64>, k: usize) -> Result<Vec<f64>> {
    let mut jv = DMatrix::zeros(net.output_len(), v.ncols());
    for c in 0..v.ncols() {
        let col = net.jvp(x, v.column(c).as_slice())?;
        jv.set_column(c, &nalgebra::DVector::from_vec(col));
    }
    Ok(singular_values(&jv, k))
}

/// Gram-Schmidt with one reorthogonalisation pass; dependent columns are
/// replaced by zeros.
fn orthonormalize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for c in 0..m.ncols() {
        for _ in 0..2 {
            for p in 0..c {
                let proj = m.column(p).dot(&m.column(c));
                let prev = m.column(p).clone_owned();
                let mut col = m.column_mut(c);
                col.axpy(-proj, &prev, 1.0);
            }
        }
        let norm = m.column(c).norm();
        let mut col = m.column_mut(c);
        if norm > 1e-300 {
            col /= norm;
        } else {
            col.fill(0.0);
        }
    }
    m
}
