//! Patch lowering for convolutions and 2x2 pooling.
//!
//! Lowering order: patch rows scan output pixels row-major; inside a patch
//! entries run channel-major, then kernel row, then kernel column. The DCT of a
//! patch depends on this order, so it is part of the layer semantics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let g = ConvGeometry {
            in_channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
        };
        if in_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!("invalid convolution geometry {g:?}")));
        }
        if in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return Err(Error::InvalidArgument(format!(
                "kernel {kernel} does not fit a {in_h}x{in_w} input with padding {padding}"
            )));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patches(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// Image index for each patch entry, `None` where the patch hits padding.
    fn source_index(&self, patch: usize, entry: usize) -> Option<usize> {
        let (oy, ox) = (patch / self.out_w(), patch % self.out_w());
        let kk = self.kernel * self.kernel;
        let (c, rem) = (entry / kk, entry % kk);
        let (ky, kx) = (rem / self.kernel, rem % self.kernel);
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.in_h && x < self.in_w).then(|| (c * self.in_h + y) * self.in_w + x)
    }

    /// Writes the `patches x patch_len` lowered matrix of `image` into `out`.
    pub(crate) fn lower_into(&self, image: &[f64], out: &mut [f64]) {
        let len = self.patch_len();
        for p in 0..self.patches() {
            for e in 0..len {
                out[p * len + e] = self.source_index(p, e).map_or(0.0, |i| image[i]);
            }
        }
    }

    /// Adjoint of `lower_into`: scatters patch gradients back onto the image.
    pub(crate) fn lift_add(&self, dpatches: &[f64], dimage: &mut [f64]) {
        let len = self.patch_len();
        for p in 0..self.patches() {
            for e in 0..len {
                if let Some(i) = self.source_index(p, e) {
                    dimage[i] += dpatches[p * len + e];
                }
            }
        }
    }
}

/// Lowers a `c x h x w` image to a `(#patches) x (k^2 c)` matrix.
pub fn lower_patches(image: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::shape("lower_patches", format!("expected c x h x w, got {other:?}"))),
    };
    let geom = ConvGeometry::new(c, h, w, kernel, stride, padding)?;
    let mut out = vec![0.0; geom.patches() * geom.patch_len()];
    geom.lower_into(image.data(), &mut out);
    Tensor::new(vec![geom.patches(), geom.patch_len()], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Non-overlapping 2x2 pooling; odd trailing rows/columns are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl Pool2d {
    pub fn new(kind: PoolKind, channels: usize, in_h: usize, in_w: usize) -> Result<Self> {
        if in_h < 2 || in_w < 2 {
            return Err(Error::InvalidArgument(format!("cannot 2x2-pool a {in_h}x{in_w} map")));
        }
        Ok(Pool2d {
            kind,
            channels,
            in_h,
            in_w,
        })
    }

    pub fn out_h(&self) -> usize {
        self.in_h / 2
    }

    pub fn out_w(&self) -> usize {
        self.in_w / 2
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }

    fn window(&self, c: usize, oy: usize, ox: usize) -> [usize; 4] {
        let base = |dy: usize, dx: usize| (c * self.in_h + 2 * oy + dy) * self.in_w + 2 * ox + dx;
        [base(0, 0), base(0, 1), base(1, 0), base(1, 1)]
    }

    /// Pools one sample; for max pooling, `argmax` records the winning input
    /// index of each output (first maximum on ties).
    pub(crate) fn forward(&self, x: &[f64], out: &mut [f64], argmax: &mut [usize]) {
        let mut o = 0;
        for c in 0..self.channels {
            for oy in 0..self.out_h() {
                for ox in 0..self.out_w() {
                    let win = self.window(c, oy, ox);
                    match self.kind {
                        PoolKind::Max => {
                            let mut best = win[0];
                            for &i in &win[1..] {
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                            out[o] = x[best];
                            argmax[o] = best;
                        }
                        PoolKind::Avg => {
                            out[o] = win.iter().map(|&i| x[i]).sum::<f64>() * 0.25;
                        }
                    }
                    o += 1;
                }
            }
        }
    }

    pub(crate) fn backward_add(&self, g: &[f64], argmax: &[usize], dx: &mut [f64]) {
        let mut o = 0;
        for c in 0..self.channels {
            for oy in 0..self.out_h() {
                for ox in 0..self.out_w() {
                    match self.kind {
                        PoolKind::Max => dx[argmax[o]] += g[o],
                        PoolKind::Avg => {
                            for i in self.window(c, oy, ox) {
                                dx[i] += 0.25 * g[o];
                            }
                        }
                    }
                    o += 1;
                }
            }
        }
    }
}
