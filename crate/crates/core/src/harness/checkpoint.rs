//! Binary checkpoints of a network's trainable state.
//!
//! Layout (little-endian): magic `DPSC`, `u16` version, `u16` weight-layer
//! count, then per layer: `u8` kind (0 dense, 1 sparse, 2 DCT-plus-sparse),
//! `u8` flags (bit 0: alpha trainable, bit 1: has bias), the sparse matrix
//! record (dense layers store every entry), `f64` alpha, `u32` bias length
//! and the bias values. Architecture is not stored; a checkpoint is loaded
//! into a network built from the same config.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Network, WeightKind, WeightOp, Weights};
use crate::sparse::{read_f64, read_u32, SparseMatrix};

pub const MAGIC: &[u8; 4] = b"DPSC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub kind: WeightKind,
    pub alpha_trainable: bool,
    pub matrix: SparseMatrix,
    pub alpha: f64,
    pub bias: Option<Vec<f64>>,
}

impl LayerRecord {
    fn from_op(op: &WeightOp) -> Result<Self> {
        let matrix = match op.weights() {
            Weights::Dense(w) => {
                let cols = op.cols();
                SparseMatrix::from_triplets(op.rows(), cols, w.iter().enumerate().map(|(i, &v)| (i / cols, i % cols, v)).collect())?
            }
            Weights::Sparse(s) | Weights::Dctps { sparse: s, .. } => s.clone(),
        };
        Ok(LayerRecord {
            kind: op.kind(),
            alpha_trainable: op.alpha_trainable(),
            matrix,
            alpha: op.alpha().unwrap_or(0.0),
            bias: op.bias().map(<[f64]>::to_vec),
        })
    }

    fn to_op(&self) -> Result<WeightOp> {
        let (rows, cols) = (self.matrix.rows(), self.matrix.cols());
        let weights = match self.kind {
            WeightKind::Dense => Weights::Dense(self.matrix.to_dense().into_data()),
            WeightKind::Sparse => Weights::Sparse(self.matrix.clone()),
            WeightKind::Dctps => Weights::Dctps {
                alpha: self.alpha,
                sparse: self.matrix.clone(),
            },
        };
        Ok(WeightOp::new(rows, cols, weights, self.bias.clone())?.with_alpha_trainable(self.alpha_trainable))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Result<Self> {
        Ok(Checkpoint {
            layers: net.weight_ops().into_iter().map(LayerRecord::from_op).collect::<Result<_>>()?,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let count = u16::try_from(self.layers.len())
            .map_err(|_| Error::InvalidArgument(format!("{} layers do not fit a checkpoint", self.layers.len())))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for rec in &self.layers {
            let kind: u8 = match rec.kind {
                WeightKind::Dense => 0,
                WeightKind::Sparse => 1,
                WeightKind::Dctps => 2,
            };
            let flags = u8::from(rec.alpha_trainable) | (u8::from(rec.bias.is_some()) << 1);
            w.write_all(&[kind, flags])?;
            rec.matrix.write_to(w)?;
            w.write_all(&rec.alpha.to_le_bytes())?;
            let bias = rec.bias.as_deref().unwrap_or(&[]);
            w.write_all(&(bias.len() as u32).to_le_bytes())?;
            for b in bias {
                w.write_all(&b.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::format("checkpoint", 0, "truncated magic"))?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", 0, "bad magic"));
        }
        let mut two = [0u8; 2];
        r.read_exact(&mut two).map_err(|_| Error::format("checkpoint", 4, "truncated version"))?;
        let version = u16::from_le_bytes(two);
        if version != VERSION {
            return Err(Error::format("checkpoint", 4, format!("unsupported version {version}")));
        }
        r.read_exact(&mut two).map_err(|_| Error::format("checkpoint", 6, "truncated layer count"))?;
        let count = u16::from_le_bytes(two) as usize;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let offset = bytes.len() - r.len();
            let mut head = [0u8; 2];
            r.read_exact(&mut head).map_err(|_| Error::format("checkpoint", offset, format!("layer {i} truncated")))?;
            let kind = match head[0] {
                0 => WeightKind::Dense,
                1 => WeightKind::Sparse,
                2 => WeightKind::Dctps,
                k => return Err(Error::format("checkpoint", offset, format!("unknown layer kind {k}"))),
            };
            let matrix = SparseMatrix::read_from(&mut r)
                .map_err(|e| Error::format("checkpoint", offset + 2, format!("layer {i} matrix: {e}")))?;
            let at = bytes.len() - r.len();
            let trunc = |_| Error::format("checkpoint", at, format!("layer {i} truncated"));
            let alpha = read_f64(&mut r).map_err(trunc)?;
            let n = read_u32(&mut r).map_err(trunc)? as usize;
            let bias = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>().map_err(trunc)?;
            layers.push(LayerRecord {
                kind,
                alpha_trainable: head[1] & 1 != 0,
                matrix,
                alpha,
                bias: (head[1] & 2 != 0).then_some(bias),
            });
        }
        if !r.is_empty() {
            return Err(Error::format("checkpoint", bytes.len() - r.len(), "trailing bytes"));
        }
        Ok(Checkpoint { layers })
    }

    /// Replaces the weight operators of `net` with the stored ones; shapes
    /// must match.
    pub fn load_into(&self, net: &mut Network) -> Result<()> {
        let shapes = net.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::shape("checkpoint", format!("{} stored layers, network has {}", self.layers.len(), shapes.len())));
        }
        let ops: Vec<WeightOp> = self.layers.iter().map(LayerRecord::to_op).collect::<Result<_>>()?;
        for (i, (op, s)) in ops.iter().zip(&shapes).enumerate() {
            if (op.rows(), op.cols()) != (s.rows, s.cols) {
                return Err(Error::shape("checkpoint", format!("layer {i} is {}x{}, network has {}x{}", op.rows(), op.cols(), s.rows, s.cols)));
            }
        }
        for (slot, op) in net.weight_ops_mut().into_iter().zip(ops) {
            *slot = op;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
