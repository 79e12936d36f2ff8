//! Distribution of a global budget of trainable weights across layers, and
//! random placement of each layer's share.
//!
//! Heuristics:
//! - `uniform`: every layer gets the same density `k_total / N`.
//! - `epl`: equal number per layer.
//! - `epf`: equal number per filter (conv) or row (linear), network-wide.
//! - `erk`: density proportional to `(fan_in + fan_out) / (fan_in * fan_out)`,
//!   with kernel extents added for convolutions.
//!
//! Equal splits hand the remainder out one at a time in ascending index order;
//! a share above capacity is capped and its excess re-split among the uncapped
//! entries until nothing overflows. Proportional targets are rounded by largest
//! remainder (ties to the lower index) so the total is exact.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
    },
}

/// Weight-matrix shape of one prunable layer (`rows x cols`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub kind: LayerKind,
}

impl LayerShape {
    pub fn linear(rows: usize, cols: usize) -> Self {
        LayerShape {
            rows,
            cols,
            kind: LayerKind::Linear,
        }
    }

    pub fn conv(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        LayerShape {
            rows: out_channels,
            cols: in_channels * kernel * kernel,
            kind: LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
            },
        }
    }

    pub fn capacity(&self) -> usize {
        self.rows * self.cols
    }

    fn erk_factor(&self) -> f64 {
        match self.kind {
            LayerKind::Linear => {
                let (fan_in, fan_out) = (self.cols as f64, self.rows as f64);
                (fan_in + fan_out) / (fan_in * fan_out)
            }
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
            } => {
                let (ci, co, k) = (in_channels as f64, out_channels as f64, kernel as f64);
                (ci + co + k + k) / (ci * co * k * k)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heuristic {
    Uniform,
    Epl,
    Epf,
    Erk,
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Heuristic::Uniform),
            "epl" => Ok(Heuristic::Epl),
            "epf" => Ok(Heuristic::Epf),
            "erk" => Ok(Heuristic::Erk),
            other => Err(Error::Config(format!("unknown heuristic `{other}`"))),
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heuristic::Uniform => "uniform",
            Heuristic::Epl => "epl",
            Heuristic::Epf => "epf",
            Heuristic::Erk => "erk",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportPlan {
    pub layers: Vec<LayerShape>,
    pub k_total: usize,
    pub heuristic: Heuristic,
    pub seed: u64,
}

impl SupportPlan {
    /// A plan whose budget is `round(density * N)`.
    pub fn with_density(layers: Vec<LayerShape>, density: f64, heuristic: Heuristic, seed: u64) -> Result<Self> {
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {density}")));
        }
        let total: usize = layers.iter().map(LayerShape::capacity).sum();
        Ok(SupportPlan {
            layers,
            k_total: (density * total as f64).round() as usize,
            heuristic,
            seed,
        })
    }

    pub fn total_capacity(&self) -> usize {
        self.layers.iter().map(LayerShape::capacity).sum()
    }
}

/// Splits `budget` as evenly as possible over entries with the given caps.
/// Remainders go to the lowest indices; overflowing entries are capped and
/// their excess re-split among the rest until a fixed point.
pub fn equal_split_with_caps(budget: usize, caps: &[usize]) -> Vec<usize> {
    let total: usize = caps.iter().sum();
    let mut alloc = vec![0usize; caps.len()];
    let mut capped = vec![false; caps.len()];
    let mut remaining = budget.min(total);
    loop {
        let open: Vec<usize> = (0..caps.len()).filter(|&i| !capped[i]).collect();
        if open.is_empty() {
            break;
        }
        let quota = remaining / open.len();
        let extra = remaining % open.len();
        let tentative = |rank: usize| quota + usize::from(rank < extra);
        let overflow: Vec<usize> = open
            .iter()
            .enumerate()
            .filter(|&(rank, &i)| tentative(rank) > caps[i])
            .map(|(_, &i)| i)
            .collect();
        if overflow.is_empty() {
            for (rank, &i) in open.iter().enumerate() {
                alloc[i] = tentative(rank);
            }
            break;
        }
        for i in overflow {
            capped[i] = true;
            alloc[i] = caps[i];
            remaining -= caps[i];
        }
    }
    alloc
}

/// Rounds real-valued targets (each within `[0, cap]`) to integers summing to
/// `budget` by the largest-remainder rule.
fn apportion(targets: &[f64], caps: &[usize], budget: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = targets
        .iter()
        .zip(caps)
        .map(|(&t, &c)| (t.max(0.0).floor() as usize).min(c))
        .collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = budget.saturating_sub(assigned);
    while left > 0 {
        let before = left;
        for &i in &order {
            if left == 0 {
                break;
            }
            if alloc[i] < caps[i] {
                alloc[i] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    alloc
}

fn erk_targets(layers: &[LayerShape], budget: usize) -> Vec<f64> {
    let caps: Vec<f64> = layers.iter().map(|l| l.capacity() as f64).collect();
    let raw: Vec<f64> = layers.iter().map(LayerShape::erk_factor).collect();
    let mut dense = vec![false; layers.len()];
    loop {
        let fixed: f64 = (0..layers.len()).filter(|&i| dense[i]).map(|i| caps[i]).sum();
        let weighted: f64 = (0..layers.len())
            .filter(|&i| !dense[i])
            .map(|i| raw[i] * caps[i])
            .sum();
        let scale = if weighted > 0.0 {
            (budget as f64 - fixed) / weighted
        } else {
            0.0
        };
        let newly: Vec<usize> = (0..layers.len())
            .filter(|&i| !dense[i] && scale * raw[i] > 1.0)
            .collect();
        if newly.is_empty() {
            return (0..layers.len())
                .map(|i| if dense[i] { caps[i] } else { scale * raw[i] * caps[i] })
                .collect();
        }
        for i in newly {
            dense[i] = true;
        }
    }
}

/// Per-layer weight counts for a plan. For EPF the per-row split is also
/// returned (rows listed layer by layer).
pub fn allocate_counts(plan: &SupportPlan) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    if plan.layers.is_empty() {
        return Err(Error::InvalidArgument("support plan has no layers".into()));
    }
    if let Some(l) = plan.layers.iter().find(|l| l.capacity() == 0) {
        return Err(Error::InvalidArgument(format!("layer shape {l:?} has zero capacity")));
    }
    let capacity = plan.total_capacity();
    let budget = if plan.k_total > capacity {
        log::warn!(
            "budget {} exceeds total capacity {capacity}; clamping",
            plan.k_total
        );
        capacity
    } else {
        plan.k_total
    };
    let caps: Vec<usize> = plan.layers.iter().map(LayerShape::capacity).collect();
    Ok(match plan.heuristic {
        Heuristic::Epl => (equal_split_with_caps(budget, &caps), None),
        Heuristic::Epf => {
            let row_caps: Vec<usize> = plan
                .layers
                .iter()
                .flat_map(|l| std::iter::repeat_n(l.cols, l.rows))
                .collect();
            let rows = equal_split_with_caps(budget, &row_caps);
            let mut per_layer = Vec::with_capacity(plan.layers.len());
            let mut offset = 0;
            for l in &plan.layers {
                per_layer.push(rows[offset..offset + l.rows].iter().sum());
                offset += l.rows;
            }
            (per_layer, Some(rows))
        }
        Heuristic::Uniform => {
            let density = budget as f64 / capacity as f64;
            let targets: Vec<f64> = caps.iter().map(|&c| density * c as f64).collect();
            (apportion(&targets, &caps, budget), None)
        }
        Heuristic::Erk => {
            let targets = erk_targets(&plan.layers, budget);
            (apportion(&targets, &caps, budget), None)
        }
    })
}

/// Allocates supports for every layer. Values are zero; locations are drawn
/// uniformly without replacement from a stream seeded by `plan.seed`.
pub fn allocate_support(plan: &SupportPlan) -> Result<Vec<SparseMatrix>> {
    let (counts, rows) = allocate_counts(plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::with_capacity(plan.layers.len());
    let mut row_offset = 0;
    for (layer, &count) in plan.layers.iter().zip(&counts) {
        let mut support: Vec<(usize, usize)> = match &rows {
            None => rand::seq::index::sample(&mut rng, layer.capacity(), count)
                .iter()
                .map(|i| (i / layer.cols, i % layer.cols))
                .collect(),
            Some(rows) => {
                let mut coords = Vec::with_capacity(count);
                for r in 0..layer.rows {
                    let k = rows[row_offset + r];
                    coords.extend(
                        rand::seq::index::sample(&mut rng, layer.cols, k)
                            .iter()
                            .map(|c| (r, c)),
                    );
                }
                coords
            }
        };
        row_offset += layer.rows;
        support.sort_unstable();
        out.push(SparseMatrix::zeros_on(layer.rows, layer.cols, support)?);
    }
    Ok(out)
}
