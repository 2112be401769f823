//! Subject trajectories, EMA-maintained reference trajectories per SOM
//! cell, and the direction-alignment loss.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::som::GridIndex;

/// Trajectories with a norm below this are excluded from the direction loss.
pub const MIN_TRAJECTORY_NORM: f64 = 1e-12;

/// `(z^v − z^u) / Δt` row by row.
pub fn trajectory(tape: &mut Tape, z_u: Var, z_v: Var, delta_t: &[f64]) -> Result<Var> {
    let shape = tape.shape(z_u).to_vec();
    let (n, d) = match shape[..] {
        [n, d] => (n, d),
        [d] => (1, d),
        _ => {
            return Err(Error::InvalidShape {
                op: "trajectory",
                shape,
                reason: "expected a vector or matrix of latents",
            })
        }
    };
    if delta_t.len() != n {
        return Err(Error::ShapeMismatch {
            op: "trajectory",
            left: vec![n],
            right: vec![delta_t.len()],
        });
    }
    if let Some(bad) = delta_t.iter().find(|&&dt| !(dt > 0.0)) {
        return Err(Error::invalid(format!("time gap must be positive, got {bad}")));
    }
    let diff = tape.sub(z_v, z_u)?;
    let inv = delta_t
        .iter()
        .flat_map(|dt| std::iter::repeat_n(1.0 / dt, d))
        .collect();
    let inv = tape.constant(shape, inv)?;
    tape.mul(diff, inv)
}

/// Per-cell average aging vectors, updated only by [`ema_update`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectories {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<f64>,
    initialized: Vec<bool>,
}

impl ReferenceTrajectories {
    pub fn new(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            values: vec![0.0; rows * cols * dim],
            initialized: vec![false; rows * cols],
        }
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        dim: usize,
        values: Vec<f64>,
        initialized: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != rows * cols * dim || initialized.len() != rows * cols {
            return Err(Error::invalid(format!(
                "reference trajectories for {rows}×{cols}×{dim} got {} values and {} flags",
                values.len(),
                initialized.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            values,
            initialized,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    /// `Δg` at `idx`, or `None` if the cell has never been hit.
    pub fn get(&self, idx: GridIndex) -> Option<&[f64]> {
        let c = idx.linear(self.cols);
        self.initialized[c].then(|| &self.values[c * self.dim..(c + 1) * self.dim])
    }

    pub fn is_initialized(&self, idx: GridIndex) -> bool {
        self.initialized[idx.linear(self.cols)]
    }

    pub fn uninitialized_count(&self) -> usize {
        self.initialized.iter().filter(|f| !**f).count()
    }

    /// Mirrors the cells the same way as [`crate::som::SomGrid::flip`].
    pub fn flip(&mut self, flip_rows: bool, flip_cols: bool) {
        let (old_v, old_f) = (self.values.clone(), self.initialized.clone());
        let d = self.dim;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let si = if flip_rows { self.rows - 1 - i } else { i };
                let sj = if flip_cols { self.cols - 1 - j } else { j };
                let (dst, src) = (i * self.cols + j, si * self.cols + sj);
                self.values[dst * d..(dst + 1) * d].copy_from_slice(&old_v[src * d..(src + 1) * d]);
                self.initialized[dst] = old_f[src];
            }
        }
    }
}

/// Per-cell sums and counts of one batch's trajectories, bucketed by `ε^u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrajectoryStats {
    cols: usize,
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
    batch_size: usize,
}

impl BatchTrajectoryStats {
    pub fn accumulate(
        delta_z: &[Vec<f64>],
        eps_u: &[GridIndex],
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        if delta_z.len() != eps_u.len() {
            return Err(Error::ShapeMismatch {
                op: "trajectory stats",
                left: vec![delta_z.len()],
                right: vec![eps_u.len()],
            });
        }
        let dim = delta_z.first().map_or(0, Vec::len);
        let mut sums = vec![0.0; rows * cols * dim];
        let mut counts = vec![0usize; rows * cols];
        for (dz, e) in delta_z.iter().zip(eps_u) {
            if e.row >= rows || e.col >= cols {
                return Err(Error::invalid(format!("cell {e:?} outside {rows}×{cols} grid")));
            }
            let c = e.linear(cols);
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(dz)
                .for_each(|(s, v)| *s += v);
        }
        Ok(Self {
            cols,
            dim,
            sums,
            counts,
            batch_size: delta_z.len(),
        })
    }

    pub fn count(&self, idx: GridIndex) -> usize {
        self.counts[idx.linear(self.cols)]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batch-average trajectory `Δh` of a cell with at least one member.
    pub fn mean(&self, idx: GridIndex) -> Option<Vec<f64>> {
        let c = idx.linear(self.cols);
        let n = self.counts[c];
        (n > 0).then(|| {
            self.sums[c * self.dim..(c + 1) * self.dim]
                .iter()
                .map(|s| s / n as f64)
                .collect()
        })
    }
}

/// Folds a batch's per-cell averages into the references.
///
/// At `t = 0`, and on the first hit of a cell at any later `t`, the cell
/// takes `Δh` outright. Afterwards hit cells blend `α·Δg + (1−α)·Δh`;
/// cells with no members this batch are left alone.
pub fn ema_update(
    refs: &mut ReferenceTrajectories,
    stats: &BatchTrajectoryStats,
    alpha: f64,
    t: u64,
) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("EMA keep rate must lie in (0, 1), got {alpha}")));
    }
    if stats.counts.len() != refs.initialized.len() || (stats.dim != refs.dim && stats.batch_size > 0)
    {
        return Err(Error::invalid("batch statistics do not match the reference grid"));
    }
    let d = refs.dim;
    for c in 0..refs.initialized.len() {
        let n = stats.counts[c];
        if n == 0 {
            continue;
        }
        let mean = stats.sums[c * d..(c + 1) * d].iter().map(|s| s / n as f64);
        let cell = &mut refs.values[c * d..(c + 1) * d];
        if t == 0 || !refs.initialized[c] {
            cell.iter_mut().zip(mean).for_each(|(g, h)| *g = h);
            refs.initialized[c] = true;
        } else {
            cell.iter_mut()
                .zip(mean)
                .for_each(|(g, h)| *g = alpha * *g + (1.0 - alpha) * h);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct DirectionLoss {
    pub loss: Var,
    /// Samples counted in the mean.
    pub included: usize,
    /// Samples whose cell is uninitialized or whose trajectory (or
    /// reference) is numerically zero.
    pub excluded: usize,
    /// Constant node holding the gathered reference rows, if any.
    pub references: Option<Var>,
}

/// Mean over usable samples of `1 − cos(Δz, sg[Δg_{ε^u}])`. Gradients
/// reach only `delta_z`. With no usable sample the loss is a constant 0.
pub fn direction_loss(
    tape: &mut Tape,
    delta_z: Var,
    refs: &ReferenceTrajectories,
    eps_u: &[GridIndex],
) -> Result<DirectionLoss> {
    let (n, d) = match tape.shape(delta_z)[..] {
        [n, d] => (n, d),
        _ => {
            return Err(Error::InvalidShape {
                op: "direction_loss",
                shape: tape.shape(delta_z).to_vec(),
                reason: "expected a batch × dim matrix",
            })
        }
    };
    if eps_u.len() != n || d != refs.dim {
        return Err(Error::ShapeMismatch {
            op: "direction_loss",
            left: vec![n, d],
            right: vec![eps_u.len(), refs.dim],
        });
    }

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    {
        let dz = tape.value(delta_z);
        for (k, e) in eps_u.iter().enumerate() {
            let Some(g) = refs.get(*e) else { continue };
            let row = &dz[k * d..(k + 1) * d];
            let nz = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nz < MIN_TRAJECTORY_NORM || ng < MIN_TRAJECTORY_NORM {
                continue;
            }
            rows.push(k);
            targets.extend_from_slice(g);
        }
    }
    let included = rows.len();
    if included == 0 {
        return Ok(DirectionLoss {
            loss: tape.scalar(0.0),
            included,
            excluded: n,
            references: None,
        });
    }
    let picked = tape.gather_rows(delta_z, &rows)?;
    let refs_var = tape.constant(vec![included, d], targets)?;
    let cos = tape.row_cosine(picked, refs_var)?;
    let mean = tape.mean(cos)?;
    let neg = tape.scale(mean, -1.0);
    Ok(DirectionLoss {
        loss: tape.add_scalar(neg, 1.0),
        included,
        excluded: n - included,
        references: Some(refs_var),
    })
}
