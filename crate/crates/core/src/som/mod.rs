//! The SOM grid: nearest-representation lookup, neighborhood weights with
//! an annealed temperature, the SOM and commitment losses, and k-means
//! initialization.
//!
//! Representations are stored as a `(rows·cols) × dim` matrix; cell
//! `(i, j)` occupies row `i·cols + j`.

mod kmeans;

pub use kmeans::{kmeans, MAX_ITERATIONS as KMEANS_MAX_ITERATIONS};

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

impl GridIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn linear(self, cols: usize) -> usize {
        self.row * cols + self.col
    }

    pub fn from_linear(idx: usize, cols: usize) -> Self {
        Self::new(idx / cols, idx % cols)
    }

    pub fn l1(self, other: GridIndex) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    representations: Tensor,
}

impl SomGrid {
    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Result<Self> {
        Self::check_shape(rows, cols, dim)?;
        Ok(Self {
            rows,
            cols,
            dim,
            representations: Tensor::zeros(vec![rows * cols, dim]).with_grad(),
        })
    }

    /// Builds a grid from `rows·cols` vectors listed in row-major cell order.
    pub fn from_vectors(rows: usize, cols: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        Self::check_shape(rows, cols, dim)?;
        if vectors.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}×{cols} grid needs {} vectors, got {}",
                rows * cols,
                vectors.len()
            )));
        }
        let reps = Tensor::from_rows(vectors)?;
        if reps.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "SOM representations".into(),
                value: f64::NAN,
            });
        }
        Ok(Self {
            rows,
            cols,
            dim,
            representations: reps.with_grad(),
        })
    }

    fn check_shape(rows: usize, cols: usize, dim: usize) -> Result<()> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "grid needs positive rows, cols and dim, got {rows}×{cols}×{dim}"
            )));
        }
        Ok(())
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

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn representation(&self, idx: GridIndex) -> &[f64] {
        self.representations.row(idx.linear(self.cols))
    }

    pub fn representations(&self) -> &Tensor {
        &self.representations
    }

    pub fn representations_mut(&mut self) -> &mut Tensor {
        &mut self.representations
    }

    pub fn to_vectors(&self) -> Vec<Vec<f64>> {
        self.representations.to_rows()
    }

    pub fn cells(&self) -> impl Iterator<Item = GridIndex> + '_ {
        (0..self.n_cells()).map(|i| GridIndex::from_linear(i, self.cols))
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.leaf(&self.representations)
    }

    /// Rows `g_ε` of a bound grid for each index.
    pub fn gather(&self, tape: &mut Tape, grid: Var, eps: &[GridIndex]) -> Result<Var> {
        let idx: Vec<usize> = eps.iter().map(|e| e.linear(self.cols)).collect();
        tape.gather_rows(grid, &idx)
    }

    /// Grid index of the representation closest to `z` in Euclidean
    /// distance. Ties go to the smallest row-major index.
    pub fn nearest(&self, z: &[f64]) -> Result<GridIndex> {
        if z.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "nearest",
                left: vec![self.dim],
                right: vec![z.len()],
            });
        }
        if let Some(bad) = z.iter().find(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                component: "latent passed to nearest".into(),
                value: *bad,
            });
        }
        let mut best = (0, f64::INFINITY);
        for (i, g) in self.representations.rows().enumerate() {
            let d: f64 = z.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(GridIndex::from_linear(best.0, self.cols))
    }

    pub fn nearest_all(&self, zs: &[Vec<f64>]) -> Result<Vec<GridIndex>> {
        zs.iter().map(|z| self.nearest(z)).collect()
    }

    /// Mirrors the grid left-right (`flip_cols`) and/or top-bottom.
    pub fn flip(&mut self, flip_rows: bool, flip_cols: bool) {
        let old = self.to_vectors();
        let (rows, cols) = (self.rows, self.cols);
        let values = self.representations.values_mut();
        for i in 0..rows {
            for j in 0..cols {
                let si = if flip_rows { rows - 1 - i } else { i };
                let sj = if flip_cols { cols - 1 - j } else { j };
                let dst = (i * cols + j) * self.dim;
                values[dst..dst + self.dim].copy_from_slice(&old[si * cols + sj]);
            }
        }
    }
}

/// Exponentially annealed neighborhood temperature
/// `τ(t) = N_r·N_c·τ_max·(τ_min/τ_max)^(t/T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub tau_min: f64,
    pub tau_max: f64,
    pub total_iterations: u64,
}

impl TauSchedule {
    pub fn new(tau_min: f64, tau_max: f64, total_iterations: u64) -> Result<Self> {
        if !(tau_min > 0.0 && tau_min <= tau_max) {
            return Err(Error::invalid(format!(
                "need 0 < tau_min <= tau_max, got {tau_min} and {tau_max}"
            )));
        }
        if total_iterations == 0 {
            return Err(Error::invalid("tau schedule needs at least one iteration"));
        }
        Ok(Self {
            tau_min,
            tau_max,
            total_iterations,
        })
    }

    /// Temperature at iteration `t` for a grid with `n_cells` cells.
    /// Iterations past the end clamp to the final value.
    pub fn tau_at(&self, n_cells: usize, t: i64) -> Result<f64> {
        if t < 0 {
            return Err(Error::invalid(format!("negative iteration {t}")));
        }
        let t = (t as u64).min(self.total_iterations);
        let cells = n_cells as f64;
        if t == 0 {
            return Ok(cells * self.tau_max);
        }
        if t == self.total_iterations {
            return Ok(cells * self.tau_min);
        }
        let frac = t as f64 / self.total_iterations as f64;
        Ok(cells * self.tau_max * (self.tau_min / self.tau_max).powf(frac))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// Gaussian neighborhood over grid distance.
    #[default]
    Soft,
    /// Indicator of the nearest cell only.
    Hard,
}

/// Normalized per-cell weights for one sample, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWeights {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl SoftWeights {
    pub fn get(&self, idx: GridIndex) -> f64 {
        self.weights[idx.linear(self.cols)]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `w_{i,j} ∝ exp(−‖ε − (i,j)‖₁² / (2τ))`, normalized to sum to one.
pub fn soft_weights(eps: GridIndex, rows: usize, cols: usize, tau: f64) -> Result<SoftWeights> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let raw: Vec<f64> = (0..rows * cols)
        .map(|i| {
            let d = eps.l1(GridIndex::from_linear(i, cols)) as f64;
            (-(d * d) / (2.0 * tau)).exp()
        })
        .collect();
    let delta: f64 = raw.iter().sum();
    Ok(SoftWeights {
        rows,
        cols,
        weights: raw.into_iter().map(|w| w / delta).collect(),
    })
}

pub fn hard_weights(eps: GridIndex, rows: usize, cols: usize) -> SoftWeights {
    let mut weights = vec![0.0; rows * cols];
    weights[eps.linear(cols)] = 1.0;
    SoftWeights {
        rows,
        cols,
        weights,
    }
}

pub fn cell_weights(
    scheme: WeightScheme,
    eps: GridIndex,
    rows: usize,
    cols: usize,
    tau: f64,
) -> Result<SoftWeights> {
    match scheme {
        WeightScheme::Soft => soft_weights(eps, rows, cols, tau),
        WeightScheme::Hard => Ok(hard_weights(eps, rows, cols)),
    }
}

fn weight_matrix(tape: &mut Tape, som: &SomGrid, weights: &[SoftWeights]) -> Result<Var> {
    if let Some(w) = weights
        .iter()
        .find(|w| (w.rows, w.cols) != (som.rows, som.cols) || w.weights.len() != som.n_cells())
    {
        return Err(Error::ShapeMismatch {
            op: "som_loss weights",
            left: vec![som.rows, som.cols],
            right: vec![w.rows, w.cols],
        });
    }
    let values = weights.iter().flat_map(|w| w.weights.iter().copied()).collect();
    tape.constant(vec![weights.len(), som.n_cells()], values)
}

/// Batch mean of `Σ_{i,j} w_{i,j}‖sg[z] − g_{i,j}‖²` over both time
/// points. Latents pass through a stop-gradient, so only the grid is
/// trained by this term.
pub fn som_loss(
    tape: &mut Tape,
    som: &SomGrid,
    grid: Var,
    z_u: Var,
    z_v: Var,
    w_u: &[SoftWeights],
    w_v: &[SoftWeights],
) -> Result<Var> {
    let n = tape.shape(z_u)[0];
    if w_u.len() != n || w_v.len() != n {
        return Err(Error::ShapeMismatch {
            op: "som_loss",
            left: vec![n],
            right: vec![w_u.len(), w_v.len()],
        });
    }
    let mut total = None;
    for (z, w) in [(z_u, w_u), (z_v, w_v)] {
        let z = tape.stop_gradient(z);
        let dist = tape.pairwise_sq_dist(z, grid)?;
        let wm = weight_matrix(tape, som, w)?;
        let weighted = tape.mul(dist, wm)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / n as f64))
}

/// Batch mean of `‖z^u − g_{ε^u}‖² + ‖z^v − g_{ε^v}‖²`; trains both the
/// encoder and the selected representations.
pub fn commit_loss(
    tape: &mut Tape,
    z_u: Var,
    z_v: Var,
    g_eps_u: Var,
    g_eps_v: Var,
) -> Result<Var> {
    let n = tape.shape(z_u)[0];
    let du = tape.sub(z_u, g_eps_u)?;
    let dv = tape.sub(z_v, g_eps_v)?;
    let su = tape.sq_norm(du);
    let sv = tape.sq_norm(dv);
    let s = tape.add(su, sv)?;
    Ok(tape.scale(s, 1.0 / n.max(1) as f64))
}

/// k-means over `latents` with `k = rows·cols`, centers laid out in
/// row-major cell order.
pub fn kmeans_init(latents: &[Vec<f64>], rows: usize, cols: usize, seed: u64) -> Result<SomGrid> {
    let centers = kmeans(latents, rows * cols, seed)?;
    SomGrid::from_vectors(rows, cols, &centers)
}
