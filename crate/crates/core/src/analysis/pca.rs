use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::longitudinal::ReferenceTrajectories;
use crate::som::SomGrid;

/// Top two principal axes of a SOM's representations.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Unit-norm axes; the first nonzero loading of each is positive.
    pub axes: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

/// Relative threshold below which an eigenvalue counts as zero.
const RANK_TOLERANCE: f64 = 1e-12;

pub fn pca_project(vectors: &[Vec<f64>]) -> Result<PcaProjection> {
    if vectors.len() < 2 {
        return Err(Error::invalid("PCA needs at least 2 vectors"));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("PCA vectors have inconsistent dimensions"));
    }
    let m = vectors.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| vectors.iter().map(|v| v[k]).sum::<f64>() / m).collect();
    let centered = DMatrix::from_fn(vectors.len(), d, |i, k| vectors[i][k] - mean[k]);
    let cov = centered.transpose() * &centered / m;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let floor = RANK_TOLERANCE * top.abs().max(1.0);
    if d < 2 || !(top > floor) || !(eig.eigenvalues[order[1]] > floor) {
        return Err(Error::invalid("SOM representations span fewer than 2 dimensions"));
    }

    let axis = |idx: usize| -> Vec<f64> {
        let mut a: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = a.iter().find(|v| v.abs() > 1e-12).copied().unwrap_or(1.0);
        if lead < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
        a
    };
    Ok(PcaProjection {
        mean,
        axes: [axis(order[0]), axis(order[1])],
        eigenvalues: [top, eig.eigenvalues[order[1]]],
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PcaProjection {
    pub fn from_som(som: &SomGrid) -> Result<Self> {
        pca_project(&som.to_vectors())
    }

    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        [dot(&c, &self.axes[0]), dot(&c, &self.axes[1])]
    }

    /// Projection of a direction (no centering).
    pub fn project_direction(&self, v: &[f64]) -> [f64; 2] {
        [dot(v, &self.axes[0]), dot(v, &self.axes[1])]
    }

    pub fn project_all(&self, vs: &[Vec<f64>]) -> Vec<[f64; 2]> {
        vs.iter().map(|v| self.project(v)).collect()
    }

    /// Maps 2-D coordinates back into the original space.
    pub fn reconstruct(&self, p: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len())
            .map(|k| self.mean[k] + p[0] * self.axes[0][k] + p[1] * self.axes[1][k])
            .collect()
    }
}

/// Pairs of row-major cell indices that are horizontal or vertical grid
/// neighbors.
pub fn grid_edges(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let a = i * cols + j;
            if j + 1 < cols {
                out.push((a, a + 1));
            }
            if i + 1 < rows {
                out.push((a, a + cols));
            }
        }
    }
    out
}

/// Start point and projected direction of each initialized reference
/// trajectory, keyed by row-major cell.
pub fn trajectory_arrows(
    pca: &PcaProjection,
    som: &SomGrid,
    refs: &ReferenceTrajectories,
) -> Vec<(usize, [f64; 2], [f64; 2])> {
    som.cells()
        .filter_map(|c| {
            refs.get(c).map(|dg| {
                (
                    c.linear(som.cols()),
                    pca.project(som.representation(c)),
                    pca.project_direction(dg),
                )
            })
        })
        .collect()
}
