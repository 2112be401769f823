//! Post-hoc analysis of a trained model: similarity grids, group averages,
//! distance correlation, PCA projection and downstream probes.

mod pca;
mod probe;
mod report;

pub use pca::{grid_edges, pca_project, trajectory_arrows, PcaProjection};
pub use probe::{
    classification_metrics, cross_validate, fit_probe, regression_metrics, subject_folds, FittedProbe, ProbeConfig,
    ProbeMetrics, ProbeReport, Task,
};
pub use report::{heatmap_svg, write_dcor_csv, write_pca_csv, write_probe_csv, write_samples_csv};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Autoencoder;
use crate::som::{GridIndex, SomGrid};
use crate::synth::{Cohort, Group};

pub const MIN_GAMMA: f64 = 1e-12;
pub const MIN_DISTANCE_VARIANCE: f64 = 1e-12;

/// Softmax similarity of one latent to every SOM cell, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGrid {
    pub rows: usize,
    pub cols: usize,
    pub rho: Vec<f64>,
    pub gamma: f64,
}

impl SimilarityGrid {
    pub fn get(&self, idx: GridIndex) -> f64 {
        self.rho[idx.linear(self.cols)]
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            rho: vec![1.0 / n as f64; n],
            gamma: 0.0,
        }
    }

    /// Column index averaged under ρ.
    pub fn expected_col(&self) -> f64 {
        self.rho
            .iter()
            .enumerate()
            .map(|(i, r)| r * (i % self.cols) as f64)
            .sum()
    }

    pub fn expected_row(&self) -> f64 {
        self.rho
            .iter()
            .enumerate()
            .map(|(i, r)| r * (i / self.cols) as f64)
            .sum()
    }

    pub fn argmax(&self) -> GridIndex {
        let mut best = 0;
        for (i, r) in self.rho.iter().enumerate() {
            if *r > self.rho[best] {
                best = i;
            }
        }
        GridIndex::from_linear(best, self.cols)
    }
}

/// `ρ = softmax(−d/γ)` with `d` the squared distances of `z` to each cell
/// and `γ` their population standard deviation.
pub fn similarity_grid(z: &[f64], som: &SomGrid) -> Result<SimilarityGrid> {
    if z.len() != som.dim() {
        return Err(Error::invalid(format!(
            "latent has dim {}, SOM has dim {}",
            z.len(),
            som.dim()
        )));
    }
    let d: Vec<f64> = som
        .cells()
        .map(|c| {
            som.representation(c)
                .iter()
                .zip(z)
                .map(|(g, x)| (x - g) * (x - g))
                .sum()
        })
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let gamma = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(gamma >= MIN_GAMMA) {
        return Ok(SimilarityGrid {
            gamma,
            ..SimilarityGrid::uniform(som.rows(), som.cols())
        });
    }
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|v| (-(v - dmin) / gamma).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(SimilarityGrid {
        rows: som.rows(),
        cols: som.cols(),
        rho: e.into_iter().map(|v| v / total).collect(),
        gamma,
    })
}

/// Elementwise mean of `grids`; `description` names the group in errors.
pub fn group_average_grid<'a, I>(grids: I, description: &str) -> Result<SimilarityGrid>
where
    I: IntoIterator<Item = &'a SimilarityGrid>,
{
    let mut iter = grids.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::invalid(format!("no samples match group `{description}`")))?;
    let mut sum = first.rho.clone();
    let mut gamma = first.gamma;
    let mut count = 1usize;
    for g in iter {
        if (g.rows, g.cols) != (first.rows, first.cols) {
            return Err(Error::invalid("cannot average grids of different sizes"));
        }
        sum.iter_mut().zip(&g.rho).for_each(|(s, r)| *s += r);
        gamma += g.gamma;
        count += 1;
    }
    let k = count as f64;
    Ok(SimilarityGrid {
        rows: first.rows,
        cols: first.cols,
        rho: sum.into_iter().map(|s| s / k).collect(),
        gamma: gamma / k,
    })
}

fn pairwise_centered(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            a[i * n + j] = d;
            a[j * n + i] = d;
        }
    }
    let row_mean: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] += grand - row_mean[i] - row_mean[j];
        }
    }
    a
}

/// Sample distance correlation between the rows of `x` and `y`, in [0, 1].
/// Zero when either variable has (near) zero distance variance.
pub fn distance_correlation(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "distance correlation needs equal sample counts, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("distance correlation needs at least 2 samples"));
    }
    let a = pairwise_centered(x);
    let b = pairwise_centered(y);
    let n2 = (x.len() * x.len()) as f64;
    let dcov = a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>() / n2;
    let dvar_x = a.iter().map(|p| p * p).sum::<f64>() / n2;
    let dvar_y = b.iter().map(|q| q * q).sum::<f64>() / n2;
    if dvar_x < MIN_DISTANCE_VARIANCE || dvar_y < MIN_DISTANCE_VARIANCE {
        return Ok(0.0);
    }
    Ok((dcov / (dvar_x * dvar_y).sqrt()).clamp(0.0, 1.0).sqrt())
}

/// Distance correlation against a scalar covariate.
pub fn distance_correlation_scalar(x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let y: Vec<Vec<f64>> = y.iter().map(|v| vec![*v]).collect();
    distance_correlation(x, &y)
}

/// One visit's grid assignment, similarity grid and covariates.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub subject_id: u32,
    pub group: Group,
    pub time: f64,
    pub age: f64,
    pub age_factor: f64,
    pub cognitive_score: f64,
    pub latent: Vec<f64>,
    pub cell: GridIndex,
    pub rho: SimilarityGrid,
}

impl SampleRecord {
    pub fn coords(&self) -> Vec<f64> {
        vec![self.cell.row as f64, self.cell.col as f64]
    }
}

pub fn analyze_cohort(model: &Autoencoder, som: &SomGrid, cohort: &Cohort) -> Result<Vec<SampleRecord>> {
    let latents = model.encode_rows(&cohort.observations())?;
    cohort
        .visits()
        .zip(latents)
        .map(|(v, z)| {
            Ok(SampleRecord {
                subject_id: v.subject_id,
                group: v.group,
                time: v.time,
                age: v.age,
                age_factor: v.age_factor,
                cognitive_score: v.cognitive_score,
                cell: som.nearest(&z)?,
                rho: similarity_grid(&z, som)?,
                latent: z,
            })
        })
        .collect()
}

/// Scalar covariates tracked for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Covariate {
    Age,
    AgeFactor,
    CognitiveScore,
    SevereDecline,
}

impl Covariate {
    pub const ALL: [Covariate; 4] = [
        Covariate::Age,
        Covariate::AgeFactor,
        Covariate::CognitiveScore,
        Covariate::SevereDecline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Age => "age",
            Covariate::AgeFactor => "age_factor",
            Covariate::CognitiveScore => "cognitive_score",
            Covariate::SevereDecline => "severe_decline",
        }
    }

    pub fn value(self, s: &SampleRecord) -> f64 {
        match self {
            Covariate::Age => s.age,
            Covariate::AgeFactor => s.age_factor,
            Covariate::CognitiveScore => s.cognitive_score,
            Covariate::SevereDecline => f64::from(u8::from(s.group.is_severe_decline())),
        }
    }
}

/// Distance correlation of grid coordinates with each covariate.
pub fn dcor_report(samples: &[SampleRecord]) -> Result<Vec<(Covariate, f64)>> {
    let coords: Vec<Vec<f64>> = samples.iter().map(SampleRecord::coords).collect();
    Covariate::ALL
        .iter()
        .map(|c| {
            let y: Vec<f64> = samples.iter().map(|s| c.value(s)).collect();
            Ok((*c, distance_correlation_scalar(&coords, &y)?))
        })
        .collect()
}

/// Splits samples into `n_bins` equal-count bins ordered by age and returns
/// each bin's lower age bound and average similarity grid.
pub fn age_bin_grids(samples: &[SampleRecord], n_bins: usize) -> Result<Vec<(f64, SimilarityGrid)>> {
    if n_bins == 0 || samples.len() < n_bins {
        return Err(Error::invalid(format!(
            "cannot split {} samples into {n_bins} age bins",
            samples.len()
        )));
    }
    let mut order: Vec<&SampleRecord> = samples.iter().collect();
    order.sort_by(|a, b| a.age.total_cmp(&b.age));
    let n = order.len();
    (0..n_bins)
        .map(|b| {
            let members = &order[b * n / n_bins..(b + 1) * n / n_bins];
            let lo = members[0].age;
            let grid = group_average_grid(members.iter().map(|s| &s.rho), &format!("age bin {b}"))?;
            Ok((lo, grid))
        })
        .collect()
}
