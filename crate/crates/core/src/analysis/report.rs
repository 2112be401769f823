use std::fmt::Write as _;
use std::io::Write;

use super::pca::{grid_edges, trajectory_arrows, PcaProjection};
use super::probe::{ProbeMetrics, ProbeReport, Task};
use super::{Covariate, SampleRecord, SimilarityGrid};
use crate::error::{Error, Result};
use crate::longitudinal::ReferenceTrajectories;
use crate::som::SomGrid;

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// One row per sample: identifiers, assigned cell, flattened ρ, covariates.
pub fn write_samples_csv<W: Write>(samples: &[SampleRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n_cells = samples.first().map_or(0, |s| s.rho.rho.len());
    let mut header: Vec<String> = ["subject_id", "time", "eps_row", "eps_col"].map(String::from).to_vec();
    header.extend((0..n_cells).map(|i| format!("rho_{i}")));
    header.extend(["group", "age", "age_factor", "cognitive_score"].map(String::from));
    w.write_record(&header)?;
    for s in samples {
        let mut rec = vec![
            s.subject_id.to_string(),
            s.time.to_string(),
            s.cell.row.to_string(),
            s.cell.col.to_string(),
        ];
        rec.extend(s.rho.rho.iter().map(f64::to_string));
        rec.extend([
            s.group.to_string(),
            s.age.to_string(),
            s.age_factor.to_string(),
            s.cognitive_score.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn write_dcor_csv<W: Write>(report: &[(Covariate, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["covariate", "dcor"])?;
    for (c, v) in report {
        w.write_record([c.name().to_string(), v.to_string()])?;
    }
    finish(w)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn metrics_row(label: &str, task: Task, m: &ProbeMetrics) -> Vec<String> {
    let task = match task {
        Task::Classification => "classification",
        Task::Regression => "regression",
    };
    vec![
        task.to_string(),
        label.to_string(),
        opt(m.bacc),
        opt(m.auc),
        opt(m.r2),
        opt(m.rmse),
    ]
}

/// Per-fold rows followed by `mean` and `std` rows, for each report.
pub fn write_probe_csv<W: Write>(reports: &[(&str, &ProbeReport)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["target", "task", "fold", "bacc", "auc", "r2", "rmse"])?;
    for (target, r) in reports {
        let rows = r
            .folds
            .iter()
            .enumerate()
            .map(|(k, m)| metrics_row(&k.to_string(), r.task, m))
            .chain([metrics_row("mean", r.task, &r.mean), metrics_row("std", r.task, &r.std)]);
        for row in rows {
            let mut rec = vec![target.to_string()];
            rec.extend(row);
            w.write_record(&rec)?;
        }
    }
    finish(w)
}

/// Latents, SOM nodes, lattice edges and reference arrows in PC space.
/// Edges and arrows store their start in `pc1,pc2` and their extent in
/// `dpc1,dpc2`.
pub fn write_pca_csv<W: Write>(
    pca: &PcaProjection,
    som: &SomGrid,
    refs: &ReferenceTrajectories,
    latents: &[Vec<f64>],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "id", "pc1", "pc2", "dpc1", "dpc2"])?;
    let mut row = |kind: &str, id: String, p: [f64; 2], d: Option<[f64; 2]>| {
        let (d1, d2) = d.map_or((String::new(), String::new()), |d| (d[0].to_string(), d[1].to_string()));
        w.write_record([kind.to_string(), id, p[0].to_string(), p[1].to_string(), d1, d2])
    };
    for (i, z) in latents.iter().enumerate() {
        row("latent", i.to_string(), pca.project(z), None)?;
    }
    let nodes: Vec<[f64; 2]> = som.to_vectors().iter().map(|g| pca.project(g)).collect();
    for (i, p) in nodes.iter().enumerate() {
        row("node", i.to_string(), *p, None)?;
    }
    for (a, b) in grid_edges(som.rows(), som.cols()) {
        let d = [nodes[b][0] - nodes[a][0], nodes[b][1] - nodes[a][1]];
        row("edge", format!("{a}-{b}"), nodes[a], Some(d))?;
    }
    for (cell, start, dir) in trajectory_arrows(pca, som, refs) {
        row("arrow", cell.to_string(), start, Some(dir))?;
    }
    finish(w)
}

const RAMP: [[u8; 3]; 8] = [
    [68, 1, 84],
    [70, 50, 127],
    [54, 92, 141],
    [39, 127, 142],
    [31, 161, 135],
    [74, 193, 109],
    [160, 218, 57],
    [253, 231, 37],
];

fn ramp_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (RAMP[i][k] as f64 + f * (RAMP[i + 1][k] as f64 - RAMP[i][k] as f64)).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Standalone SVG heatmap of a similarity grid, colored from 0 to the
/// grid's maximum.
pub fn heatmap_svg(grid: &SimilarityGrid, title: &str) -> String {
    const CELL: usize = 40;
    const TOP: usize = 30;
    let (w, h) = (grid.cols * CELL, grid.rows * CELL + TOP);
    let max = grid.rho.iter().cloned().fold(0.0, f64::max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(svg, r#"<text x="4" y="20" font-family="sans-serif" font-size="14">{title}</text>"#);
    for (i, r) in grid.rho.iter().enumerate() {
        let (row, col) = (i / grid.cols, i % grid.cols);
        let t = if max > 0.0 { r / max } else { 0.0 };
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>({row},{col}) {r:.4}</title></rect>"#,
            col * CELL,
            TOP + row * CELL,
            ramp_color(t)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp_color(0.0), "#440154");
        assert_eq!(ramp_color(1.0), "#fde725");
        assert_eq!(ramp_color(f64::NAN), "#440154");
    }

    #[test]
    fn svg_has_one_rect_per_cell() {
        let svg = heatmap_svg(&SimilarityGrid::uniform(4, 8), "age < 70");
        assert_eq!(svg.matches("<rect").count(), 32);
        assert!(svg.contains("age &lt; 70"));
    }
}
