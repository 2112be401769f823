use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use longsom::analysis::{
    age_bin_grids, analyze_cohort, cross_validate, dcor_report, group_average_grid, heatmap_svg, write_dcor_csv,
    write_pca_csv, write_probe_csv, write_samples_csv, Covariate, PcaProjection, ProbeConfig, ProbeReport,
    SampleRecord, SimilarityGrid, Task,
};
use longsom::synth::{generate_cohort, Cohort, CohortSpec, Group};
use longsom::trainer::{train as run_train, write_metrics_csv, Checkpoint, TrainConfig, TrainOutcome};
use longsom::som::WeightScheme;

use crate::rundir::{run_name, RunManifest, Staging};
use crate::{AblateArgs, AnalyzeArgs, ConfigFlags, GenArgs, ProbeArgs, RunLocation, TrainArgs};

fn load_cohort(path: &Path) -> Result<Cohort> {
    Cohort::load(path).with_context(|| format!("cannot load cohort {}", path.display()))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Defaults, overlaid by the config file, overlaid by explicit flags.
fn resolve_config(file: Option<&Path>, flags: &ConfigFlags) -> Result<TrainConfig> {
    let base = match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("malformed config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let mut value = serde_json::to_value(base)?;
    if let serde_json::Value::Object(overrides) = serde_json::to_value(flags)? {
        for (k, v) in overrides.into_iter().filter(|(_, v)| !v.is_null()) {
            value[k] = v;
        }
    }
    let config: TrainConfig = serde_json::from_value(value).context("invalid training settings")?;
    config.validate().context("invalid training settings")?;
    Ok(config)
}

fn run_dest(loc: &RunLocation, seed: u64) -> std::path::PathBuf {
    loc.run_dir.clone().unwrap_or_else(|| loc.runs_root.join(run_name(seed)))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> longsom::error::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn gen(a: &GenArgs) -> Result<()> {
    if a.out.exists() && !a.force {
        bail!("{} already exists; pass --force to replace it", a.out.display());
    }
    let spec = CohortSpec {
        n_subjects: a.subjects,
        seed: a.seed,
        input_dim: a.input_dim,
        min_visits: a.min_visits,
        max_visits: a.max_visits,
        noise_sigma: a.noise_sigma,
        subject_sigma: a.subject_sigma,
        observation_scale: a.observation_scale,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec)?;
    let bytes = csv_bytes(|b| cohort.write_csv(b))?;
    let name = a.out.file_name().with_context(|| format!("{} is not a file path", a.out.display()))?;
    let tmp = a.out.with_file_name(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", a.out.display());
    Ok(())
}

/// Trains one configuration and writes its artifacts under `prefix`.
fn train_into(
    staging: &Staging,
    manifest: &mut RunManifest,
    prefix: &str,
    cohort: &Cohort,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let key = |name: &str| format!("{prefix}{name}");
    let artifacts = &mut manifest.artifacts;
    staging.emit(artifacts, &key("config"), &key("config.json"), serde_json::to_string_pretty(config)?.as_bytes())?;

    let start = Instant::now();
    let outcome = run_train(cohort, config, |m, session| {
        if config.checkpoint_every > 0 && (m.epoch + 1) % config.checkpoint_every == 0 {
            let epoch = m.epoch + 1;
            let json = session.checkpoint().to_json()?;
            let rel = key(&format!("checkpoints/epoch_{epoch:03}.json"));
            staging
                .emit(artifacts, &key(&format!("checkpoint_epoch_{epoch:03}")), &rel, json.as_bytes())
                .map_err(|e| longsom::error::Error::InvalidArgument(format!("{e:#}")))?;
        }
        Ok(())
    })
    .with_context(|| format!("training {}", if prefix.is_empty() { "run" } else { prefix.trim_end_matches('/') }))?;
    manifest.timings_seconds.insert(key("train"), start.elapsed().as_secs_f64());

    let artifacts = &mut manifest.artifacts;
    let ckpt = outcome.session.checkpoint().to_json()?;
    staging.emit(artifacts, &key("checkpoint"), &key("checkpoint.json"), ckpt.as_bytes())?;
    let metrics = csv_bytes(|b| write_metrics_csv(&outcome.metrics, b))?;
    staging.emit(artifacts, &key("metrics"), &key("metrics.csv"), &metrics)?;
    let mut pre = String::from("epoch,recon\n");
    for (i, r) in outcome.pretrain.epoch_recon.iter().enumerate() {
        pre.push_str(&format!("{i},{r}\n"));
    }
    staging.emit(artifacts, &key("pretrain"), &key("pretrain.csv"), pre.as_bytes())?;
    Ok(outcome)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let config = resolve_config(a.config.as_deref(), &a.flags)?;
    let cohort = load_cohort(&a.cohort)?;
    let staging = Staging::new(&run_dest(&a.location, config.seed), a.location.force)?;
    let mut manifest = RunManifest::new("train", config.seed, serde_json::to_value(&config)?);
    manifest.inputs.insert("cohort".into(), display(&a.cohort));
    train_into(&staging, &mut manifest, "", &cohort, &config)?;
    manifest.store(staging.dir())?;
    println!("{}", staging.commit()?.display());
    Ok(())
}

fn variant_row(name: &str, config: &TrainConfig, outcome: &TrainOutcome, cohort: &Cohort) -> Result<Vec<String>> {
    let s = &outcome.session;
    let samples = analyze_cohort(&s.model, &s.som, cohort)?;
    let dcor: BTreeMap<&str, f64> = dcor_report(&samples)?.into_iter().map(|(c, v)| (c.name(), v)).collect();
    let scheme = match config.weight_scheme {
        WeightScheme::Soft => "soft",
        WeightScheme::Hard => "hard",
    };
    Ok(vec![
        name.into(),
        scheme.into(),
        config.lambda_dir.to_string(),
        s.empty_cells(cohort)?.to_string(),
        dcor[Covariate::AgeFactor.name()].to_string(),
        dcor[Covariate::CognitiveScore.name()].to_string(),
        outcome.metrics.last().map_or(String::new(), |m| m.total.to_string()),
    ])
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let config = resolve_config(a.config.as_deref(), &a.flags)?;
    let cohort = load_cohort(&a.cohort)?;
    let (hard, no_dir) = if a.hard || a.no_dir { (a.hard, a.no_dir) } else { (true, true) };
    let mut variants = vec![("full", config.clone())];
    if hard {
        variants.push((
            "hard",
            TrainConfig {
                weight_scheme: WeightScheme::Hard,
                ..config.clone()
            },
        ));
    }
    if no_dir {
        variants.push((
            "no_dir",
            TrainConfig {
                lambda_dir: 0.0,
                ..config.clone()
            },
        ));
    }

    let staging = Staging::new(&run_dest(&a.location, config.seed), a.location.force)?;
    let mut manifest = RunManifest::new("ablate", config.seed, serde_json::to_value(&config)?);
    manifest.inputs.insert("cohort".into(), display(&a.cohort));
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record([
        "variant",
        "weight_scheme",
        "lambda_dir",
        "empty_cells",
        "dcor_age_factor",
        "dcor_cognitive_score",
        "final_total",
    ])?;
    for (name, cfg) in &variants {
        let outcome = train_into(&staging, &mut manifest, &format!("{name}/"), &cohort, cfg)?;
        table.write_record(variant_row(name, cfg, &outcome, &cohort)?)?;
    }
    let bytes = table.into_inner().context("flushing comparison table")?;
    staging.emit(&mut manifest.artifacts, "comparison", "comparison.csv", &bytes)?;
    manifest.store(staging.dir())?;
    println!("{}", staging.commit()?.display());
    Ok(())
}

/// Manifest and checkpoint of a single-model run directory.
fn open_run(run: &Path) -> Result<(RunManifest, Checkpoint)> {
    let manifest = RunManifest::load(run)?;
    let rel = manifest
        .artifacts
        .get("checkpoint")
        .with_context(|| format!("{} has no single checkpoint; point --run at a `train` run", run.display()))?;
    let ckpt = Checkpoint::load(&run.join(rel))?;
    Ok((manifest, ckpt))
}

fn grid_rows(kind: &str, label: &str, g: &SimilarityGrid) -> Vec<[String; 5]> {
    (0..g.rho.len())
        .map(|i| {
            [
                kind.into(),
                label.into(),
                (i / g.cols).to_string(),
                (i % g.cols).to_string(),
                g.rho[i].to_string(),
            ]
        })
        .collect()
}

fn group_grids(samples: &[SampleRecord]) -> Result<Vec<(Group, SimilarityGrid)>> {
    Group::ALL
        .iter()
        .filter(|g| samples.iter().any(|s| s.group == **g))
        .map(|&g| {
            let grid = group_average_grid(samples.iter().filter(|s| s.group == g).map(|s| &s.rho), &format!("group {g}"))?;
            Ok((g, grid))
        })
        .collect()
}

/// Adds the artifacts of a committed subdirectory to the run's manifest.
fn record_subdir(run: &Path, mut manifest: RunManifest, sub: &str, artifacts: BTreeMap<String, String>, secs: f64) -> Result<()> {
    manifest.artifacts.retain(|k, _| !k.starts_with(&format!("{sub}.")));
    for (k, v) in artifacts {
        manifest.artifacts.insert(format!("{sub}.{k}"), format!("{sub}/{v}"));
    }
    manifest.timings_seconds.insert(sub.into(), secs);
    manifest.store(run)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let (manifest, ckpt) = open_run(&a.run)?;
    let cohort = load_cohort(&a.cohort)?;
    let start = Instant::now();
    let staging = Staging::new(&a.run.join("analysis"), a.force)?;
    let mut out = BTreeMap::new();

    let samples = analyze_cohort(&ckpt.model, &ckpt.som, &cohort)?;
    staging.emit(&mut out, "samples", "samples.csv", &csv_bytes(|b| write_samples_csv(&samples, b))?)?;
    let dcor = dcor_report(&samples)?;
    staging.emit(&mut out, "dcor", "dcor.csv", &csv_bytes(|b| write_dcor_csv(&dcor, b))?)?;

    let pca = PcaProjection::from_som(&ckpt.som)?;
    let latents: Vec<Vec<f64>> = samples.iter().map(|s| s.latent.clone()).collect();
    let pca_csv = csv_bytes(|b| write_pca_csv(&pca, &ckpt.som, &ckpt.references, &latents, b))?;
    staging.emit(&mut out, "pca", "pca.csv", &pca_csv)?;

    let mut grids = csv::Writer::from_writer(Vec::new());
    grids.write_record(["kind", "label", "row", "col", "rho"])?;
    for (g, grid) in group_grids(&samples)? {
        for r in grid_rows("group", &g.to_string(), &grid) {
            grids.write_record(r)?;
        }
        let svg = heatmap_svg(&grid, &format!("{g}: average similarity"));
        staging.emit(&mut out, &format!("heatmap_group_{g}"), &format!("heatmaps/group_{g}.svg"), svg.as_bytes())?;
    }
    for (k, (lower, grid)) in age_bin_grids(&samples, a.age_bins)?.iter().enumerate() {
        let label = format!("bin{k}");
        for r in grid_rows("age_bin", &label, grid) {
            grids.write_record(r)?;
        }
        let svg = heatmap_svg(grid, &format!("age bin {k} (from {lower:.1} y)"));
        staging.emit(&mut out, &format!("heatmap_age_{label}"), &format!("heatmaps/age_{label}.svg"), svg.as_bytes())?;
    }
    let bytes = grids.into_inner().context("flushing grid table")?;
    staging.emit(&mut out, "grids", "grids.csv", &bytes)?;

    let dir = staging.commit()?;
    record_subdir(&a.run, manifest, "analysis", out, start.elapsed().as_secs_f64())?;
    for (c, v) in &dcor {
        println!("dcor {:<16} {v:.4}", c.name());
    }
    println!("{}", dir.display());
    Ok(())
}

fn classification_target(
    latents: &[Vec<f64>],
    visits: &[(u32, Group, f64)],
    negative: Group,
    positive: Group,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let keep: Vec<usize> = (0..visits.len()).filter(|&i| visits[i].1 == negative || visits[i].1 == positive).collect();
    let x: Vec<Vec<f64>> = keep.iter().map(|&i| latents[i].clone()).collect();
    let y: Vec<f64> = keep.iter().map(|&i| f64::from(u8::from(visits[i].1 == positive))).collect();
    let ids: Vec<u32> = keep.iter().map(|&i| visits[i].0).collect();
    cross_validate(&x, &y, &ids, Task::Classification, config)
        .with_context(|| format!("{negative} vs {positive} probe"))
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    let (manifest, ckpt) = open_run(&a.run)?;
    let cohort = load_cohort(&a.cohort)?;
    let start = Instant::now();
    let config = ProbeConfig {
        folds: a.folds,
        epochs: a.epochs,
        hidden: a.hidden,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let staging = Staging::new(&a.run.join("probe"), a.force)?;
    let latents = ckpt.model.encode_rows(&cohort.observations())?;
    let visits: Vec<(u32, Group, f64)> = cohort.visits().map(|v| (v.subject_id, v.group, v.cognitive_score)).collect();

    let progression = classification_target(&latents, &visits, Group::Smci, Group::Pmci, &config)?;
    let diagnosis = classification_target(&latents, &visits, Group::Nc, Group::Ad, &config)?;
    let scores: Vec<f64> = visits.iter().map(|v| v.2).collect();
    let ids: Vec<u32> = visits.iter().map(|v| v.0).collect();
    let cognition = cross_validate(&latents, &scores, &ids, Task::Regression, &config).context("cognitive score probe")?;

    let reports = [
        ("smci_vs_pmci", &progression),
        ("nc_vs_ad", &diagnosis),
        ("cognitive_score", &cognition),
    ];
    let mut out = BTreeMap::new();
    staging.emit(&mut out, "metrics", "probe.csv", &csv_bytes(|b| write_probe_csv(&reports, b))?)?;
    staging.emit(&mut out, "config", "probe_config.json", serde_json::to_string_pretty(&config)?.as_bytes())?;
    let dir = staging.commit()?;
    record_subdir(&a.run, manifest, "probe", out, start.elapsed().as_secs_f64())?;
    for (name, r) in reports {
        let m = &r.mean;
        let shown: Vec<String> = [("bacc", m.bacc), ("auc", m.auc), ("r2", m.r2), ("rmse", m.rmse)]
            .iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k} {v:.3}")))
            .collect();
        println!("{name:<16} {}", shown.join("  "));
    }
    println!("{}", dir.display());
    Ok(())
}
