//! Two-layer MLP probes on frozen latents, evaluated with subject-level
//! cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub folds: usize,
    /// Share of each fold's training subjects held out for model selection.
    pub val_fraction: f64,
    pub slope: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 100,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            folds: 5,
            val_fraction: 0.1,
            slope: 0.2,
            seed: 0,
        }
    }
}

/// Classification fields are set for classification probes and regression
/// fields for regression probes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub bacc: Option<f64>,
    pub auc: Option<f64>,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
}

impl ProbeMetrics {
    fn fields(&self) -> [Option<f64>; 4] {
        [self.bacc, self.auc, self.r2, self.rmse]
    }

    fn from_fields(f: [Option<f64>; 4]) -> Self {
        Self {
            bacc: f[0],
            auc: f[1],
            r2: f[2],
            rmse: f[3],
        }
    }
}

/// Balanced accuracy at threshold 0.5 and Mann–Whitney AUC.
pub fn classification_metrics(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("classification metrics need both classes present"));
    }
    let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= 0.5).count();
    let tn = scores.iter().zip(labels).filter(|(s, l)| !**l && **s < 0.5).count();
    let bacc = 0.5 * (tp as f64 / n_pos as f64 + tn as f64 / n_neg as f64);

    // midranks handle ties as one half
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok((bacc, u / (n_pos * n_neg) as f64))
}

/// Coefficient of determination and root-mean-square error.
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::invalid("predictions and targets differ in length"));
    }
    if targets.len() < 2 {
        return Err(Error::invalid("regression metrics need at least 2 samples"));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::invalid("R2 is undefined for zero-variance targets"));
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((1.0 - ss_res / ss_tot, (ss_res / n).sqrt()))
}

fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let p = rows[0].len();
    let mean: Vec<f64> = (0..p).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std = (0..p)
        .map(|k| {
            let s = (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// A trained probe together with its input/target standardization.
#[derive(Debug, Clone)]
pub struct FittedProbe {
    pub task: Task,
    net: Mlp,
    x_mean: Vec<f64>,
    x_std: Vec<f64>,
    y_mean: f64,
    y_std: f64,
}

impl FittedProbe {
    fn standardize(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().enumerate().map(|(k, v)| (v - self.x_mean[k]) / self.x_std[k]).collect())
            .collect()
    }

    fn raw_outputs(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.net.apply(&self.standardize(rows))?.into_iter().map(|r| r[0]).collect())
    }

    /// Probabilities for classification, target-scale values for regression.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let out = self.raw_outputs(rows)?;
        Ok(match self.task {
            Task::Classification => out.into_iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect(),
            Task::Regression => out.into_iter().map(|v| v * self.y_std + self.y_mean).collect(),
        })
    }

    fn loss_on(&self, rows: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
        let out = self.raw_outputs(rows)?;
        let n = targets.len() as f64;
        Ok(match self.task {
            Task::Classification => {
                out.iter()
                    .zip(targets)
                    .map(|(l, y)| l.max(0.0) + (-l.abs()).exp().ln_1p() - y * l)
                    .sum::<f64>()
                    / n
            }
            Task::Regression => {
                out.iter()
                    .zip(targets)
                    .map(|(o, y)| (o - (y - self.y_mean) / self.y_std).powi(2))
                    .sum::<f64>()
                    / n
            }
        })
    }
}

/// Trains a probe on `(x, y)`; when validation data is given, keeps the
/// epoch with the lowest validation loss. Classification targets are 0/1.
pub fn fit_probe(
    x: &[Vec<f64>],
    y: &[f64],
    validation: Option<(&[Vec<f64>], &[f64])>,
    task: Task,
    config: &ProbeConfig,
    seed: u64,
) -> Result<FittedProbe> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("probe needs a nonempty training set with one target per row"));
    }
    if task == Task::Classification {
        let pos = y.iter().filter(|v| **v == 1.0).count();
        if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("classification targets must be 0 or 1"));
        }
        if pos == 0 || pos == y.len() {
            return Err(Error::invalid("probe training split contains a single class"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x_mean, x_std) = column_stats(x);
    let (y_mean, y_std) = match task {
        Task::Classification => (0.0, 1.0),
        Task::Regression => {
            let (m, s) = column_stats(&y.iter().map(|v| vec![*v]).collect::<Vec<_>>());
            (m[0], s[0])
        }
    };
    let mut probe = FittedProbe {
        task,
        net: Mlp::new(&[x[0].len(), config.hidden, 1], config.slope, &mut rng)?,
        x_mean,
        x_std,
        y_mean,
        y_std,
    };
    let xs = probe.standardize(x);
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

    let mut adam = AdamState::new(config.learning_rate, config.weight_decay);
    let mut best: Option<(f64, Mlp)> = None;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let mut tape = Tape::new();
            let bound = probe.net.bind(&mut tape);
            let input = tape.leaf(&Tensor::from_rows(&rows)?);
            let out = bound.forward(&mut tape, input)?;
            let t = tape.constant(vec![chunk.len(), 1], targets)?;
            let loss = match task {
                Task::Classification => {
                    let sp = tape.softplus(out);
                    let yl = tape.mul(t, out)?;
                    let per = tape.sub(sp, yl)?;
                    tape.mean(per)?
                }
                Task::Regression => {
                    let r = tape.sub(out, t)?;
                    let r2 = tape.mul(r, r)?;
                    tape.mean(r2)?
                }
            };
            tape.backward(loss)?;
            probe.net.write_grads(&tape, &bound)?;
            adam.step(&mut probe.net.named_params_mut("probe"))?;
        }
        if let Some((vx, vy)) = validation {
            if !vx.is_empty() {
                let l = probe.loss_on(vx, vy)?;
                if best.as_ref().is_none_or(|(b, _)| l < *b) {
                    best = Some((l, probe.net.clone()));
                }
            }
        }
    }
    if let Some((_, net)) = best {
        probe.net = net;
    }
    Ok(probe)
}

/// Fold index for every sample such that all samples of one subject share
/// a fold.
pub fn subject_folds(subject_ids: &[u32], folds: usize, seed: u64) -> Vec<usize> {
    let mut subjects: Vec<u32> = subject_ids.to_vec();
    subjects.sort_unstable();
    subjects.dedup();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of = |id: &u32| subjects.iter().position(|s| s == id).unwrap() % folds;
    subject_ids.iter().map(fold_of).collect()
}

/// Per-fold metrics with their mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: Task,
    pub folds: Vec<ProbeMetrics>,
    pub mean: ProbeMetrics,
    pub std: ProbeMetrics,
}

fn summarize(task: Task, folds: Vec<ProbeMetrics>) -> ProbeReport {
    let k = folds.len() as f64;
    let mut mean = [None; 4];
    let mut std = [None; 4];
    for f in 0..4 {
        let vals: Vec<f64> = folds.iter().filter_map(|m| m.fields()[f]).collect();
        if vals.len() == folds.len() && !vals.is_empty() {
            let m = vals.iter().sum::<f64>() / k;
            mean[f] = Some(m);
            std[f] = Some((vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / k).sqrt());
        }
    }
    ProbeReport {
        task,
        folds,
        mean: ProbeMetrics::from_fields(mean),
        std: ProbeMetrics::from_fields(std),
    }
}

/// Subject-level k-fold cross-validation. Within each training split a
/// `val_fraction` share of subjects (at least one) is held out for model
/// selection.
pub fn cross_validate(
    features: &[Vec<f64>],
    targets: &[f64],
    subject_ids: &[u32],
    task: Task,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if features.len() != targets.len() || features.len() != subject_ids.len() {
        return Err(Error::invalid("features, targets and subject ids differ in length"));
    }
    if config.folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    let fold = subject_folds(subject_ids, config.folds, config.seed);
    let mut results = Vec::with_capacity(config.folds);
    for k in 0..config.folds {
        let test: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] == k).collect();
        let train_ids: Vec<u32> = (0..fold.len()).filter(|&i| fold[i] != k).map(|i| subject_ids[i]).collect();
        let mut uniq = train_ids.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + k as u64));
        uniq.shuffle(&mut rng);
        let n_val = ((uniq.len() as f64 * config.val_fraction).ceil() as usize).min(uniq.len().saturating_sub(1));
        let val_subjects = &uniq[..n_val];

        let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in (0..fold.len()).filter(|&i| fold[i] != k) {
            if val_subjects.contains(&subject_ids[i]) {
                vx.push(features[i].clone());
                vy.push(targets[i]);
            } else {
                tx.push(features[i].clone());
                ty.push(targets[i]);
            }
        }
        let probe = fit_probe(&tx, &ty, Some((&vx, &vy)), task, config, config.seed.wrapping_add(100 + k as u64))?;
        let test_x: Vec<Vec<f64>> = test.iter().map(|&i| features[i].clone()).collect();
        let test_y: Vec<f64> = test.iter().map(|&i| targets[i]).collect();
        let pred = probe.predict(&test_x)?;
        results.push(match task {
            Task::Classification => {
                let labels: Vec<bool> = test_y.iter().map(|v| *v == 1.0).collect();
                let (bacc, auc) = classification_metrics(&pred, &labels)?;
                ProbeMetrics {
                    bacc: Some(bacc),
                    auc: Some(auc),
                    ..ProbeMetrics::default()
                }
            }
            Task::Regression => {
                let (r2, rmse) = regression_metrics(&pred, &test_y)?;
                ProbeMetrics {
                    r2: Some(r2),
                    rmse: Some(rmse),
                    ..ProbeMetrics::default()
                }
            }
        });
    }
    Ok(summarize(task, results))
}
