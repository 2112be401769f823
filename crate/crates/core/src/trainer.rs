//! Two-phase training: reconstruction-only pretraining followed by k-means
//! initialization of the SOM and training on the full objective
//! `recon + λ_commit·commit + λ_som·som + λ_dir·dir`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::longitudinal::{direction_loss, ema_update, trajectory, BatchTrajectoryStats, ReferenceTrajectories};
use crate::model::{recon_loss, Autoencoder, BoundAutoencoder, LatentPair};
use crate::som::{cell_weights, commit_loss, kmeans_init, som_loss, GridIndex, SomGrid, TauSchedule, WeightScheme};
use crate::synth::{epoch_batches, Cohort, PairBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_commit: f64,
    pub lambda_som: f64,
    pub lambda_dir: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub ema_alpha: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub leaky_slope: f64,
    pub weight_scheme: WeightScheme,
    /// Write an intermediate checkpoint every this many SOM-phase epochs;
    /// 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Standard deviation of additive Gaussian input noise; 0 disables it.
    pub augment_noise: f64,
    /// Mirror the trained grid so reference trajectories point toward
    /// increasing row and column index.
    pub orient_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_commit: 0.5,
            lambda_som: 1.0,
            lambda_dir: 0.2,
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            pretrain_epochs: 10,
            train_epochs: 40,
            batch_size: 64,
            ema_alpha: 0.99,
            tau_min: 0.1,
            tau_max: 1.0,
            grid_rows: 4,
            grid_cols: 8,
            seed: 0,
            latent_dim: 64,
            hidden_dims: vec![64, 64],
            leaky_slope: 0.2,
            weight_scheme: WeightScheme::Soft,
            checkpoint_every: 0,
            augment_noise: 0.0,
            orient_grid: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_commit, self.lambda_som, self.lambda_dir];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be nonnegative, got {lambdas:?}")));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(Error::invalid(format!("ema_alpha must lie in (0, 1), got {}", self.ema_alpha)));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) {
            return Err(Error::invalid("need 0 < tau_min <= tau_max"));
        }
        if self.batch_size == 0 || self.grid_rows == 0 || self.grid_cols == 0 || self.latent_dim == 0 {
            return Err(Error::invalid(
                "batch_size, grid_rows, grid_cols and latent_dim must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.augment_noise >= 0.0) {
            return Err(Error::invalid(
                "learning_rate must be positive; weight_decay and augment_noise nonnegative",
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-iteration loss values and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub commit: f64,
    pub som: f64,
    pub dir: f64,
    pub total: f64,
    pub tau: f64,
    pub uninit_cells: usize,
    pub excluded_dir_samples: usize,
}

/// Nodes of one assembled objective on a tape.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub recon: Var,
    pub commit: Var,
    pub som: Var,
    pub dir: Var,
    /// Constant reference rows used by the direction term.
    pub dir_references: Option<Var>,
    pub model: BoundAutoencoder,
    pub grid: Var,
    pub z_u: Var,
    pub z_v: Var,
    pub delta_z: Var,
    pub eps_u: Vec<GridIndex>,
    pub eps_v: Vec<GridIndex>,
    pub breakdown: LossBreakdown,
}

fn check_finite(component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
            value,
        })
    }
}

fn rows_of(tape: &Tape, x: Var) -> Vec<Vec<f64>> {
    tape.to_tensor(x).to_rows()
}

/// Places the full objective for one batch on `tape` at temperature `tau`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    x_u: &Tensor,
    x_v: &Tensor,
    delta_t: &[f64],
    model: &Autoencoder,
    som: &SomGrid,
    refs: &ReferenceTrajectories,
    config: &TrainConfig,
    tau: f64,
) -> Result<LossGraph> {
    let bound = model.bind(tape);
    let grid = som.bind(tape);
    let xu = tape.leaf(x_u);
    let xv = tape.leaf(x_v);
    let pair = LatentPair::encode(tape, &bound, xu, xv, delta_t)?;

    let eps_u = som.nearest_all(&rows_of(tape, pair.z_u))?;
    let eps_v = som.nearest_all(&rows_of(tape, pair.z_v))?;
    let g_u = som.gather(tape, grid, &eps_u)?;
    let g_v = som.gather(tape, grid, &eps_v)?;

    let (rows, cols) = (som.rows(), som.cols());
    let weights = |eps: &[GridIndex]| -> Result<Vec<_>> {
        eps.iter()
            .map(|e| cell_weights(config.weight_scheme, *e, rows, cols, tau))
            .collect()
    };
    let (w_u, w_v) = (weights(&eps_u)?, weights(&eps_v)?);

    let recon = recon_loss(tape, &bound.decoder, xu, xv, pair.z_u, pair.z_v, Some(g_u), Some(g_v))?;
    let commit = commit_loss(tape, pair.z_u, pair.z_v, g_u, g_v)?;
    let som_term = som_loss(tape, som, grid, pair.z_u, pair.z_v, &w_u, &w_v)?;
    let delta_z = trajectory(tape, pair.z_u, pair.z_v, &pair.delta_t)?;
    let dir = direction_loss(tape, delta_z, refs, &eps_u)?;

    let c = tape.scale(commit, config.lambda_commit);
    let s = tape.scale(som_term, config.lambda_som);
    let d = tape.scale(dir.loss, config.lambda_dir);
    let mut total = tape.add(recon, c)?;
    total = tape.add(total, s)?;
    total = tape.add(total, d)?;

    let breakdown = LossBreakdown {
        recon: tape.item(recon),
        commit: tape.item(commit),
        som: tape.item(som_term),
        dir: tape.item(dir.loss),
        total: tape.item(total),
        tau,
        uninit_cells: refs.uninitialized_count(),
        excluded_dir_samples: dir.excluded,
    };
    for (name, v) in [
        ("reconstruction loss", breakdown.recon),
        ("commitment loss", breakdown.commit),
        ("SOM loss", breakdown.som),
        ("direction loss", breakdown.dir),
        ("total loss", breakdown.total),
    ] {
        check_finite(name, v)?;
    }

    Ok(LossGraph {
        total,
        recon,
        commit,
        som: som_term,
        dir: dir.loss,
        dir_references: dir.references,
        model: bound,
        grid,
        z_u: pair.z_u,
        z_v: pair.z_v,
        delta_z,
        eps_u,
        eps_v,
        breakdown,
    })
}

/// Per-epoch averages written to the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub commit: f64,
    pub som: f64,
    pub dir: f64,
    pub total: f64,
    pub tau: f64,
    pub uninit_cells: usize,
    pub excluded_dir_samples: usize,
}

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "recon",
    "commit",
    "som",
    "dir",
    "total",
    "tau",
    "uninit_cells",
    "excluded_dir_samples",
];

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.recon.to_string(),
            m.commit.to_string(),
            m.som.to_string(),
            m.dir.to_string(),
            m.total.to_string(),
            m.tau.to_string(),
            m.uninit_cells.to_string(),
            m.excluded_dir_samples.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "longsom-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state. SOM and reference cells are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub iteration: u64,
    pub model: Autoencoder,
    pub som: SomGrid,
    pub references: ReferenceTrajectories,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.encoder.validate()?;
        ckpt.model.decoder.validate()?;
        let som = &ckpt.som;
        let reps = som.representations();
        if reps.shape() != [som.n_cells(), som.dim()] || reps.len() != som.n_cells() * som.dim() {
            return Err(Error::invalid("checkpoint SOM grid has inconsistent shape"));
        }
        let refs = &ckpt.references;
        if (refs.rows(), refs.cols(), refs.dim()) != (som.rows(), som.cols(), som.dim())
            || refs.values().len() != som.n_cells() * som.dim()
            || refs.initialized_flags().len() != som.n_cells()
        {
            return Err(Error::invalid("checkpoint references do not match the SOM grid"));
        }
        if som.dim() != ckpt.model.latent_dim() {
            return Err(Error::invalid("checkpoint SOM dim differs from latent dim"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn augment(x: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let mut out = x.clone();
    out.values_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    out
}

/// Result of the reconstruction-only phase.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Mean reconstruction loss of each epoch.
    pub epoch_recon: Vec<f64>,
}

/// Mutable training state across both phases.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: TrainConfig,
    pub model: Autoencoder,
    pub som: SomGrid,
    pub refs: ReferenceTrajectories,
    iteration: u64,
    total_iterations: u64,
    epochs_done: usize,
    schedule: TauSchedule,
    adam: AdamState,
    rng: ChaCha8Rng,
    last_counts: Vec<usize>,
}

/// Fresh model initialized from `config.seed`.
pub fn init_model(input_dim: usize, config: &TrainConfig) -> Result<(Autoencoder, ChaCha8Rng)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Autoencoder::new(input_dim, &config.hidden_dims, config.latent_dim, config.leaky_slope, &mut rng)?;
    Ok((model, rng))
}

/// Trains only the `‖x − H(z)‖²` terms for `pretrain_epochs`, then sets
/// the SOM grid to k-means centers of all training latents.
pub fn pretrain(
    model: &mut Autoencoder,
    cohort: &Cohort,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SomGrid, PretrainReport)> {
    let pairs = cohort.pairs();
    if pairs.is_empty() {
        return Err(Error::invalid("cohort has no longitudinal pairs"));
    }
    let mut adam = AdamState::new(config.learning_rate, config.weight_decay);
    let mut epoch_recon = Vec::with_capacity(config.pretrain_epochs);
    for _ in 0..config.pretrain_epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(&pairs, config.batch_size, rng);
        for refs in &batches {
            let batch = cohort.make_batch(refs)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xu = augment(&batch.x_u, config.augment_noise, rng);
            let xv = augment(&batch.x_v, config.augment_noise, rng);
            let xu = tape.leaf(&xu);
            let xv = tape.leaf(&xv);
            let zu = bound.encode(&mut tape, xu)?;
            let zv = bound.encode(&mut tape, xv)?;
            let loss = recon_loss(&mut tape, &bound.decoder, xu, xv, zu, zv, None, None)?;
            check_finite("pretraining reconstruction loss", tape.item(loss))?;
            sum += tape.item(loss);
            tape.backward(loss)?;
            model.write_grads(&tape, &bound)?;
            adam.step(&mut model.named_params_mut())?;
        }
        epoch_recon.push(sum / batches.len() as f64);
    }

    let latents = model.encode_rows(&cohort.observations())?;
    let som = kmeans_init(&latents, config.grid_rows, config.grid_cols, rng.random())?;
    Ok((som, PretrainReport { epoch_recon }))
}

impl Session {
    /// Pretrains a fresh model on `cohort` and prepares the SOM phase.
    pub fn start(cohort: &Cohort, config: &TrainConfig) -> Result<(Self, PretrainReport)> {
        let (mut model, mut rng) = init_model(cohort.input_dim, config)?;
        let (som, report) = pretrain(&mut model, cohort, config, &mut rng)?;
        let session = Self::from_parts(cohort, config, model, som, rng)?;
        Ok((session, report))
    }

    pub fn from_parts(
        cohort: &Cohort,
        config: &TrainConfig,
        model: Autoencoder,
        som: SomGrid,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let per_epoch = cohort.pairs().len().div_ceil(config.batch_size) as u64;
        let total_iterations = (config.train_epochs as u64 * per_epoch).max(1);
        let refs = ReferenceTrajectories::new(som.rows(), som.cols(), som.dim());
        Ok(Self {
            config: config.clone(),
            model,
            som,
            refs,
            iteration: 0,
            total_iterations,
            epochs_done: 0,
            schedule: TauSchedule::new(config.tau_min, config.tau_max, total_iterations)?,
            adam: AdamState::new(config.learning_rate, config.weight_decay),
            rng,
            last_counts: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_iterations
    }

    /// Per-cell sample counts of the most recent step's batch.
    pub fn last_batch_counts(&self) -> &[usize] {
        &self.last_counts
    }

    pub fn tau(&self) -> f64 {
        self.schedule
            .tau_at(self.som.n_cells(), self.iteration as i64)
            .expect("iteration is nonnegative")
    }

    /// One optimizer step on `batch` followed by the EMA update of the
    /// reference trajectories from this step's (detached) trajectories.
    pub fn step(&mut self, batch: &PairBatch) -> Result<LossBreakdown> {
        let tau = self.tau();
        let xu = augment(&batch.x_u, self.config.augment_noise, &mut self.rng);
        let xv = augment(&batch.x_v, self.config.augment_noise, &mut self.rng);
        let mut tape = Tape::new();
        let graph = total_loss(
            &mut tape,
            &xu,
            &xv,
            &batch.delta_t,
            &self.model,
            &self.som,
            &self.refs,
            &self.config,
            tau,
        )?;
        tape.backward(graph.total)?;
        self.model.write_grads(&tape, &graph.model)?;
        tape.write_grad(graph.grid, self.som.representations_mut())?;
        {
            let mut params = self.model.named_params_mut();
            params.push(("som".to_string(), self.som.representations_mut()));
            self.adam.step(&mut params)?;
        }
        check_finite(
            "SOM representations after update",
            self.som.representations().values().iter().sum(),
        )?;

        let delta_z = rows_of(&tape, graph.delta_z);
        let stats = BatchTrajectoryStats::accumulate(&delta_z, &graph.eps_u, self.som.rows(), self.som.cols())?;
        ema_update(&mut self.refs, &stats, self.config.ema_alpha, self.iteration)?;
        self.last_counts = stats.counts().to_vec();
        self.iteration += 1;

        let mut breakdown = graph.breakdown;
        breakdown.uninit_cells = self.refs.uninitialized_count();
        Ok(breakdown)
    }

    /// One pass over all pairs of `cohort`.
    pub fn train_epoch(&mut self, cohort: &Cohort) -> Result<EpochMetrics> {
        let batches = epoch_batches(&cohort.pairs(), self.config.batch_size, &mut self.rng);
        let mut acc = LossBreakdown::default();
        for refs in &batches {
            let batch = cohort.make_batch(refs)?;
            let b = self.step(&batch)?;
            acc.recon += b.recon;
            acc.commit += b.commit;
            acc.som += b.som;
            acc.dir += b.dir;
            acc.total += b.total;
            acc.tau += b.tau;
            acc.excluded_dir_samples += b.excluded_dir_samples;
        }
        let n = batches.len().max(1) as f64;
        self.epochs_done += 1;
        Ok(EpochMetrics {
            epoch: self.epochs_done,
            recon: acc.recon / n,
            commit: acc.commit / n,
            som: acc.som / n,
            dir: acc.dir / n,
            total: acc.total / n,
            tau: acc.tau / n,
            uninit_cells: self.refs.uninitialized_count(),
            excluded_dir_samples: acc.excluded_dir_samples,
        })
    }

    /// Mirrors grid rows and/or columns so that, along each grid axis, the
    /// projection of the representations onto the mean reference
    /// trajectory increases. Returns the applied `(flip_rows, flip_cols)`.
    pub fn orient_grid(&mut self) -> (bool, bool) {
        let (flip_rows, flip_cols) = aging_orientation(&self.som, &self.refs);
        if flip_rows || flip_cols {
            self.som.flip(flip_rows, flip_cols);
            self.refs.flip(flip_rows, flip_cols);
        }
        (flip_rows, flip_cols)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            model: self.model.clone(),
            som: self.som.clone(),
            references: self.refs.clone(),
        }
    }

    /// Cells to which no visit of `cohort` is nearest.
    pub fn empty_cells(&self, cohort: &Cohort) -> Result<usize> {
        let counts = cell_occupancy(&self.model, &self.som, cohort)?;
        Ok(counts.iter().filter(|c| **c == 0).count())
    }
}

/// Number of visits of `cohort` assigned to each cell.
pub fn cell_occupancy(model: &Autoencoder, som: &SomGrid, cohort: &Cohort) -> Result<Vec<usize>> {
    let latents = model.encode_rows(&cohort.observations())?;
    let mut counts = vec![0usize; som.n_cells()];
    for e in som.nearest_all(&latents)? {
        counts[e.linear(som.cols())] += 1;
    }
    Ok(counts)
}

fn axis_trend(values: &[f64], coord: impl Fn(usize) -> f64) -> f64 {
    let n = values.len() as f64;
    let mv = values.iter().sum::<f64>() / n;
    let mc = (0..values.len()).map(&coord).sum::<f64>() / n;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mv) * (coord(i) - mc))
        .sum()
}

/// Which axes to mirror so that aging runs toward higher indices.
pub fn aging_orientation(som: &SomGrid, refs: &ReferenceTrajectories) -> (bool, bool) {
    let d = som.dim();
    let mut mean = vec![0.0; d];
    for cell in som.cells() {
        if let Some(g) = refs.get(cell) {
            mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
        }
    }
    if mean.iter().all(|v| *v == 0.0) {
        return (false, false);
    }
    let scores: Vec<f64> = som
        .to_vectors()
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| a * b).sum())
        .collect();
    let cols = som.cols();
    let row_trend = axis_trend(&scores, |i| (i / cols) as f64);
    let col_trend = axis_trend(&scores, |i| (i % cols) as f64);
    (row_trend < 0.0, col_trend < 0.0)
}

/// Outcome of a complete training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub session: Session,
    pub pretrain: PretrainReport,
    pub metrics: Vec<EpochMetrics>,
}

/// Pretraining plus `train_epochs` of the full objective. `on_epoch` runs
/// after every SOM-phase epoch (e.g. to write periodic checkpoints).
pub fn train<F>(cohort: &Cohort, config: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics, &Session) -> Result<()>,
{
    let (mut session, pretrain) = Session::start(cohort, config)?;
    let mut metrics = Vec::with_capacity(config.train_epochs);
    for _ in 0..config.train_epochs {
        let m = session.train_epoch(cohort)?;
        on_epoch(&m, &session)?;
        metrics.push(m);
    }
    if config.orient_grid {
        session.orient_grid();
    }
    Ok(TrainOutcome {
        session,
        pretrain,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 2,
            train_epochs: 2,
            batch_size: 16,
            latent_dim: 8,
            hidden_dims: vec![16],
            grid_rows: 2,
            grid_cols: 3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn small_cohort() -> Cohort {
        generate_cohort(&CohortSpec {
            n_subjects: 30,
            input_dim: 6,
            seed: 1,
            ..CohortSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lambda_commit, c.lambda_som, c.lambda_dir),
            (0.5, 1.0, 0.2)
        );
        assert_eq!((c.learning_rate, c.weight_decay), (5e-4, 1e-5));
        assert_eq!((c.pretrain_epochs, c.train_epochs, c.batch_size), (10, 40, 64));
        assert_eq!((c.ema_alpha, c.tau_min, c.tau_max), (0.99, 0.1, 1.0));
        assert_eq!((c.grid_rows, c.grid_cols), (4, 8));
    }

    #[test]
    fn config_json_uses_field_names_and_rejects_unknown_keys() {
        let cfg = TrainConfig::from_json(r#"{"lambda_dir": 0.0, "grid_cols": 5}"#).unwrap();
        assert_eq!(cfg.lambda_dir, 0.0);
        assert_eq!(cfg.grid_cols, 5);
        assert_eq!(cfg.lambda_som, 1.0);
        assert!(TrainConfig::from_json(r#"{"lambda_sum": 1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"ema_alpha": 1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lambda_som": -1.0}"#).is_err());
    }

    fn one_graph(config: &TrainConfig) -> (Tape, LossGraph) {
        let cohort = small_cohort();
        let (model, mut rng) = init_model(cohort.input_dim, config).unwrap();
        let latents = model.encode_rows(&cohort.observations()).unwrap();
        let som = kmeans_init(&latents, config.grid_rows, config.grid_cols, 0).unwrap();
        let refs = ReferenceTrajectories::new(som.rows(), som.cols(), som.dim());
        let batch = cohort
            .make_batch(&epoch_batches(&cohort.pairs(), 16, &mut rng)[0])
            .unwrap();
        let mut tape = Tape::new();
        let g = total_loss(
            &mut tape, &batch.x_u, &batch.x_v, &batch.delta_t, &model, &som, &refs, config, 2.0,
        )
        .unwrap();
        (tape, g)
    }

    #[test]
    fn breakdown_identity_holds() {
        let cfg = small_config();
        let (_, g) = one_graph(&cfg);
        let b = g.breakdown;
        let expect = b.recon + cfg.lambda_commit * b.commit + cfg.lambda_som * b.som + cfg.lambda_dir * b.dir;
        assert!((b.total - expect).abs() < 1e-6);
        assert_eq!(b.uninit_cells, 6);
        assert_eq!(b.excluded_dir_samples, 16);
    }

    #[test]
    fn zero_lambdas_reduce_total_to_recon() {
        let cfg = TrainConfig {
            lambda_commit: 0.0,
            lambda_som: 0.0,
            lambda_dir: 0.0,
            ..small_config()
        };
        let (_, g) = one_graph(&cfg);
        assert_eq!(g.breakdown.total, g.breakdown.recon);
    }

    #[test]
    fn zero_epoch_pretraining_keeps_model_and_still_clusters() {
        let cohort = small_cohort();
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            ..small_config()
        };
        let (mut model, mut rng) = init_model(cohort.input_dim, &cfg).unwrap();
        let before = model.clone();
        let (som, report) = pretrain(&mut model, &cohort, &cfg, &mut rng).unwrap();
        assert_eq!(model, before);
        assert!(report.epoch_recon.is_empty());
        assert_eq!(som.n_cells(), 6);
    }

    #[test]
    fn pretrained_grid_is_a_lloyd_fixed_point() {
        let cohort = small_cohort();
        let cfg = small_config();
        let (mut model, mut rng) = init_model(cohort.input_dim, &cfg).unwrap();
        let (som, report) = pretrain(&mut model, &cohort, &cfg, &mut rng).unwrap();
        assert_eq!(report.epoch_recon.len(), 2);
        let latents = model.encode_rows(&cohort.observations()).unwrap();
        let assign = som.nearest_all(&latents).unwrap();
        for cell in som.cells() {
            let members: Vec<&Vec<f64>> = latents.iter().zip(&assign).filter(|(_, a)| **a == cell).map(|(z, _)| z).collect();
            assert!(!members.is_empty());
            for (k, g) in som.representation(cell).iter().enumerate() {
                let mean = members.iter().map(|z| z[k]).sum::<f64>() / members.len() as f64;
                assert!((g - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let cohort = small_cohort();
        let cfg = small_config();
        let a = train(&cohort, &cfg, |_, _| Ok(())).unwrap();
        let b = train(&cohort, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.session.checkpoint().to_json().unwrap(), b.session.checkpoint().to_json().unwrap());
        assert_eq!(a.metrics.len(), 2);
        let mut buf = Vec::new();
        write_metrics_csv(&a.metrics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,recon,commit,som,dir,total,tau,uninit_cells,excluded_dir_samples\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cohort = small_cohort();
        let out = train(&cohort, &small_config(), |_, _| Ok(())).unwrap();
        let ckpt = out.session.checkpoint();
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), ckpt.to_json().unwrap());
        let mut tampered: serde_json::Value = serde_json::from_str(&ckpt.to_json().unwrap()).unwrap();
        tampered["version"] = 99.into();
        assert!(Checkpoint::from_json(&tampered.to_string()).is_err());
    }

    #[test]
    fn non_finite_input_aborts_with_component_name() {
        let cohort = small_cohort();
        let cfg = small_config();
        let (mut session, _) = Session::start(&cohort, &cfg).unwrap();
        let mut batch = cohort.make_batch(&cohort.pairs()[..4]).unwrap();
        batch.x_u.values_mut()[0] = f64::INFINITY;
        let err = session.step(&batch).unwrap_err().to_string();
        assert!(err.contains("non-finite") || err.contains("NaN"), "{err}");
    }

    #[test]
    fn orientation_points_aging_toward_higher_columns() {
        // representations increase along -x with column; references point +x
        let vectors: Vec<Vec<f64>> = (0..6).map(|i| vec![-((i % 3) as f64), (i / 3) as f64]).collect();
        let som = SomGrid::from_vectors(2, 3, &vectors).unwrap();
        let refs = ReferenceTrajectories::from_parts(2, 3, 2, [1.0, 0.0].repeat(6), vec![true; 6]).unwrap();
        assert_eq!(aging_orientation(&som, &refs), (false, true));
    }
}
