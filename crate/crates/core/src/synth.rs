//! Synthetic longitudinal cohort and within-subject pair sampling.
//!
//! Chronological baseline age has the same distribution in every group.
//! Each subject carries a latent age factor
//! `baseline_age + group gap + rate·time` that runs ahead of chronological
//! age for the declining groups.
//! Observations are a fixed smooth nonlinear map of that factor (a sum of
//! scaled sigmoids per dimension, coefficients drawn once per cohort),
//! plus a static per-subject offset in a low-dimensional nuisance subspace
//! and per-visit Gaussian noise. The cognitive score rises linearly with
//! the factor.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "sMCI")]
    Smci,
    #[serde(rename = "pMCI")]
    Pmci,
    #[serde(rename = "AD")]
    Ad,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Nc, Group::Smci, Group::Pmci, Group::Ad];

    /// Progressive MCI or AD.
    pub fn is_severe_decline(self) -> bool {
        matches!(self, Group::Pmci | Group::Ad)
    }

    /// Years by which the latent age factor exceeds chronological age at
    /// baseline.
    pub fn brain_age_gap(self) -> f64 {
        match self {
            Group::Nc => 0.0,
            Group::Smci => 1.0,
            Group::Pmci => 6.0,
            Group::Ad => 9.0,
        }
    }

    fn mean_rate(self) -> f64 {
        match self {
            Group::Nc => 1.0,
            Group::Smci => 1.4,
            Group::Pmci => 2.2,
            Group::Ad => 2.8,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Nc => "NC",
            Group::Smci => "sMCI",
            Group::Pmci => "pMCI",
            Group::Ad => "AD",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NC" => Ok(Group::Nc),
            "sMCI" => Ok(Group::Smci),
            "pMCI" => Ok(Group::Pmci),
            "AD" => Ok(Group::Ad),
            other => Err(Error::invalid(format!("unknown group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub time: f64,
    pub observation: Vec<f64>,
    pub cognitive_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: u32,
    pub group: Group,
    pub baseline_age: f64,
    pub progression_rate: f64,
    pub visits: Vec<Visit>,
}

impl Subject {
    /// Chronological age at a visit time.
    pub fn age_at(&self, time: f64) -> f64 {
        self.baseline_age + time
    }

    pub fn age_factor_at(&self, time: f64) -> f64 {
        self.baseline_age + self.group.brain_age_gap() + self.progression_rate * time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    pub input_dim: usize,
    /// Proportions of NC, sMCI, pMCI, AD.
    pub group_mix: [f64; 4],
    pub noise_sigma: f64,
    /// Scale of the static per-subject offset.
    pub subject_sigma: f64,
    /// Multiplies the whole observation (signal, offset and noise).
    pub observation_scale: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            min_visits: 2,
            max_visits: 4,
            input_dim: 32,
            // ADNI-1 proportions: 185 / 193 / 135 / 119 of 632
            group_mix: [185.0 / 632.0, 193.0 / 632.0, 135.0 / 632.0, 119.0 / 632.0],
            noise_sigma: 0.1,
            subject_sigma: 0.5,
            observation_scale: 0.1,
            seed: 0,
        }
    }
}

const BASELINE_AGE_MEAN: f64 = 75.5;
const BASELINE_AGE_SD: f64 = 6.0;
const SIGMOIDS_PER_DIM: usize = 3;
const NUISANCE_DIMS: usize = 2;
const FACTOR_CENTER: f64 = 77.0;
const FACTOR_SCALE: f64 = 8.0;

/// Fixed map from the age factor to the observation space.
#[derive(Debug, Clone)]
struct ObservationMap {
    amp: Vec<[f64; SIGMOIDS_PER_DIM]>,
    gain: Vec<[f64; SIGMOIDS_PER_DIM]>,
    shift: Vec<[f64; SIGMOIDS_PER_DIM]>,
    nuisance: Vec<[f64; NUISANCE_DIMS]>,
}

impl ObservationMap {
    fn draw(input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut amp = Vec::with_capacity(input_dim);
        let mut gain = Vec::with_capacity(input_dim);
        let mut shift = Vec::with_capacity(input_dim);
        let mut nuisance = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            amp.push(std::array::from_fn(|_| std.sample(rng)));
            gain.push(std::array::from_fn(|_| rng.random_range(0.5..2.5)));
            shift.push(std::array::from_fn(|_| rng.random_range(-1.5..1.5)));
            nuisance.push(std::array::from_fn(|_| std.sample(rng) / (NUISANCE_DIMS as f64).sqrt()));
        }
        Self {
            amp,
            gain,
            shift,
            nuisance,
        }
    }

    fn observe(&self, factor: f64, offset: &[f64; NUISANCE_DIMS]) -> Vec<f64> {
        let s = (factor - FACTOR_CENTER) / FACTOR_SCALE;
        (0..self.amp.len())
            .map(|d| {
                let smooth: f64 = (0..SIGMOIDS_PER_DIM)
                    .map(|k| self.amp[d][k] / (1.0 + (-self.gain[d][k] * (s - self.shift[d][k])).exp()))
                    .sum();
                let static_part: f64 = self.nuisance[d].iter().zip(offset).map(|(u, o)| u * o).sum();
                smooth + static_part
            })
            .collect()
    }
}

fn cognitive_mean(factor: f64) -> f64 {
    5.0 + 0.8 * (factor - 65.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub input_dim: usize,
    pub subjects: Vec<Subject>,
}

/// Flattened per-visit view with covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitRecord<'a> {
    pub subject_id: u32,
    pub subject_index: usize,
    pub group: Group,
    pub time: f64,
    pub age: f64,
    pub age_factor: f64,
    pub cognitive_score: f64,
    pub observation: &'a [f64],
}

/// One ordered within-subject pair `(u, v)` with `time(v) > time(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairRef {
    pub subject: usize,
    pub u: usize,
    pub v: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x_u: Tensor,
    pub x_v: Tensor,
    pub delta_t: Vec<f64>,
    pub subject_ids: Vec<u32>,
    pub age_u: Vec<f64>,
    pub group: Vec<Group>,
    pub cognitive_u: Vec<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.delta_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_t.is_empty()
    }
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    if spec.n_subjects == 0 {
        return Err(Error::invalid("cohort needs at least one subject"));
    }
    if spec.min_visits < 2 || spec.max_visits < spec.min_visits {
        return Err(Error::invalid(format!(
            "visits per subject must satisfy 2 <= min <= max, got {}..={}",
            spec.min_visits, spec.max_visits
        )));
    }
    if spec.input_dim == 0 {
        return Err(Error::invalid("input_dim must be positive"));
    }
    let mix_total: f64 = spec.group_mix.iter().sum();
    if spec.group_mix.iter().any(|p| *p < 0.0) || (mix_total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "group mix must be nonnegative and sum to 1, got {:?}",
            spec.group_mix
        )));
    }
    if !(spec.noise_sigma >= 0.0 && spec.subject_sigma >= 0.0) {
        return Err(Error::invalid("noise scales must be nonnegative"));
    }
    if !(spec.observation_scale > 0.0 && spec.observation_scale.is_finite()) {
        return Err(Error::invalid("observation_scale must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let map = ObservationMap::draw(spec.input_dim, &mut rng);
    let visit_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let subject_noise =
        Normal::new(0.0, spec.subject_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let baseline_age_dist = Normal::new(BASELINE_AGE_MEAN, BASELINE_AGE_SD).unwrap();
    let rate_spread = LogNormal::new(0.0, 0.15).unwrap();
    let score_noise = Normal::new(0.0, 2.0).unwrap();

    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for id in 0..spec.n_subjects {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut group = Group::Ad;
        for (g, p) in Group::ALL.iter().zip(spec.group_mix) {
            acc += p;
            if u < acc {
                group = *g;
                break;
            }
        }
        let baseline_age = baseline_age_dist.sample(&mut rng);
        let progression_rate = group.mean_rate() * rate_spread.sample(&mut rng);
        let offset: [f64; NUISANCE_DIMS] = std::array::from_fn(|_| subject_noise.sample(&mut rng));

        let n_visits = rng.random_range(spec.min_visits..=spec.max_visits);
        let mut time = 0.0;
        let mut visits = Vec::with_capacity(n_visits);
        for k in 0..n_visits {
            if k > 0 {
                time += rng.random_range(0.5..1.5);
            }
            let factor = baseline_age + group.brain_age_gap() + progression_rate * time;
            let mut observation = map.observe(factor, &offset);
            for x in &mut observation {
                *x = (*x + visit_noise.sample(&mut rng)) * spec.observation_scale;
            }
            let cognitive_score = (cognitive_mean(factor) + score_noise.sample(&mut rng)).clamp(0.0, 70.0);
            visits.push(Visit {
                time,
                observation,
                cognitive_score,
            });
        }
        subjects.push(Subject {
            id: id as u32,
            group,
            baseline_age,
            progression_rate,
            visits,
        });
    }
    Ok(Cohort {
        input_dim: spec.input_dim,
        subjects,
    })
}

impl Cohort {
    pub fn n_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    pub fn visits(&self) -> impl Iterator<Item = VisitRecord<'_>> {
        self.subjects.iter().enumerate().flat_map(|(si, s)| {
            s.visits.iter().map(move |v| VisitRecord {
                subject_id: s.id,
                subject_index: si,
                group: s.group,
                time: v.time,
                age: s.age_at(v.time),
                age_factor: s.age_factor_at(v.time),
                cognitive_score: v.cognitive_score,
                observation: &v.observation,
            })
        })
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.visits().map(|v| v.observation.to_vec()).collect()
    }

    /// Every ordered within-subject pair, not only consecutive visits.
    pub fn pairs(&self) -> Vec<PairRef> {
        let mut out = Vec::new();
        for (si, s) in self.subjects.iter().enumerate() {
            for u in 0..s.visits.len() {
                for v in u + 1..s.visits.len() {
                    out.push(PairRef { subject: si, u, v });
                }
            }
        }
        out
    }

    /// Subset of subjects, in the given order.
    pub fn select_subjects(&self, indices: &[usize]) -> Cohort {
        Cohort {
            input_dim: self.input_dim,
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    pub fn make_batch(&self, pairs: &[PairRef]) -> Result<PairBatch> {
        let mut xu = Vec::with_capacity(pairs.len());
        let mut xv = Vec::with_capacity(pairs.len());
        let mut batch = PairBatch {
            x_u: Tensor::zeros(vec![0, self.input_dim]),
            x_v: Tensor::zeros(vec![0, self.input_dim]),
            delta_t: Vec::with_capacity(pairs.len()),
            subject_ids: Vec::with_capacity(pairs.len()),
            age_u: Vec::with_capacity(pairs.len()),
            group: Vec::with_capacity(pairs.len()),
            cognitive_u: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            let s = &self.subjects[p.subject];
            let (vu, vv) = (&s.visits[p.u], &s.visits[p.v]);
            if !(vv.time > vu.time) {
                return Err(Error::invalid(format!(
                    "subject {} visits {} and {} are not strictly ordered in time",
                    s.id, p.u, p.v
                )));
            }
            xu.push(vu.observation.clone());
            xv.push(vv.observation.clone());
            batch.delta_t.push(vv.time - vu.time);
            batch.subject_ids.push(s.id);
            batch.age_u.push(s.age_at(vu.time));
            batch.group.push(s.group);
            batch.cognitive_u.push(vu.cognitive_score);
        }
        if !pairs.is_empty() {
            batch.x_u = Tensor::from_rows(&xu)?;
            batch.x_v = Tensor::from_rows(&xv)?;
        }
        Ok(batch)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["subject_id", "group", "time", "cognitive_score"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.input_dim).map(|d| format!("x{d}")));
        header.push("baseline_age".into());
        header.push("progression_rate".into());
        w.write_record(&header)?;
        for s in &self.subjects {
            for v in &s.visits {
                let mut rec = vec![
                    s.id.to_string(),
                    s.group.to_string(),
                    v.time.to_string(),
                    v.cognitive_score.to_string(),
                ];
                rec.extend(v.observation.iter().map(f64::to_string));
                rec.push(s.baseline_age.to_string());
                rec.push(s.progression_rate.to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<cohort>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            message,
        };
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_err(format!("missing column `{name}`")))
        };
        let (c_id, c_group, c_time, c_score) =
            (col("subject_id")?, col("group")?, col("time")?, col("cognitive_score")?);
        let (c_base, c_rate) = (col("baseline_age")?, col("progression_rate")?);
        let obs_cols: Vec<usize> = (0..)
            .map_while(|d| header.iter().position(|h| h == format!("x{d}")))
            .collect();
        if obs_cols.is_empty() {
            return Err(parse_err("no observation columns x0, x1, ...".into()));
        }

        let mut subjects: Vec<Subject> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec[c]
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("row {}: column {}: {e}", line + 2, &header[c])))
            };
            let id: u32 = rec[c_id]
                .parse()
                .map_err(|e| parse_err(format!("row {}: subject_id: {e}", line + 2)))?;
            let group: Group = rec[c_group]
                .parse()
                .map_err(|e: Error| parse_err(format!("row {}: {e}", line + 2)))?;
            let visit = Visit {
                time: num(c_time)?,
                cognitive_score: num(c_score)?,
                observation: obs_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            };
            match subjects.last_mut() {
                Some(s) if s.id == id => {
                    if !(visit.time > s.visits.last().unwrap().time) {
                        return Err(parse_err(format!(
                            "row {}: visit times of subject {id} are not strictly increasing",
                            line + 2
                        )));
                    }
                    s.visits.push(visit)
                }
                _ => {
                    if subjects.iter().any(|s| s.id == id) {
                        return Err(parse_err(format!(
                            "row {}: rows of subject {id} are not contiguous",
                            line + 2
                        )));
                    }
                    subjects.push(Subject {
                        id,
                        group,
                        baseline_age: num(c_base)?,
                        progression_rate: num(c_rate)?,
                        visits: vec![visit],
                    })
                }
            }
        }
        if subjects.is_empty() {
            return Err(parse_err("cohort file has no rows".into()));
        }
        if let Some(s) = subjects.iter().find(|s| s.visits.len() < 2) {
            return Err(parse_err(format!("subject {} has fewer than two visits", s.id)));
        }
        Ok(Cohort {
            input_dim: obs_cols.len(),
            subjects,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }
}

/// Shuffles all pairs and splits them into batches; the last batch may be
/// short. Each pair appears exactly once per call.
pub fn epoch_batches<R: Rng>(pairs: &[PairRef], batch_size: usize, rng: &mut R) -> Vec<Vec<PairRef>> {
    let mut order = pairs.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[PairRef]>::to_vec).collect()
}

/// One epoch of pair batches drawn without replacement.
pub fn sample_pairs(cohort: &Cohort, batch_size: usize, seed: u64) -> Result<Vec<PairBatch>> {
    if cohort.subjects.is_empty() {
        return Err(Error::invalid("cohort is empty"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    epoch_batches(&cohort.pairs(), batch_size, &mut rng)
        .iter()
        .map(|b| cohort.make_batch(b))
        .collect()
}
