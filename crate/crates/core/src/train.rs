//! Gradient training of tabular encoders and teacher-guided batch resampling.
//!
//! Population training runs gradient descent on the factor matrices
//! `F = sqrt(p) f`, where the spectral loss is a plain low-rank factorization
//! residual. Sampled training steps the feature rows directly with the same
//! `1 / p` row scaling so that its expected update matches the population one.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{
    normalize_cooccurrence, normalize_induced, InducedDistribution, JointDistribution,
};
use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;
use crate::losses::{Batch, BatchSampler, EncoderTable, Pair, Side};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BatchMode {
    Population,
    Sampled { batch_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once the absolute loss change of one step falls below this.
    pub tolerance: f64,
    pub batch: BatchMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            learning_rate: 0.1,
            max_steps: 50_000,
            tolerance: 1e-13,
            batch: BatchMode::Population,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if let BatchMode::Sampled { batch_size } = self.batch {
            if batch_size == 0 || batch_size % 3 != 0 {
                return Err(Error::InvalidBatchSize(batch_size));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    Converged,
    /// Population run that hit `max_steps`; the tables hold the last iterate.
    DidNotConverge,
    /// Sampled run, which always performs `max_steps` updates.
    FixedSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmclOutcome {
    pub visual: EncoderTable,
    pub language: EncoderTable,
    /// Population spectral loss per step, or the batch loss in sampled mode.
    pub history: Vec<f64>,
    pub status: TrainStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsclOutcome {
    pub features: EncoderTable,
    pub history: Vec<f64>,
    pub status: TrainStatus,
}

fn gaussian_init(n: usize, k: usize, r: &mut Rng) -> DMatrix<f64> {
    let scale = 1.0 / (k as f64).sqrt();
    DMatrix::from_fn(n, k, |_, _| {
        let z: f64 = StandardNormal.sample(r);
        z * scale
    })
}

fn scale_rows(m: &mut DMatrix<f64>, s: &DVector<f64>) {
    for (i, mut row) in m.row_iter_mut().enumerate() {
        row *= s[i];
    }
}

/// Multi-modal spectral contrastive training.
pub fn train_mmcl(p: &JointDistribution, cfg: &TrainConfig) -> Result<MmclOutcome> {
    cfg.validate()?;
    let norm = normalize_cooccurrence(p)?;
    let k = cfg.dim;
    if k > norm.rank_bound() {
        return Err(Error::InvalidConfig(format!("dimension {k} exceeds rank bound {}", norm.rank_bound())));
    }
    let mut r = rng::derive(cfg.seed, 0);
    let mut fv = gaussian_init(p.n_visual(), k, &mut r);
    let mut fl = gaussian_init(p.n_language(), k, &mut r);
    let (pv, pl) = crate::distributions::marginals(p);
    // pruned samples never receive gradient; start them at zero
    scale_rows(&mut fv, &pv.map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
    scale_rows(&mut fl, &pl.map(|x| if x > 0.0 { 1.0 } else { 0.0 }));

    match cfg.batch {
        BatchMode::Population => {
            let target = norm.matrix();
            let constant = frobenius_sq(target);
            let mut a = norm.visual_factor(&fv)?;
            let mut b = norm.language_factor(&fl)?;
            let mut history = Vec::new();
            let mut status = TrainStatus::DidNotConverge;
            let mut resid = target - &a * b.transpose();
            let mut loss = frobenius_sq(&resid) - constant;
            history.push(loss);
            for _ in 0..cfg.max_steps {
                let ga = -2.0 * &resid * &b;
                let gb = -2.0 * resid.transpose() * &a;
                a -= cfg.learning_rate * ga;
                b -= cfg.learning_rate * gb;
                resid = target - &a * b.transpose();
                let next = frobenius_sq(&resid) - constant;
                if !next.is_finite() {
                    return Err(Error::NumericalFailure("training diverged".into()));
                }
                history.push(next);
                let done = (loss - next).abs() < cfg.tolerance;
                loss = next;
                if done {
                    status = TrainStatus::Converged;
                    break;
                }
            }
            Ok(MmclOutcome {
                visual: EncoderTable::new(norm.visual_features(&a), Side::Visual)?,
                language: EncoderTable::new(norm.language_features(&b), Side::Language)?,
                history,
                status,
            })
        }
        BatchMode::Sampled { batch_size } => {
            let sampler = BatchSampler::new(p)?;
            let mut stream = rng::derive(cfg.seed, 1);
            let mut history = Vec::with_capacity(cfg.max_steps);
            for _ in 0..cfg.max_steps {
                let batch = sampler.sample(batch_size, stream.next_u64())?;
                let rb = ResampledBatch::from(&batch);
                history.push(rb.loss(&fv, &fl));
                let (ga, gb) = rb.gradient(&fv, &fl);
                preconditioned_step(&mut fv, &ga, &pv, cfg.learning_rate);
                preconditioned_step(&mut fl, &gb, &pl, cfg.learning_rate);
                if fv.iter().chain(fl.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::NumericalFailure("training diverged".into()));
                }
            }
            Ok(MmclOutcome {
                visual: EncoderTable::new(fv, Side::Visual)?,
                language: EncoderTable::new(fl, Side::Language)?,
                history,
                status: TrainStatus::FixedSteps,
            })
        }
    }
}

fn preconditioned_step(f: &mut DMatrix<f64>, g: &DMatrix<f64>, p: &DVector<f64>, lr: f64) {
    for i in 0..f.nrows() {
        if p[i] > 0.0 {
            let step = lr / p[i];
            for j in 0..f.ncols() {
                f[(i, j)] -= step * g[(i, j)];
            }
        }
    }
}

/// Uni-modal spectral contrastive training on a symmetric pair distribution,
/// optionally resampling every batch with a teacher.
pub fn train_sscl(
    p: &InducedDistribution,
    marginal: &DVector<f64>,
    cfg: &TrainConfig,
    resample: Option<&ResampleConfig>,
    teacher: Option<&EncoderTable>,
) -> Result<SsclOutcome> {
    cfg.validate()?;
    if marginal.len() != p.len() {
        return Err(Error::DimensionMismatch(format!("marginal of length {} for {} samples", marginal.len(), p.len())));
    }
    if (marginal - p.marginal()).amax() > 1e-9 {
        return Err(Error::InvalidDistribution("marginal does not match the pair distribution".into()));
    }
    if let Some(rc) = resample {
        rc.validate()?;
        let t = teacher.ok_or(Error::TeacherMissing)?;
        if t.len() != p.len() {
            return Err(Error::DimensionMismatch(format!("teacher has {} rows for {} samples", t.len(), p.len())));
        }
        if cfg.batch == BatchMode::Population {
            return Err(Error::InvalidConfig("resampling needs sampled batches".into()));
        }
    }
    let norm = normalize_induced(p)?;
    let k = cfg.dim;
    if k > norm.matrix.nrows() {
        return Err(Error::InvalidConfig(format!("dimension {k} exceeds {} supported samples", norm.matrix.nrows())));
    }
    let mut r = rng::derive(cfg.seed, 0);
    let mut f = gaussian_init(p.len(), k, &mut r);
    scale_rows(&mut f, &marginal.map(|x| if x > 0.0 { 1.0 } else { 0.0 }));

    match cfg.batch {
        BatchMode::Population => {
            let target = &norm.matrix;
            let constant = frobenius_sq(target);
            let mut a = norm.factor(&f)?;
            let mut resid = target - &a * a.transpose();
            let mut loss = frobenius_sq(&resid) - constant;
            let mut history = vec![loss];
            let mut status = TrainStatus::DidNotConverge;
            for _ in 0..cfg.max_steps {
                let g = -4.0 * &resid * &a;
                a -= cfg.learning_rate * g;
                resid = target - &a * a.transpose();
                let next = frobenius_sq(&resid) - constant;
                if !next.is_finite() {
                    return Err(Error::NumericalFailure("training diverged".into()));
                }
                history.push(next);
                let done = (loss - next).abs() < cfg.tolerance;
                loss = next;
                if done {
                    status = TrainStatus::Converged;
                    break;
                }
            }
            Ok(SsclOutcome { features: EncoderTable::new(norm.features(&a), Side::Augmented)?, history, status })
        }
        BatchMode::Sampled { batch_size } => {
            let sampler = BatchSampler::new(p)?;
            let mut stream = rng::derive(cfg.seed, 1);
            let mut history = Vec::with_capacity(cfg.max_steps);
            for _ in 0..cfg.max_steps {
                let batch = sampler.sample(batch_size, stream.next_u64())?;
                let rb = match (resample, teacher) {
                    (Some(rc), Some(t)) => apply_strategy(&batch, t, rc)?,
                    _ => ResampledBatch::from(&batch),
                };
                history.push(rb.loss(&f, &f));
                let (ga, gb) = rb.gradient(&f, &f);
                preconditioned_step(&mut f, &(ga + gb), marginal, cfg.learning_rate);
                if f.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericalFailure("training diverged".into()));
                }
            }
            Ok(SsclOutcome { features: EncoderTable::new(f, Side::Augmented)?, history, status: TrainStatus::FixedSteps })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    AddNewPositive,
    DropFalsePositive,
    DropFalseNegative,
    DropEasyNegative,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::AddNewPositive,
        Strategy::DropFalsePositive,
        Strategy::DropFalseNegative,
        Strategy::DropEasyNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::AddNewPositive => "add-new-positive",
            Strategy::DropFalsePositive => "drop-false-positive",
            Strategy::DropFalseNegative => "drop-false-negative",
            Strategy::DropEasyNegative => "drop-easy-negative",
        }
    }

    /// Default ratio: the fraction of anchors that receive a new positive, or
    /// the fraction of pairs dropped.
    pub fn default_ratio(self) -> f64 {
        match self {
            Strategy::AddNewPositive => 1.0,
            Strategy::DropFalsePositive => 0.10,
            Strategy::DropFalseNegative => 0.05,
            Strategy::DropEasyNegative => 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub strategy: Strategy,
    pub ratio: f64,
    pub mix_weight: f64,
}

impl ResampleConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy, ratio: strategy.default_ratio(), mix_weight: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidConfig(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        if !(self.mix_weight >= 0.0 && self.mix_weight.is_finite()) {
            return Err(Error::InvalidConfig("mixing weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// A batch after resampling: positive and negative pair lists plus the
/// teacher-proposed positives and their weight.
///
/// Every term is divided by the triple count of the source batch, so a drop
/// removes a term rather than reweighting the remaining ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledBatch {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
    pub new_positives: Vec<Pair>,
    pub new_positive_weight: f64,
    pub triples: usize,
}

impl From<&Batch> for ResampledBatch {
    fn from(b: &Batch) -> Self {
        Self {
            positives: b.positives.clone(),
            negatives: b.negative_pairs(),
            new_positives: Vec::new(),
            new_positive_weight: 0.0,
            triples: b.len(),
        }
    }
}

impl ResampledBatch {
    /// Half of `1 + w`, since the batch holds two negatives per triple.
    fn negative_weight(&self) -> f64 {
        if self.new_positives.is_empty() {
            0.5
        } else {
            0.5 * (1.0 + self.new_positive_weight)
        }
    }

    /// `(-2 sum_pos s - 2 w sum_new s + (1 + w) sum_neg s^2 / 2) / m`; the
    /// new-positive term is a second spectral loss sharing the batch negatives.
    pub fn loss(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        if self.triples == 0 {
            return 0.0;
        }
        let s = |p: &Pair| a.row(p.visual).dot(&b.row(p.language));
        let pos: f64 = self.positives.iter().map(s).sum();
        let new: f64 = self.new_positives.iter().map(s).sum();
        let neg: f64 = self.negatives.iter().map(|p| s(p).powi(2)).sum();
        (-2.0 * pos - 2.0 * self.new_positive_weight * new + self.negative_weight() * neg) / self.triples as f64
    }

    /// Gradient of [`ResampledBatch::loss`] with respect to both tables.
    pub fn gradient(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut ga = DMatrix::zeros(a.nrows(), a.ncols());
        let mut gb = DMatrix::zeros(b.nrows(), b.ncols());
        if self.triples == 0 {
            return (ga, gb);
        }
        let m = self.triples as f64;
        let mut add = |pairs: &[Pair], coef: &dyn Fn(f64) -> f64| {
            for p in pairs {
                let s = a.row(p.visual).dot(&b.row(p.language));
                let c = coef(s) / m;
                for j in 0..a.ncols() {
                    ga[(p.visual, j)] += c * b[(p.language, j)];
                    gb[(p.language, j)] += c * a[(p.visual, j)];
                }
            }
        };
        add(&self.positives, &|_| -2.0);
        let w = self.new_positive_weight;
        add(&self.new_positives, &|_| -2.0 * w);
        let nw = self.negative_weight();
        add(&self.negatives, &|s| 2.0 * nw * s);
        (ga, gb)
    }
}

fn unit_rows(t: &EncoderTable) -> DMatrix<f64> {
    let mut m = t.features().clone();
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    m
}

fn cosine(u: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    u.row(i).dot(&u.row(j))
}

/// Candidate with the largest teacher cosine similarity to `index`; ties go
/// to the smallest candidate index.
pub fn nearest_neighbor_positive(index: usize, candidates: &[usize], teacher: &EncoderTable) -> Result<usize> {
    let u = unit_rows(teacher);
    nearest_in(index, candidates, &u)
}

fn nearest_in(index: usize, candidates: &[usize], u: &DMatrix<f64>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &c in candidates {
        if c == index {
            continue;
        }
        let s = cosine(u, index, c);
        best = match best {
            Some((bi, bs)) if bs > s || (bs == s && bi < c) => Some((bi, bs)),
            _ => Some((c, s)),
        };
    }
    best.map(|(i, _)| i).ok_or(Error::EmptyCandidates)
}

/// Positions of the `count` items to drop when ranking by `scores`
/// (`highest` first or lowest first), ties broken by position.
fn drop_positions(scores: &[f64], count: usize, highest: bool) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| {
        let o = scores[x].partial_cmp(&scores[y]).unwrap_or(std::cmp::Ordering::Equal);
        if highest {
            o.reverse()
        } else {
            o
        }
    });
    let mut dropped = vec![false; scores.len()];
    for &i in order.iter().take(count) {
        dropped[i] = true;
    }
    dropped
}

fn keep(pairs: &[Pair], dropped: &[bool]) -> Vec<Pair> {
    pairs.iter().zip(dropped).filter(|(_, d)| !**d).map(|(p, _)| *p).collect()
}

/// Rewrite a batch with one of the teacher-guided strategies.
pub fn apply_strategy(batch: &Batch, teacher: &EncoderTable, cfg: &ResampleConfig) -> Result<ResampledBatch> {
    cfg.validate()?;
    let mut out = ResampledBatch::from(batch);
    let u = unit_rows(teacher);
    let sim = |p: &Pair| cosine(&u, p.visual, p.language);
    match cfg.strategy {
        Strategy::AddNewPositive => {
            let anchors = (cfg.ratio * batch.len() as f64).floor() as usize;
            let mut pool: Vec<usize> = batch
                .positives
                .iter()
                .flat_map(|p| [p.visual, p.language])
                .chain(batch.negative_language.iter().copied())
                .chain(batch.negative_visual.iter().copied())
                .collect();
            pool.sort_unstable();
            pool.dedup();
            for p in batch.positives.iter().take(anchors) {
                match nearest_in(p.visual, &pool, &u) {
                    Ok(nn) => out.new_positives.push(Pair { visual: p.visual, language: nn }),
                    Err(Error::EmptyCandidates) => {}
                    Err(e) => return Err(e),
                }
            }
            out.new_positive_weight = cfg.mix_weight;
        }
        Strategy::DropFalsePositive => {
            let scores: Vec<f64> = out.positives.iter().map(sim).collect();
            let count = (cfg.ratio * scores.len() as f64).floor() as usize;
            out.positives = keep(&out.positives, &drop_positions(&scores, count, false));
        }
        Strategy::DropFalseNegative | Strategy::DropEasyNegative => {
            let scores: Vec<f64> = out.negatives.iter().map(sim).collect();
            let count = (cfg.ratio * scores.len() as f64).floor() as usize;
            let highest = cfg.strategy == Strategy::DropFalseNegative;
            out.negatives = keep(&out.negatives, &drop_positions(&scores, count, highest));
        }
    }
    Ok(out)
}
