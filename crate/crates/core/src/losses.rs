//! Population and sampled contrastive losses.
//!
//! Population losses are exact weighted sums over the finite sample sets.
//! The sampled estimator follows the triple construction: draw `n` pairs,
//! permute them, and read every consecutive triple as (positive pair,
//! negative caption, negative image).

use nalgebra::DMatrix;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::distributions::{marginals, InducedDistribution, JointDistribution, NormalizedCooccurrence};
use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;
use crate::rng;
use crate::synth::random_permutation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Visual,
    Language,
    Augmented,
}

/// Per-sample feature rows (`N x k`), the tabular form of an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTable {
    features: DMatrix<f64>,
    side: Side,
}

impl EncoderTable {
    pub fn new(features: DMatrix<f64>, side: Side) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(Error::InvalidEncoder("embedding dimension must be at least 1".into()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidEncoder("non-finite feature".into()));
        }
        Ok(Self { features, side })
    }

    pub fn zeros(n: usize, k: usize, side: Side) -> Self {
        Self { features: DMatrix::zeros(n, k), side }
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn into_features(self) -> DMatrix<f64> {
        self.features
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Apply `f -> f T` to every feature row.
    pub fn transformed(&self, t: &DMatrix<f64>) -> Result<Self> {
        Self::new(&self.features * t, self.side)
    }
}

fn check_pair(fv: &EncoderTable, fl: &EncoderTable, nv: usize, nl: usize) -> Result<()> {
    if fv.len() != nv || fl.len() != nl {
        return Err(Error::DimensionMismatch(format!(
            "encoders cover {}x{} samples, distribution is {nv}x{nl}",
            fv.len(),
            fl.len()
        )));
    }
    if fv.dim() != fl.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding dimensions differ: {} vs {}",
            fv.dim(),
            fl.dim()
        )));
    }
    Ok(())
}

/// `log sum_i w_i exp(s_i)` over entries with positive weight.
fn weighted_logsumexp(scores: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let max = scores
        .clone()
        .filter(|(w, _)| *w > 0.0)
        .map(|(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = scores.filter(|(w, _)| *w > 0.0).map(|(w, s)| w * (s - max).exp()).sum();
    max + sum.ln()
}

/// Symmetric cross-entropy loss: both directional log-softmax terms, with the
/// denominator expectations taken over the marginals (temperature 1).
pub fn sce_loss(fv: &EncoderTable, fl: &EncoderTable, p: &JointDistribution) -> Result<f64> {
    check_pair(fv, fl, p.n_visual(), p.n_language())?;
    let (pv, pl) = marginals(p);
    let s = fv.features() * fl.features().transpose();
    let m = p.mass();
    let row_lse: Vec<f64> = (0..p.n_visual())
        .map(|v| weighted_logsumexp((0..p.n_language()).map(|l| (pl[l], s[(v, l)]))))
        .collect();
    let col_lse: Vec<f64> = (0..p.n_language())
        .map(|l| weighted_logsumexp((0..p.n_visual()).map(|v| (pv[v], s[(v, l)]))))
        .collect();
    let mut loss = 0.0;
    for v in 0..p.n_visual() {
        for l in 0..p.n_language() {
            let w = m[(v, l)];
            if w > 0.0 {
                loss -= w * ((s[(v, l)] - row_lse[v]) + (s[(v, l)] - col_lse[l]));
            }
        }
    }
    Ok(loss)
}

/// Multi-modal spectral loss
/// `-2 E_{P_M}[f_V^T f_L] + E_{P_V x P_L}[(f_V^T f_L)^2]`.
pub fn scl_loss(fv: &EncoderTable, fl: &EncoderTable, p: &JointDistribution) -> Result<f64> {
    check_pair(fv, fl, p.n_visual(), p.n_language())?;
    let (pv, pl) = marginals(p);
    let s = fv.features() * fl.features().transpose();
    let m = p.mass();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for v in 0..p.n_visual() {
        for l in 0..p.n_language() {
            let x = s[(v, l)];
            pos += m[(v, l)] * x;
            neg += pv[v] * pl[l] * x * x;
        }
    }
    Ok(-2.0 * pos + neg)
}

/// Gradient of [`scl_loss`] with respect to the feature tables.
pub fn scl_gradient(
    fv: &EncoderTable,
    fl: &EncoderTable,
    p: &JointDistribution,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_pair(fv, fl, p.n_visual(), p.n_language())?;
    let (pv, pl) = marginals(p);
    let s = fv.features() * fl.features().transpose();
    // dL/dS = -2 P + 2 (p_V p_L^T) o S
    let ds = DMatrix::from_fn(s.nrows(), s.ncols(), |v, l| {
        -2.0 * p.mass()[(v, l)] + 2.0 * pv[v] * pl[l] * s[(v, l)]
    });
    Ok((&ds * fl.features(), ds.transpose() * fv.features()))
}

/// `||P~ - F_V F_L^T||_F^2`.
pub fn amf_loss(f_visual: &DMatrix<f64>, f_language: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    check_factors(f_visual, f_language, target)?;
    Ok(frobenius_sq(&(target - f_visual * f_language.transpose())))
}

pub fn amf_gradient(
    f_visual: &DMatrix<f64>,
    f_language: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_factors(f_visual, f_language, target)?;
    let r = target - f_visual * f_language.transpose();
    Ok((-2.0 * &r * f_language, -2.0 * r.transpose() * f_visual))
}

fn check_factors(a: &DMatrix<f64>, b: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != target.nrows() || b.nrows() != target.ncols() || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "factors {:?} and {:?} against target {:?}",
            a.shape(),
            b.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// `||P~_M||_F^2`, the constant separating factorization and spectral losses.
pub fn equivalence_constant(p: &NormalizedCooccurrence) -> f64 {
    frobenius_sq(p.matrix())
}

/// Factorization loss evaluated at the factor matrices of two encoder tables.
pub fn amf_loss_of_encoders(fv: &EncoderTable, fl: &EncoderTable, p: &NormalizedCooccurrence) -> Result<f64> {
    let a = p.visual_factor(fv.features())?;
    let b = p.language_factor(fl.features())?;
    amf_loss(&a, &b, p.matrix())
}

/// Uni-modal spectral loss over a symmetric pair distribution with sample
/// marginal `marginal`.
pub fn uni_scl_loss(f: &EncoderTable, p: &InducedDistribution, marginal: &nalgebra::DVector<f64>) -> Result<f64> {
    check_uni(f, p, marginal)?;
    let s = f.features() * f.features().transpose();
    let m = p.matrix();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            let x = s[(i, j)];
            pos += m[(i, j)] * x;
            neg += marginal[i] * marginal[j] * x * x;
        }
    }
    Ok(-2.0 * pos + neg)
}

pub fn uni_scl_gradient(
    f: &EncoderTable,
    p: &InducedDistribution,
    marginal: &nalgebra::DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_uni(f, p, marginal)?;
    let s = f.features() * f.features().transpose();
    let n = p.len();
    // symmetric P, so both occurrences of f contribute equally
    let ds = DMatrix::from_fn(n, n, |i, j| -4.0 * p.matrix()[(i, j)] + 4.0 * marginal[i] * marginal[j] * s[(i, j)]);
    Ok(ds * f.features())
}

fn check_uni(f: &EncoderTable, p: &InducedDistribution, marginal: &nalgebra::DVector<f64>) -> Result<()> {
    if f.len() != p.len() || marginal.len() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "encoder has {} rows, distribution {} samples, marginal {}",
            f.len(),
            p.len(),
            marginal.len()
        )));
    }
    Ok(())
}

/// Anything with an explicit pair-mass matrix to draw positives from.
pub trait PairMass {
    fn pair_mass(&self) -> &DMatrix<f64>;
}

impl PairMass for JointDistribution {
    fn pair_mass(&self) -> &DMatrix<f64> {
        self.mass()
    }
}

impl PairMass for InducedDistribution {
    fn pair_mass(&self) -> &DMatrix<f64> {
        self.matrix()
    }
}

/// One (first, second) sample pair; for multi-modal data the first index is
/// visual and the second is language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub visual: usize,
    pub language: usize,
}

/// `n / 3` positive pairs with one negative of each modality per pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub positives: Vec<Pair>,
    pub negative_language: Vec<usize>,
    pub negative_visual: Vec<usize>,
    pub permutation: Vec<usize>,
    pub seed: u64,
}

impl Batch {
    /// Slice `n` draws through a permutation: triple `i` reads draws
    /// `pi(3i)`, `pi(3i+1)`, `pi(3i+2)` (0-based).
    pub fn from_draws(draws: &[Pair], permutation: Vec<usize>, seed: u64) -> Result<Self> {
        let n = draws.len();
        if n == 0 || !n.is_multiple_of(3) {
            return Err(Error::InvalidBatchSize(n));
        }
        let mut check = permutation.clone();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig("not a permutation of the draws".into()));
        }
        let m = n / 3;
        let positives = (0..m).map(|i| draws[permutation[3 * i]]).collect();
        let negative_language = (0..m).map(|i| draws[permutation[3 * i + 1]].language).collect();
        let negative_visual = (0..m).map(|i| draws[permutation[3 * i + 2]].visual).collect();
        Ok(Self { positives, negative_language, negative_visual, permutation, seed })
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// The `2 m` negative pairs: `(x_v^i, l^-_i)` for every `i`, then
    /// `(v^-_i, x_l^i)`.
    pub fn negative_pairs(&self) -> Vec<Pair> {
        let a = self
            .positives
            .iter()
            .zip(&self.negative_language)
            .map(|(p, &l)| Pair { visual: p.visual, language: l });
        let b = self
            .positives
            .iter()
            .zip(&self.negative_visual)
            .map(|(p, &v)| Pair { visual: v, language: p.language });
        a.chain(b).collect()
    }
}

/// Reusable categorical sampler over the entries of a pair-mass matrix.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    index: WeightedIndex<f64>,
    cols: usize,
}

impl BatchSampler {
    pub fn new<P: PairMass>(p: &P) -> Result<Self> {
        let m = p.pair_mass();
        // row-major flattening
        let weights: Vec<f64> = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect();
        let index = WeightedIndex::new(weights).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        Ok(Self { index, cols: m.ncols() })
    }

    pub fn draw_pairs(&self, n: usize, rng: &mut rng::Rng) -> Vec<Pair> {
        (0..n)
            .map(|_| {
                let flat = self.index.sample(rng);
                Pair { visual: flat / self.cols, language: flat % self.cols }
            })
            .collect()
    }

    /// `n` i.i.d. pairs and a uniform permutation, both from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Batch> {
        if n == 0 || !n.is_multiple_of(3) {
            return Err(Error::InvalidBatchSize(n));
        }
        let mut r = rng::seeded(seed);
        let draws = self.draw_pairs(n, &mut r);
        let perm = random_permutation(n, &mut r);
        Batch::from_draws(&draws, perm, seed)
    }
}

pub fn sample_batch<P: PairMass>(p: &P, n: usize, seed: u64) -> Result<Batch> {
    BatchSampler::new(p)?.sample(n, seed)
}

/// Empirical spectral loss of one batch:
/// `-2/m sum s(x_v^i, x_l^i) + 1/(2m) sum over both negative sides of s^2`.
pub fn empirical_scl(fv: &EncoderTable, fl: &EncoderTable, batch: &Batch) -> Result<f64> {
    if fv.dim() != fl.dim() {
        return Err(Error::DimensionMismatch("embedding dimensions differ".into()));
    }
    let m = batch.len() as f64;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let a = fv.features();
    let b = fl.features();
    let score = |v: usize, l: usize| a.row(v).dot(&b.row(l));
    let pos: f64 = batch.positives.iter().map(|p| score(p.visual, p.language)).sum();
    let neg: f64 = batch.negative_pairs().iter().map(|p| score(p.visual, p.language).powi(2)).sum();
    // each of the 2m negatives estimates the product-marginal term, so they are averaged
    Ok((-2.0 * pos + 0.5 * neg) / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{normalize_cooccurrence, text_induced};

    fn table(rows: usize, cols: usize, data: &[f64], side: Side) -> EncoderTable {
        EncoderTable::new(DMatrix::from_row_slice(rows, cols, data), side).unwrap()
    }

    fn diag() -> JointDistribution {
        JointDistribution::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]).unwrap()
    }

    #[test]
    fn sce_single_pair_is_zero() {
        let p = JointDistribution::from_rows(&[&[1.0]]).unwrap();
        let f = table(1, 2, &[0.3, -1.2], Side::Visual);
        let g = table(1, 2, &[2.0, 0.7], Side::Language);
        assert!(sce_loss(&f, &g, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn sce_zero_encoders_is_zero() {
        let p = JointDistribution::from_rows(&[&[0.1, 0.3], &[0.4, 0.2]]).unwrap();
        let z = EncoderTable::zeros(2, 3, Side::Visual);
        assert!(sce_loss(&z, &z, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn sce_decreases_with_scale_on_diagonal() {
        // f = 2 s I: scores c = 4 s^2 on the diagonal, 0 off it; each direction
        // contributes -(c - ln((e^c + 1)/2)), summed over both directions
        let oracle = |s: f64| {
            let c = 4.0 * s * s;
            2.0 * (-c + ((c.exp() + 1.0) / 2.0).ln())
        };
        let mut last = f64::INFINITY;
        for s in [0.0, 1.0, 2.0] {
            let f = table(2, 2, &[2.0 * s, 0.0, 0.0, 2.0 * s], Side::Visual);
            let loss = sce_loss(&f, &f, &diag()).unwrap();
            assert!((loss - oracle(s)).abs() < 1e-12);
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn sce_survives_large_scores() {
        let f = table(2, 2, &[40.0, 0.0, 0.0, 40.0], Side::Visual);
        assert!(sce_loss(&f, &f, &diag()).unwrap().is_finite());
    }

    #[test]
    fn scl_examples() {
        let p = JointDistribution::from_rows(&[&[0.1, 0.3], &[0.4, 0.2]]).unwrap();
        let z = EncoderTable::zeros(2, 2, Side::Visual);
        assert_eq!(scl_loss(&z, &z, &p).unwrap(), 0.0);

        let f = table(2, 2, &[0.3, 1.0, -0.5, 2.0], Side::Visual);
        let g = table(2, 2, &[1.5, -0.2, 0.1, 0.4], Side::Language);
        let base = scl_loss(&f, &g, &p).unwrap();
        let c = 3.7;
        let gc = EncoderTable::new(g.features() / c, Side::Language).unwrap();
        let fc = EncoderTable::new(f.features() * c, Side::Visual).unwrap();
        assert!((scl_loss(&fc, &gc, &p).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn amf_examples() {
        let target = DMatrix::<f64>::identity(2, 2);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!((amf_loss(&a, &a, &target).unwrap() - 1.0).abs() < 1e-15);
        let z = DMatrix::zeros(2, 1);
        assert_eq!(amf_loss(&z, &z, &target).unwrap(), 2.0);
        let f = DMatrix::identity(2, 2);
        assert_eq!(amf_loss(&f, &f, &target).unwrap(), 0.0);
    }

    #[test]
    fn equivalence_constant_examples() {
        let u = normalize_cooccurrence(&JointDistribution::from_rows(&[&[0.25, 0.25], &[0.25, 0.25]]).unwrap()).unwrap();
        assert!((equivalence_constant(&u) - 1.0).abs() < 1e-15);
        let d = normalize_cooccurrence(&diag()).unwrap();
        assert!((equivalence_constant(&d) - 2.0).abs() < 1e-15);
        let p = JointDistribution::from_rows(&[&[0.1, 0.3, 0.05], &[0.4, 0.1, 0.05]]).unwrap();
        let n = normalize_cooccurrence(&p).unwrap();
        let sv: f64 = n.matrix().singular_values().iter().map(|s| s * s).sum();
        assert!((equivalence_constant(&n) - sv).abs() < 1e-10);
    }

    #[test]
    fn uni_scl_examples() {
        let pt = text_induced(&diag()).unwrap();
        let pv = pt.marginal();
        let z = EncoderTable::zeros(2, 2, Side::Visual);
        assert_eq!(uni_scl_loss(&z, &pt, &pv).unwrap(), 0.0);
        let id = table(2, 2, &[1.0, 0.0, 0.0, 1.0], Side::Visual);
        assert!((uni_scl_loss(&id, &pt, &pv).unwrap() + 1.5).abs() < 1e-15);

        // symmetric joint with tied encoders gives the same value as scl
        let sym = JointDistribution::from_rows(&[&[0.2, 0.15], &[0.15, 0.5]]).unwrap();
        let as_induced = crate::distributions::InducedDistribution::new(
            sym.mass().clone(),
            crate::distributions::InducedKind::Estimated,
        )
        .unwrap();
        let f = table(2, 2, &[0.3, 1.0, -0.5, 2.0], Side::Visual);
        let (m, _) = marginals(&sym);
        assert!((uni_scl_loss(&f, &as_induced, &m).unwrap() - scl_loss(&f, &f, &sym).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn batch_slicing_follows_triples() {
        let draws: Vec<Pair> = (0..6).map(|i| Pair { visual: 10 + i, language: 20 + i }).collect();
        let b = Batch::from_draws(&draws, (0..6).collect(), 0).unwrap();
        // 1-based draws 1 and 4 are positives, 2 and 5 give captions, 3 and 6 images
        assert_eq!(b.positives, vec![draws[0], draws[3]]);
        assert_eq!(b.negative_language, vec![21, 24]);
        assert_eq!(b.negative_visual, vec![12, 15]);
    }

    #[test]
    fn batch_sizes() {
        let p = JointDistribution::from_rows(&[&[0.1, 0.3], &[0.4, 0.2]]).unwrap();
        let b = sample_batch(&p, 3, 1).unwrap();
        assert_eq!((b.positives.len(), b.negative_language.len(), b.negative_visual.len()), (1, 1, 1));
        assert!(matches!(sample_batch(&p, 4, 1), Err(Error::InvalidBatchSize(4))));
        assert!(matches!(sample_batch(&p, 0, 1), Err(Error::InvalidBatchSize(0))));
        assert_eq!(sample_batch(&p, 30, 9).unwrap(), sample_batch(&p, 30, 9).unwrap());
    }

    #[test]
    fn sampler_respects_support() {
        let p = JointDistribution::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]).unwrap();
        let b = sample_batch(&p, 300, 4).unwrap();
        assert!(b.positives.iter().all(|q| q.visual == q.language));
    }

    #[test]
    fn empirical_examples() {
        let p = JointDistribution::from_rows(&[&[0.1, 0.3], &[0.4, 0.2]]).unwrap();
        let z = EncoderTable::zeros(2, 2, Side::Visual);
        let b = sample_batch(&p, 12, 2).unwrap();
        assert_eq!(empirical_scl(&z, &z, &b).unwrap(), 0.0);

        // positive (0,0) with aligned unit features, negatives orthogonal:
        // -2 * 1 + 0 + 0
        let fv = table(2, 2, &[1.0, 0.0, 0.0, 1.0], Side::Visual);
        let fl = table(2, 2, &[1.0, 0.0, 0.0, 1.0], Side::Language);
        let b = Batch {
            positives: vec![Pair { visual: 0, language: 0 }],
            negative_language: vec![1],
            negative_visual: vec![1],
            permutation: vec![0, 1, 2],
            seed: 0,
        };
        assert_eq!(empirical_scl(&fv, &fl, &b).unwrap(), -2.0);
    }
}
