//! Finite joint distributions over visual and language samples.
//!
//! A [`JointDistribution`] holds the explicit co-occurrence matrix `P_M`
//! (rows index visual samples, columns index language samples). From it we
//! derive marginals, the two-side normalized matrix
//! `P~_M(v, l) = P_M(v, l) / sqrt(P_V(v) P_L(l))`, and visual-visual
//! distributions induced by marginalising over a shared pivot (a caption for
//! the text-induced graph, a natural image for the augmentation graph).
//!
//! Samples with zero marginal mass are pruned before normalization; the
//! normalized types keep the map from pruned positions back to the original
//! indices so features and labels stay aligned.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::max_asymmetry;
use crate::synth::AugmentationModel;

/// Tolerance on total mass for exact distributions.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// Tolerance on `|M - M^T|` before an induced matrix is symmetrized.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidDistribution(format!("{what} has non-finite entries")))
    }
}

fn check_mass(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(x) = m.iter().find(|&&x| x < 0.0) {
        return Err(Error::InvalidDistribution(format!("{what} has negative entry {x}")));
    }
    let total = m.sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "{what} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Explicit co-occurrence matrix `P_M` of size `N_V x N_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    mass: DMatrix<f64>,
}

impl JointDistribution {
    /// Validates non-negativity, finiteness and unit total mass.
    pub fn new(mass: DMatrix<f64>) -> Result<Self> {
        if mass.nrows() == 0 || mass.ncols() == 0 {
            return Err(Error::InvalidDistribution("empty matrix".into()));
        }
        check_finite(&mass, "joint distribution")?;
        check_mass(&mass, "joint distribution")?;
        Ok(Self { mass })
    }

    /// Renormalizes non-negative weights to unit total mass.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        check_finite(&weights, "weights")?;
        if weights.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidDistribution("negative weight".into()));
        }
        let total = weights.sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights carry no mass".into()));
        }
        Self::new(weights / total)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(DMatrix::from_row_slice(rows.len(), ncols, &flat))
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn n_visual(&self) -> usize {
        self.mass.nrows()
    }

    pub fn n_language(&self) -> usize {
        self.mass.ncols()
    }

    /// Relabel samples: row `i` of the result is row `visual_perm[i]` of `self`.
    pub fn permuted(&self, visual_perm: &[usize], language_perm: &[usize]) -> Result<Self> {
        if visual_perm.len() != self.n_visual() || language_perm.len() != self.n_language() {
            return Err(Error::DimensionMismatch("permutation length".into()));
        }
        let m = DMatrix::from_fn(self.n_visual(), self.n_language(), |r, c| {
            self.mass[(visual_perm[r], language_perm[c])]
        });
        Self::new(m)
    }
}

/// Row sums `P_V` and column sums `P_L`.
pub fn marginals(p: &JointDistribution) -> (DVector<f64>, DVector<f64>) {
    let m = p.mass();
    let pv = DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()));
    let pl = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()));
    (pv, pl)
}

fn support(marginal: &DVector<f64>) -> Vec<usize> {
    marginal
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Two-side normalized co-occurrence matrix over the support of `P_M`.
#[derive(Debug, Clone)]
pub struct NormalizedCooccurrence {
    matrix: DMatrix<f64>,
    visual_marginal: DVector<f64>,
    language_marginal: DVector<f64>,
    visual_index: Vec<usize>,
    language_index: Vec<usize>,
    n_visual: usize,
    n_language: usize,
}

impl NormalizedCooccurrence {
    /// `N_V' x N_L'` matrix over the pruned index sets.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Visual marginal restricted to the support.
    pub fn visual_marginal(&self) -> &DVector<f64> {
        &self.visual_marginal
    }

    pub fn language_marginal(&self) -> &DVector<f64> {
        &self.language_marginal
    }

    /// `visual_index()[i]` is the original index of pruned row `i`.
    pub fn visual_index(&self) -> &[usize] {
        &self.visual_index
    }

    pub fn language_index(&self) -> &[usize] {
        &self.language_index
    }

    /// Sizes of the unpruned sample sets.
    pub fn full_shape(&self) -> (usize, usize) {
        (self.n_visual, self.n_language)
    }

    /// `min(N_V', N_L')`, the number of singular values.
    pub fn rank_bound(&self) -> usize {
        self.matrix.nrows().min(self.matrix.ncols())
    }

    /// Factor matrix `F_V` with rows `sqrt(P_V(v)) f_V(v)` over the support.
    pub fn visual_factor(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        to_factor(features, self.n_visual, &self.visual_index, &self.visual_marginal)
    }

    pub fn language_factor(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        to_factor(features, self.n_language, &self.language_index, &self.language_marginal)
    }

    /// Inverse of [`Self::visual_factor`]; pruned samples get zero features.
    pub fn visual_features(&self, factor: &DMatrix<f64>) -> DMatrix<f64> {
        from_factor(factor, self.n_visual, &self.visual_index, &self.visual_marginal)
    }

    pub fn language_features(&self, factor: &DMatrix<f64>) -> DMatrix<f64> {
        from_factor(factor, self.n_language, &self.language_index, &self.language_marginal)
    }
}

fn to_factor(
    features: &DMatrix<f64>,
    n_full: usize,
    index: &[usize],
    marginal: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if features.nrows() != n_full {
        return Err(Error::DimensionMismatch(format!(
            "feature table has {} rows, distribution has {n_full} samples",
            features.nrows()
        )));
    }
    Ok(DMatrix::from_fn(index.len(), features.ncols(), |r, c| {
        marginal[r].sqrt() * features[(index[r], c)]
    }))
}

fn from_factor(
    factor: &DMatrix<f64>,
    n_full: usize,
    index: &[usize],
    marginal: &DVector<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n_full, factor.ncols());
    for (r, &orig) in index.iter().enumerate() {
        let s = marginal[r].sqrt();
        for c in 0..factor.ncols() {
            out[(orig, c)] = factor[(r, c)] / s;
        }
    }
    out
}

/// Divide each entry by `sqrt(P_V(v) P_L(l))` after dropping zero-marginal samples.
pub fn normalize_cooccurrence(p: &JointDistribution) -> Result<NormalizedCooccurrence> {
    let (pv, pl) = marginals(p);
    let vi = support(&pv);
    let li = support(&pl);
    if vi.len() < 2 && li.len() < 2 {
        return Err(Error::DegenerateDistribution(
            "all mass lies in a single visual-language pair".into(),
        ));
    }
    let visual_marginal = DVector::from_iterator(vi.len(), vi.iter().map(|&i| pv[i]));
    let language_marginal = DVector::from_iterator(li.len(), li.iter().map(|&j| pl[j]));
    let matrix = DMatrix::from_fn(vi.len(), li.len(), |r, c| {
        p.mass()[(vi[r], li[c])] / (visual_marginal[r] * language_marginal[c]).sqrt()
    });
    Ok(NormalizedCooccurrence {
        matrix,
        visual_marginal,
        language_marginal,
        visual_index: vi,
        language_index: li,
        n_visual: p.n_visual(),
        n_language: p.n_language(),
    })
}

/// Where a visual-visual matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InducedKind {
    /// `P_T`, pairs of images sharing a caption.
    TextInduced,
    /// `P_A`, pairs of augmented views of one natural image.
    AugmentationInduced,
    /// Three-layer hierarchical random graph.
    Hierarchical,
    /// `P^`, estimated from a feature Gram matrix.
    Estimated,
    /// `P~_M P~_M^T`, the normalized text-induced matrix.
    NormalizedTextInduced,
}

impl InducedKind {
    /// Kinds that are probability distributions and must carry unit mass.
    pub fn is_distribution(self) -> bool {
        !matches!(self, InducedKind::NormalizedTextInduced)
    }
}

/// Symmetric matrix over one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedDistribution {
    matrix: DMatrix<f64>,
    kind: InducedKind,
}

impl InducedDistribution {
    /// Asserts near-symmetry, then stores `(M + M^T) / 2`.
    pub fn new(matrix: DMatrix<f64>, kind: InducedKind) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::InvalidDistribution(format!(
                "induced matrix must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        check_finite(&matrix, "induced matrix")?;
        let asym = max_asymmetry(&matrix);
        if asym >= SYMMETRY_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "induced matrix asymmetry {asym:e} exceeds {SYMMETRY_TOLERANCE:e}"
            )));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        if kind.is_distribution() {
            check_mass(&matrix, "induced distribution")?;
        }
        Ok(Self { matrix, kind })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> InducedKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// Row sums.
    pub fn marginal(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.matrix.row_iter().map(|r| r.sum()))
    }
}

/// `P_T(v, v') = sum_l P_L(l) P_M(v|l) P_M(v'|l)`; language samples with no
/// mass are skipped.
pub fn text_induced(p: &JointDistribution) -> Result<InducedDistribution> {
    let (_, pl) = marginals(p);
    let li = support(&pl);
    let scaled = DMatrix::from_fn(p.n_visual(), li.len(), |r, c| {
        p.mass()[(r, li[c])] / pl[li[c]].sqrt()
    });
    InducedDistribution::new(&scaled * scaled.transpose(), InducedKind::TextInduced)
}

/// `P~_T = P~_M P~_M^T` over the visual support.
pub fn normalized_uni(p: &NormalizedCooccurrence) -> Result<InducedDistribution> {
    let m = p.matrix();
    InducedDistribution::new(m * m.transpose(), InducedKind::NormalizedTextInduced)
}

/// `P_A(a, a') = sum_v P_V(v) A(a|v) A(a'|v)`.
pub fn augmentation_joint(
    model: &AugmentationModel,
    visual_marginal: &DVector<f64>,
) -> Result<InducedDistribution> {
    let a = model.conditional();
    if a.ncols() != visual_marginal.len() {
        return Err(Error::DimensionMismatch(format!(
            "augmentation model covers {} natural samples, marginal has {}",
            a.ncols(),
            visual_marginal.len()
        )));
    }
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] * visual_marginal[c].sqrt());
    InducedDistribution::new(&scaled * scaled.transpose(), InducedKind::AugmentationInduced)
}

/// Two-side normalized symmetric matrix `P(x, x') / sqrt(p(x) p(x'))` with its
/// support marginal and index map.
#[derive(Debug, Clone)]
pub struct NormalizedInduced {
    pub matrix: DMatrix<f64>,
    pub marginal: DVector<f64>,
    pub index: Vec<usize>,
    pub n_full: usize,
}

impl NormalizedInduced {
    pub fn factor(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        to_factor(features, self.n_full, &self.index, &self.marginal)
    }

    pub fn features(&self, factor: &DMatrix<f64>) -> DMatrix<f64> {
        from_factor(factor, self.n_full, &self.index, &self.marginal)
    }
}

/// Normalize an induced distribution by its own row marginal.
pub fn normalize_induced(p: &InducedDistribution) -> Result<NormalizedInduced> {
    let marginal_full = p.marginal();
    let index = support(&marginal_full);
    if index.is_empty() {
        return Err(Error::DegenerateDistribution("induced matrix has no mass".into()));
    }
    let marginal = DVector::from_iterator(index.len(), index.iter().map(|&i| marginal_full[i]));
    let matrix = DMatrix::from_fn(index.len(), index.len(), |r, c| {
        p.matrix()[(index[r], index[c])] / (marginal[r] * marginal[c]).sqrt()
    });
    Ok(NormalizedInduced { matrix, marginal, index, n_full: p.len() })
}

/// Ground-truth class labels for both sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    visual: Vec<usize>,
    language: Vec<usize>,
    classes: usize,
}

impl LabelAssignment {
    pub fn new(visual: Vec<usize>, language: Vec<usize>, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidLabels("class count must be positive".into()));
        }
        if let Some(&y) = visual.iter().chain(&language).find(|&&y| y >= classes) {
            return Err(Error::InvalidLabels(format!("label {y} outside [0, {classes})")));
        }
        let mut seen = vec![false; classes];
        for &y in &visual {
            seen[y] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidLabels(format!("class {c} has no visual sample")));
        }
        Ok(Self { visual, language, classes })
    }

    /// Labels for a single sample set (uni-modal settings).
    pub fn visual_only(visual: Vec<usize>, classes: usize) -> Result<Self> {
        Self::new(visual, Vec::new(), classes)
    }

    pub fn visual(&self) -> &[usize] {
        &self.visual
    }

    pub fn language(&self) -> &[usize] {
        &self.language
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_sq;

    fn joint(rows: &[&[f64]]) -> JointDistribution {
        JointDistribution::from_rows(rows).unwrap()
    }

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn marginal_examples() {
        for rows in [
            vec![[0.25, 0.25], [0.25, 0.25]],
            vec![[0.5, 0.0], [0.0, 0.5]],
            vec![[0.4, 0.1], [0.1, 0.4]],
        ] {
            let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let (pv, pl) = marginals(&joint(&r));
            for x in pv.iter().chain(pl.iter()) {
                assert!((x - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_mass() {
        assert!(JointDistribution::from_rows(&[&[0.5, 0.6]]).is_err());
        assert!(JointDistribution::from_rows(&[&[1.5, -0.5]]).is_err());
        assert!(JointDistribution::from_rows(&[&[f64::NAN, 1.0]]).is_err());
        assert!(JointDistribution::from_weights(DMatrix::zeros(2, 2)).is_err());
        let p = JointDistribution::from_weights(DMatrix::from_element(3, 5, 7.0)).unwrap();
        assert!((p.mass().sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_cooccurrence(&joint(&[&[0.25, 0.25], &[0.25, 0.25]])).unwrap();
        assert_close(n.matrix(), &DMatrix::from_element(2, 2, 0.5), 1e-15);
        let n = normalize_cooccurrence(&joint(&[&[0.5, 0.0], &[0.0, 0.5]])).unwrap();
        assert_close(n.matrix(), &DMatrix::identity(2, 2), 1e-15);
        let n = normalize_cooccurrence(&joint(&[&[0.4, 0.1], &[0.1, 0.4]])).unwrap();
        // 0.4 / sqrt(0.5 * 0.5) = 0.8
        assert_close(n.matrix(), &DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]), 1e-15);
    }

    #[test]
    fn pruning_keeps_index_map() {
        let p = joint(&[&[0.3, 0.0, 0.2], &[0.0, 0.0, 0.0], &[0.1, 0.0, 0.4]]);
        let n = normalize_cooccurrence(&p).unwrap();
        assert_eq!(n.visual_index(), &[0, 2]);
        assert_eq!(n.language_index(), &[0, 2]);
        assert_eq!(n.matrix().shape(), (2, 2));
        let f = DMatrix::from_row_slice(3, 1, &[1.0, 9.0, 2.0]);
        let factor = n.visual_factor(&f).unwrap();
        let back = n.visual_features(&factor);
        assert_close(&back, &DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 2.0]), 1e-15);
    }

    #[test]
    fn single_entry_is_degenerate() {
        let p = joint(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(normalize_cooccurrence(&p), Err(Error::DegenerateDistribution(_))));
    }

    #[test]
    fn text_induced_examples() {
        let pt = text_induced(&joint(&[&[0.5, 0.0], &[0.0, 0.5]])).unwrap();
        assert_close(pt.matrix(), &DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]), 1e-15);
        // direct summation: P_T(v,v') = sum_l 0.5 * 0.5 * 0.5 = 0.25
        let pt = text_induced(&joint(&[&[0.25, 0.25], &[0.25, 0.25]])).unwrap();
        assert_close(pt.matrix(), &DMatrix::from_element(2, 2, 0.25), 1e-15);
    }

    #[test]
    fn text_induced_commutes_with_relabeling() {
        let p = joint(&[&[0.1, 0.2, 0.0], &[0.05, 0.05, 0.3], &[0.2, 0.0, 0.1]]);
        let perm = [2, 0, 1];
        let q = p.permuted(&perm, &[0, 1, 2]).unwrap();
        let a = text_induced(&p).unwrap();
        let b = text_induced(&q).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((b.matrix()[(r, c)] - a.matrix()[(perm[r], perm[c])]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalized_uni_examples() {
        let n = normalize_cooccurrence(&joint(&[&[0.5, 0.0], &[0.0, 0.5]])).unwrap();
        assert_close(normalized_uni(&n).unwrap().matrix(), &DMatrix::identity(2, 2), 1e-15);
        let n = normalize_cooccurrence(&joint(&[&[0.4, 0.1], &[0.1, 0.4]])).unwrap();
        // [[.8,.2],[.2,.8]]^2 = [[.68,.32],[.32,.68]]
        let expect = DMatrix::from_row_slice(2, 2, &[0.68, 0.32, 0.32, 0.68]);
        assert_close(normalized_uni(&n).unwrap().matrix(), &expect, 1e-15);
        // independent joint -> rank-one normalized matrix
        let p = JointDistribution::from_weights(DMatrix::from_fn(3, 4, |r, c| {
            (r as f64 + 1.0) * (c as f64 + 2.0)
        }))
        .unwrap();
        let uni = normalized_uni(&normalize_cooccurrence(&p).unwrap()).unwrap();
        let sv = uni.matrix().singular_values();
        assert!(sv.iter().filter(|&&s| s > 1e-12).count() == 1);
    }

    #[test]
    fn normalized_uni_matches_normalized_text_induced() {
        let p = joint(&[&[0.1, 0.2, 0.0, 0.05], &[0.05, 0.05, 0.3, 0.0], &[0.0, 0.0, 0.0, 0.0], &[0.2, 0.0, 0.0, 0.05]]);
        let direct = normalize_induced(&text_induced(&p).unwrap()).unwrap();
        let via = normalized_uni(&normalize_cooccurrence(&p).unwrap()).unwrap();
        assert_close(&direct.matrix, via.matrix(), 1e-15);
        let (pv, _) = marginals(&p);
        let pt_marginal = text_induced(&p).unwrap().marginal();
        assert_close(&DMatrix::from_column_slice(4, 1, pv.as_slice()), &DMatrix::from_column_slice(4, 1, pt_marginal.as_slice()), 1e-15);
    }

    #[test]
    fn augmentation_joint_examples() {
        let pv = DVector::from_vec(vec![0.3, 0.7]);
        let id = AugmentationModel::new(DMatrix::identity(2, 2), 1).unwrap();
        let pa = augmentation_joint(&id, &pv).unwrap();
        assert_close(pa.matrix(), &DMatrix::from_diagonal(&pv), 1e-15);

        let a = DMatrix::from_row_slice(4, 2, &[0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5]);
        let model = AugmentationModel::new(a, 2).unwrap();
        let pa = augmentation_joint(&model, &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let expect = DMatrix::from_fn(4, 4, |r, c| if r / 2 == c / 2 { 0.125 } else { 0.0 });
        assert_close(pa.matrix(), &expect, 1e-15);
    }

    #[test]
    fn induced_rejects_asymmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[0.25, 0.3, 0.2, 0.25]);
        assert!(InducedDistribution::new(m, InducedKind::Estimated).is_err());
    }

    #[test]
    fn singular_values_at_most_one() {
        let p = joint(&[&[0.1, 0.2, 0.0, 0.05], &[0.05, 0.05, 0.3, 0.0], &[0.2, 0.0, 0.0, 0.05]]);
        let n = normalize_cooccurrence(&p).unwrap();
        let sv = n.matrix().singular_values();
        assert!(sv.iter().all(|&s| s <= 1.0 + 1e-9));
        assert!((sv.max() - 1.0).abs() < 1e-9);
        assert!(frobenius_sq(n.matrix()) > 1.0);
    }

    #[test]
    fn labels_validate() {
        assert!(LabelAssignment::new(vec![0, 1], vec![0, 1], 2).is_ok());
        assert!(LabelAssignment::new(vec![0, 0], vec![0, 1], 2).is_err());
        assert!(LabelAssignment::new(vec![0, 2], vec![], 2).is_err());
    }
}
