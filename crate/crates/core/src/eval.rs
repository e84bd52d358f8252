//! Downstream metrics: linear probing, labeling errors, connectivity and
//! co-occurrence estimation from learned features.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::distributions::{InducedDistribution, InducedKind, JointDistribution, LabelAssignment};
use crate::error::{Error, Result};
use crate::losses::EncoderTable;
use crate::rng;

pub const PROBE_RIDGE: f64 = 1e-10;
/// Gram condition number above which a probe is flagged rank deficient.
pub const PROBE_CONDITION_LIMIT: f64 = 1e12;
/// Number of samples drawn for the cross-class similarity matrix.
pub const OUT_SAMPLE_CAP: usize = 1000;

/// Least-squares linear classifier with argmax readout.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: DMatrix<f64>,
    rank_deficient: bool,
}

impl LinearProbe {
    /// `k x r` weight matrix.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Set when the weighted Gram matrix is numerically singular and the fit
    /// relied on the ridge.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn predict(&self, features: &EncoderTable) -> Result<Vec<usize>> {
        if features.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "probe fitted on dimension {}, features have {}",
                self.dim(),
                features.dim()
            )));
        }
        let scores = features.features() * &self.weights;
        Ok((0..scores.nrows())
            .map(|i| {
                let row = scores.row(i);
                // first maximum wins, so ties go to the smallest class index
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

fn check_labels(n: usize, labels: &[usize], weights: &DVector<f64>) -> Result<usize> {
    if labels.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} feature rows, {} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidConfig("probe weights must be finite and non-negative".into()));
    }
    Ok(labels.iter().copied().max().map_or(0, |m| m + 1))
}

/// Weighted least-squares fit of one-hot targets: `B = (F^T W F + eps I)^-1 F^T W Y`.
///
/// The ridge is scaled by the mean diagonal of the Gram matrix so that
/// rescaling the features leaves predictions unchanged.
pub fn fit_probe(features: &EncoderTable, labels: &[usize], weights: &DVector<f64>) -> Result<LinearProbe> {
    let classes = check_labels(features.len(), labels, weights)?;
    if classes < 2 {
        return Err(Error::InvalidLabels("probe needs at least 2 classes".into()));
    }
    let f = features.features();
    let k = f.ncols();
    let wf = DMatrix::from_fn(f.nrows(), k, |i, j| weights[i] * f[(i, j)]);
    let mut gram = wf.transpose() * f;
    let mut rhs = DMatrix::zeros(k, classes);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..k {
            rhs[(j, y)] += wf[(i, j)];
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let rank_deficient = !(min > 0.0) || max / min > PROBE_CONDITION_LIMIT;
    let scale = (gram.trace() / k as f64).max(f64::MIN_POSITIVE);
    for j in 0..k {
        gram[(j, j)] += PROBE_RIDGE * scale;
    }
    let weights = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => {
            let pinv = gram
                .pseudo_inverse(max.abs() * 1e-12)
                .map_err(|e| Error::NumericalFailure(e.to_string()))?;
            pinv * rhs
        }
    };
    if weights.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure("probe weights are not finite".into()));
    }
    Ok(LinearProbe { weights, rank_deficient })
}

/// Weighted 0-1 error of the probe's argmax predictions.
pub fn probe_error(
    probe: &LinearProbe,
    features: &EncoderTable,
    labels: &[usize],
    weights: &DVector<f64>,
) -> Result<f64> {
    check_labels(features.len(), labels, weights)?;
    let pred = probe.predict(features)?;
    let total: f64 = weights.sum();
    if total <= 0.0 {
        return Err(Error::InvalidConfig("probe weights sum to zero".into()));
    }
    let wrong: f64 = pred
        .iter()
        .zip(labels)
        .zip(weights.iter())
        .filter(|((p, y), _)| p != y)
        .map(|(_, w)| w)
        .sum();
    Ok(wrong / total)
}

/// Fit a probe and evaluate it on the same samples.
pub fn fit_and_score(features: &EncoderTable, labels: &[usize], weights: &DVector<f64>) -> Result<(LinearProbe, f64)> {
    let probe = fit_probe(features, labels, weights)?;
    let err = probe_error(&probe, features, labels, weights)?;
    Ok((probe, err))
}

/// `sum_{v,l} P(v,l) 1[y(v) != y(l)]`.
pub fn labeling_error(p: &JointDistribution, labels: &LabelAssignment) -> Result<f64> {
    if labels.visual().len() != p.n_visual() || labels.language().len() != p.n_language() {
        return Err(Error::InvalidLabels(format!(
            "labels cover {}x{} samples, distribution is {}x{}",
            labels.visual().len(),
            labels.language().len(),
            p.n_visual(),
            p.n_language()
        )));
    }
    let m = p.mass();
    let mut err = 0.0;
    for (v, &yv) in labels.visual().iter().enumerate() {
        for (l, &yl) in labels.language().iter().enumerate() {
            if yv != yl {
                err += m[(v, l)];
            }
        }
    }
    Ok(err)
}

/// Labeling error of a symmetric pair distribution over one sample set.
pub fn surrogate_labeling_error(p: &InducedDistribution, labels: &[usize]) -> Result<f64> {
    if labels.len() != p.len() {
        return Err(Error::InvalidLabels(format!("{} labels for {} samples", labels.len(), p.len())));
    }
    let m = p.matrix();
    let mut err = 0.0;
    for (i, &a) in labels.iter().enumerate() {
        for (j, &b) in labels.iter().enumerate() {
            if a != b {
                err += m[(i, j)];
            }
        }
    }
    Ok(err)
}

/// How a feature Gram matrix becomes a pair distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityPolicy {
    /// Cosine similarity of the rows, clamped at 0.
    #[default]
    Cosine,
    /// Raw inner products, clamped at 0.
    InnerProduct,
}

fn unit_rows(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = f.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Clamped similarity matrix under the given policy.
pub fn similarity_matrix(features: &EncoderTable, policy: SimilarityPolicy) -> DMatrix<f64> {
    let f = match policy {
        SimilarityPolicy::Cosine => unit_rows(features.features()),
        SimilarityPolicy::InnerProduct => features.features().clone(),
    };
    (&f * f.transpose()).map(|x| x.max(0.0))
}

/// Pair distribution estimated from features, scaled to total mass 1.
pub fn estimate_cooccurrence(features: &EncoderTable, policy: SimilarityPolicy) -> Result<InducedDistribution> {
    let s = similarity_matrix(features, policy);
    let total = s.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateDistribution("all feature similarities are non-positive".into()));
    }
    InducedDistribution::new(s / total, InducedKind::Estimated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connectivity {
    pub beta: f64,
    pub per_class: Vec<f64>,
    pub out_mean: f64,
}

fn block_mean(s: &DMatrix<f64>, idx: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &i in idx {
        for &j in idx {
            acc += s[(i, j)];
        }
    }
    acc / (idx.len() * idx.len()) as f64
}

/// Ratio of mean within-class similarity to the mean similarity among a
/// random sample of at most [`OUT_SAMPLE_CAP`] indices, averaged over classes.
pub fn intra_class_connectivity(features: &EncoderTable, labels: &[usize], seed: u64) -> Result<Connectivity> {
    if labels.len() != features.len() {
        return Err(Error::InvalidLabels(format!("{} labels for {} samples", labels.len(), features.len())));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::InvalidLabels("connectivity needs at least 2 classes".into()));
    }
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    if let Some((class, m)) = members.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::ClassTooSmall { class, count: m.len() });
    }
    let s = similarity_matrix(features, SimilarityPolicy::Cosine);
    let n = features.len();
    let mut r = rng::seeded(seed);
    let mut out: Vec<usize> = sample(&mut r, n, n.min(OUT_SAMPLE_CAP)).into_vec();
    out.sort_unstable();
    let out_mean = block_mean(&s, &out);
    if out_mean <= 0.0 {
        return Err(Error::NumericalFailure("cross-class similarity mean is zero".into()));
    }
    let per_class: Vec<f64> = members.iter().map(|m| block_mean(&s, m) / out_mean).collect();
    let beta = per_class.iter().sum::<f64>() / classes as f64;
    Ok(Connectivity { beta, per_class, out_mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instance: String,
    pub probe_error: f64,
    pub labeling_error: Option<f64>,
    pub surrogate_labeling_error: f64,
    pub beta: f64,
    pub beta_per_class: Vec<f64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let rate = |x: f64| (0.0..=1.0 + 1e-12).contains(&x);
        let ok = rate(self.probe_error)
            && self.labeling_error.is_none_or(rate)
            && rate(self.surrogate_labeling_error)
            && self.beta >= 0.0
            && self.beta_per_class.iter().all(|b| *b >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("report {} has out-of-range metrics", self.instance)))
        }
    }
}

/// Evaluate visual features against a uni-modal pair distribution.
pub fn evaluate(
    instance: &str,
    features: &EncoderTable,
    labels: &[usize],
    weights: &DVector<f64>,
    graph: &InducedDistribution,
    joint: Option<(&JointDistribution, &LabelAssignment)>,
    seed: u64,
) -> Result<EvalReport> {
    let (_, probe_error) = fit_and_score(features, labels, weights)?;
    let labeling_error = joint.map(|(p, l)| labeling_error(p, l)).transpose()?;
    let conn = intra_class_connectivity(features, labels, seed)?;
    let report = EvalReport {
        instance: instance.to_string(),
        probe_error,
        labeling_error,
        surrogate_labeling_error: surrogate_labeling_error(graph, labels)?,
        beta: conn.beta,
        beta_per_class: conn.per_class,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::text_induced;
    use crate::linalg::{max_principal_angle, symmetric_eigen_desc};
    use crate::losses::Side;
    use rand::Rng as _;

    fn table(m: DMatrix<f64>) -> EncoderTable {
        EncoderTable::new(m, Side::Visual).unwrap()
    }

    fn one_hot(labels: &[usize], r: usize) -> EncoderTable {
        table(DMatrix::from_fn(labels.len(), r, |i, c| if labels[i] == c { 1.0 } else { 0.0 }))
    }

    fn uniform(n: usize) -> DVector<f64> {
        DVector::from_element(n, 1.0 / n as f64)
    }

    #[test]
    fn one_hot_probe_is_perfect() {
        let y = [0, 1, 2, 1, 0, 2];
        let (probe, err) = fit_and_score(&one_hot(&y, 3), &y, &uniform(6)).unwrap();
        assert_eq!(err, 0.0);
        assert!(!probe.rank_deficient());
        assert_eq!((probe.dim(), probe.classes()), (3, 3));
    }

    #[test]
    fn constant_features_predict_majority() {
        let y = [0, 1, 0, 1];
        let f = table(DMatrix::from_element(4, 2, 1.0));
        let (probe, err) = fit_and_score(&f, &y, &uniform(4)).unwrap();
        assert!((err - 0.5).abs() < 1e-15);
        assert!(probe.rank_deficient());

        let y = [0, 1, 1, 2, 1];
        let f = table(DMatrix::from_element(5, 1, 0.7));
        let (_, err) = fit_and_score(&f, &y, &uniform(5)).unwrap();
        assert!((err - (1.0 - 3.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn block_eigenvectors_separate_blocks() {
        let p = JointDistribution::from_weights(DMatrix::from_fn(6, 6, |i, j| {
            if i / 2 == j / 2 {
                1.0 + ((i + j) % 3) as f64
            } else {
                0.0
            }
        }))
        .unwrap();
        let pt = text_induced(&p).unwrap();
        let (_, vecs) = symmetric_eigen_desc(pt.matrix());
        let f = table(vecs.columns(0, 3).into_owned());
        let y: Vec<usize> = (0..6).map(|i| i / 2).collect();
        let (_, err) = fit_and_score(&f, &y, &pt.marginal()).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn probe_invariant_to_invertible_transforms() {
        let mut r = rng::seeded(3);
        let n = 40;
        let f = DMatrix::from_fn(n, 4, |_, _| r.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let w = DVector::from_fn(n, |_, _| r.random_range(0.1..1.0));
        let t = DMatrix::from_fn(4, 4, |i, j| if i == j { 3.0 } else { r.random_range(-1.0..1.0) });
        let base = table(f.clone());
        let moved = table(&f * &t);
        let (p0, e0) = fit_and_score(&base, &y, &w).unwrap();
        let (p1, e1) = fit_and_score(&moved, &y, &w).unwrap();
        assert!((e0 - e1).abs() < 1e-10);
        assert_eq!(p0.predict(&base).unwrap(), p1.predict(&moved).unwrap());
    }

    #[test]
    fn probe_needs_two_classes() {
        let f = one_hot(&[0, 0], 1);
        assert!(matches!(fit_probe(&f, &[0, 0], &uniform(2)), Err(Error::InvalidLabels(_))));
    }

    #[test]
    fn labeling_error_examples() {
        let p = JointDistribution::from_rows(&[&[0.4, 0.1], &[0.1, 0.4]]).unwrap();
        let labels = LabelAssignment::new(vec![0, 1], vec![0, 1], 2).unwrap();
        assert!((labeling_error(&p, &labels).unwrap() - 0.2).abs() < 1e-15);
        let same = LabelAssignment::new(vec![0, 0], vec![0, 0], 1).unwrap();
        assert_eq!(labeling_error(&p, &same).unwrap(), 0.0);
        let diag = JointDistribution::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]).unwrap();
        assert_eq!(labeling_error(&diag, &labels).unwrap(), 0.0);
    }

    #[test]
    fn surrogate_examples() {
        let diag = InducedDistribution::new(DMatrix::from_diagonal_element(2, 2, 0.5), InducedKind::Estimated).unwrap();
        assert_eq!(surrogate_labeling_error(&diag, &[0, 1]).unwrap(), 0.0);
        let u = InducedDistribution::new(DMatrix::from_element(2, 2, 0.25), InducedKind::Estimated).unwrap();
        assert!((surrogate_labeling_error(&u, &[0, 1]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn estimate_examples() {
        let f = table(DMatrix::identity(4, 4));
        let est = estimate_cooccurrence(&f, SimilarityPolicy::Cosine).unwrap();
        assert!((est.matrix() - DMatrix::identity(4, 4) / 4.0).amax() < 1e-15);
        let same = table(DMatrix::from_element(5, 3, 0.2));
        let est = estimate_cooccurrence(&same, SimilarityPolicy::Cosine).unwrap();
        assert!(est.matrix().iter().all(|x| (x - 1.0 / 25.0).abs() < 1e-15));
        let neg = table(DMatrix::from_row_slice(2, 1, &[1.0, -1.0]));
        let est = estimate_cooccurrence(&neg, SimilarityPolicy::InnerProduct).unwrap();
        assert_eq!(est.matrix()[(0, 1)], 0.0);
    }

    #[test]
    fn estimate_recovers_block_structure() {
        // two blocks of uniform co-occurrence; the optimal visual features are
        // constant within a block and orthogonal across blocks
        let p = JointDistribution::from_weights(DMatrix::from_fn(6, 6, |i, j| if i / 3 == j / 3 { 1.0 } else { 0.0 }))
            .unwrap();
        let (fv, _) = crate::spectral::optimal_encoders(&p, &crate::spectral::OptimalEncoderParams::identity(2)).unwrap();
        let est = estimate_cooccurrence(&fv, SimilarityPolicy::Cosine).unwrap();
        let truth = crate::distributions::normalized_uni(&crate::distributions::normalize_cooccurrence(&p).unwrap())
            .unwrap();
        let (_, a) = symmetric_eigen_desc(est.matrix());
        let (_, b) = symmetric_eigen_desc(truth.matrix());
        let angle = max_principal_angle(&a.columns(0, 2).into_owned(), &b.columns(0, 2).into_owned());
        assert!(angle < 1e-6, "angle {angle}");
    }

    #[test]
    fn connectivity_of_identical_features_is_one() {
        let f = table(DMatrix::from_element(6, 2, 1.0));
        let c = intra_class_connectivity(&f, &[0, 0, 1, 1, 2, 2], 1).unwrap();
        assert!((c.beta - 1.0).abs() < 1e-14);
    }

    #[test]
    fn connectivity_of_orthogonal_classes() {
        // all samples enter the out-sample, so mean-out is the same-class
        // fraction of ordered pairs: 3 classes of size 4 -> 48/144
        let y: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let c = intra_class_connectivity(&one_hot(&y, 3), &y, 1).unwrap();
        let out = 48.0 / 144.0;
        assert!((c.out_mean - out).abs() < 1e-15);
        for b in &c.per_class {
            assert!((b - 1.0 / out).abs() < 1e-12);
        }
        assert!(c.beta > 1.0);
    }

    #[test]
    fn shuffled_labels_give_unit_connectivity() {
        let mut betas = Vec::new();
        for seed in 0..20 {
            let mut r = rng::seeded(100 + seed);
            // two well-separated clusters of features
            let n = 60;
            let f = table(DMatrix::from_fn(n, 2, |i, j| {
                let base = if (i < n / 2) == (j == 0) { 1.0 } else { 0.1 };
                base + 0.05 * r.random_range(-1.0..1.0)
            }));
            let mut y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let perm = crate::synth::random_permutation(n, &mut r);
            y = perm.iter().map(|&i| y[i]).collect();
            betas.push(intra_class_connectivity(&f, &y, seed).unwrap().beta);
        }
        let mean = betas.iter().sum::<f64>() / betas.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean beta {mean}");
    }

    #[test]
    fn connectivity_rejects_small_classes() {
        let f = one_hot(&[0, 0, 1], 2);
        assert!(matches!(
            intra_class_connectivity(&f, &[0, 0, 1], 0),
            Err(Error::ClassTooSmall { class: 1, count: 1 })
        ));
    }
}
