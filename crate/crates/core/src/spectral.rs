//! SVD of the normalized co-occurrence matrix, closed-form optimal encoders,
//! hierarchical-graph spectra and the computable terms of the downstream
//! error bound.
//!
//! Note on bases: singular vectors are only defined up to sign (and up to
//! rotation inside repeated singular values), and the optimal encoders are
//! only defined up to an invertible diagonal `D` and a rotation `R`. Compare
//! decompositions through singular values, subspace angles, loss values and
//! probe predictions, never entrywise.

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::distributions::{marginals, normalize_cooccurrence, JointDistribution, LabelAssignment, NormalizedCooccurrence};
use crate::error::{Error, Result};
use crate::eval::labeling_error;
use crate::losses::{EncoderTable, Side};
use crate::synth::HierarchicalGraphSpec;

/// Residual above which [`decompose`] gives up.
pub const RECONSTRUCTION_LIMIT: f64 = 1e-6;
/// Singular values closer than this are treated as equal.
pub const GAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// `N_V' x r` with orthonormal columns.
    pub u: DMatrix<f64>,
    /// Descending.
    pub singular_values: DVector<f64>,
    /// `N_L' x r` with orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn rank_bound(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * self.v.transpose()
    }

    /// `sigma_i` with 1-based `i`; `None` past the end.
    pub fn sigma(&self, i: usize) -> Option<f64> {
        if i == 0 {
            None
        } else {
            self.singular_values.get(i - 1).copied()
        }
    }

    /// Optimal factorization residual at rank `k`: `sum_{i>k} sigma_i^2`.
    pub fn tail_energy(&self, k: usize) -> f64 {
        self.singular_values.iter().skip(k).map(|s| s * s).sum()
    }

    /// `sum_{i<=k} sigma_i^2`, so the optimal spectral loss is its negation.
    pub fn head_energy(&self, k: usize) -> f64 {
        self.singular_values.iter().take(k).map(|s| s * s).sum()
    }

    /// True when `sigma_k` and `sigma_{k+1}` coincide, leaving the top-`k`
    /// subspace ill-defined.
    pub fn degenerate_at(&self, k: usize) -> bool {
        match (self.sigma(k), self.sigma(k + 1)) {
            (Some(a), Some(b)) => (a - b).abs() <= GAP_TOLERANCE,
            _ => false,
        }
    }
}

/// Thin SVD with singular values sorted descending.
pub fn decompose(p: &NormalizedCooccurrence) -> Result<SpectralDecomposition> {
    decompose_matrix(p.matrix())
}

pub fn decompose_matrix(m: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::NumericalFailure("SVD did not return U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::NumericalFailure("SVD did not return V".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sv = DVector::from_iterator(order.len(), order.iter().map(|&i| svd.singular_values[i]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)]);
    let out = SpectralDecomposition { u, singular_values: sv, v };
    let residual = (out.reconstruct() - m).norm();
    if !residual.is_finite() || residual > RECONSTRUCTION_LIMIT {
        return Err(Error::NumericalFailure(format!("SVD reconstruction residual {residual:e}")));
    }
    Ok(out)
}

/// `D` (diagonal scaling) and `R` (rotation) of the optimal encoder family.
#[derive(Debug, Clone)]
pub struct OptimalEncoderParams {
    pub dim: usize,
    pub scaling: DVector<f64>,
    pub rotation: DMatrix<f64>,
}

impl OptimalEncoderParams {
    pub fn identity(dim: usize) -> Self {
        Self { dim, scaling: DVector::from_element(dim, 1.0), rotation: DMatrix::identity(dim, dim) }
    }

    pub fn new(scaling: DVector<f64>, rotation: DMatrix<f64>) -> Result<Self> {
        let dim = scaling.len();
        if dim == 0 || rotation.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch(format!(
                "scaling of length {dim} with rotation {:?}",
                rotation.shape()
            )));
        }
        if scaling.iter().any(|&d| d == 0.0 || !d.is_finite()) {
            return Err(Error::InvalidConfig("scaling must be invertible".into()));
        }
        let orth = (rotation.transpose() * &rotation - DMatrix::identity(dim, dim)).amax();
        if orth > 1e-10 {
            return Err(Error::InvalidConfig(format!("rotation is not orthogonal ({orth:e})")));
        }
        Ok(Self { dim, scaling, rotation })
    }
}

/// Closed-form minimizers of the multi-modal spectral loss:
/// `f_V(v) = (U^k_v D R)^T / sqrt(P_V(v))` and
/// `f_L(l) = (V^k_l diag(sigma_1..sigma_k) D^-1 R)^T / sqrt(P_L(l))`.
///
/// Zero-marginal samples receive zero features.
pub fn optimal_encoders(
    p: &JointDistribution,
    params: &OptimalEncoderParams,
) -> Result<(EncoderTable, EncoderTable)> {
    let norm = normalize_cooccurrence(p)?;
    let dec = decompose(&norm)?;
    optimal_encoders_from(&norm, &dec, params)
}

pub fn optimal_encoders_from(
    norm: &NormalizedCooccurrence,
    dec: &SpectralDecomposition,
    params: &OptimalEncoderParams,
) -> Result<(EncoderTable, EncoderTable)> {
    let k = params.dim;
    if k == 0 || k > dec.rank_bound() {
        return Err(Error::InvalidConfig(format!(
            "embedding dimension {k} outside [1, {}]",
            dec.rank_bound()
        )));
    }
    let d = DMatrix::from_diagonal(&params.scaling);
    let d_inv = DMatrix::from_diagonal(&params.scaling.map(|x| 1.0 / x));
    let sigma = DMatrix::from_diagonal(&dec.singular_values.rows(0, k).into_owned());
    let fv = dec.u.columns(0, k) * &d * &params.rotation;
    let fl = dec.v.columns(0, k) * sigma * d_inv * &params.rotation;
    Ok((
        EncoderTable::new(norm.visual_features(&fv), Side::Visual)?,
        EncoderTable::new(norm.language_features(&fl), Side::Language)?,
    ))
}

/// Closed-form spectrum of a three-layer hierarchical random graph, descending:
/// `1/(s_l s_h)`, then `s_h (p_h - p_l)` repeated `s_l - 1` times, then zeros.
pub fn hierarchical_eigenvalues(spec: &HierarchicalGraphSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let (sl, sh) = (spec.top_branches, spec.inner_branches);
    let mut out = Vec::with_capacity(sl * sh);
    out.push(1.0 / (sl * sh) as f64);
    out.extend(std::iter::repeat_n(sh as f64 * (spec.p_high - spec.p_low), sl - 1));
    out.extend(std::iter::repeat_n(0.0, sl * sh - sl));
    Ok(out)
}

/// Non-fatal conditions surfaced with a bound report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralFlag {
    /// `sigma_{k+1} = 1`: the graph has more than `k` components and the
    /// dominant term is infinite.
    SpectralGapZero,
    /// `sigma_k = sigma_{k+1}`.
    DegenerateGap,
    /// `floor(3k/4) = 0`, so the finite-sample gap is undefined.
    GapIndexUndefined,
}

fn finite_or_inf<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(if *x > 0.0 { "+inf" } else { "-inf" })
    }
}

/// Computable terms of the downstream error bound for one instance.
///
/// The finite-sample part has no computable form here and is not reported.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub dim: usize,
    pub labeling_error: f64,
    pub sigma_next: f64,
    /// `alpha / (1 - sigma_{k+1}^2)`, `+inf` when the gap is zero.
    #[serde(serialize_with = "finite_or_inf")]
    pub dominant_term: f64,
    /// `sigma_{floor(3k/4)}^2 - sigma_k^2`.
    pub spectral_gap: Option<f64>,
    /// Largest absolute feature entry of the closed-form encoders at `D = R = I`.
    pub feature_bound: f64,
    /// `(k kappa + 2 k kappa^2 + 1)^2`.
    pub constant_proxy: f64,
    pub flags: Vec<SpectralFlag>,
}

pub fn bound_report(p: &JointDistribution, labels: &LabelAssignment, k: usize) -> Result<BoundReport> {
    let alpha = labeling_error(p, labels)?;
    let norm = normalize_cooccurrence(p)?;
    let dec = decompose(&norm)?;
    if k == 0 || k + 1 > dec.rank_bound() {
        return Err(Error::InvalidConfig(format!(
            "bound needs 1 <= k < {}, got k = {k}",
            dec.rank_bound()
        )));
    }
    let mut flags = Vec::new();
    let sigma_next = dec.sigma(k + 1).unwrap_or(0.0).clamp(0.0, 1.0);
    let dominant_term = if (1.0 - sigma_next) <= GAP_TOLERANCE {
        flags.push(SpectralFlag::SpectralGapZero);
        f64::INFINITY
    } else {
        alpha / (1.0 - sigma_next * sigma_next)
    };
    if dec.degenerate_at(k) {
        flags.push(SpectralFlag::DegenerateGap);
    }
    let spectral_gap = match (3 * k) / 4 {
        0 => {
            flags.push(SpectralFlag::GapIndexUndefined);
            None
        }
        j => Some(dec.sigma(j).unwrap().powi(2) - dec.sigma(k).unwrap().powi(2)),
    };
    let (fv, fl) = optimal_encoders_from(&norm, &dec, &OptimalEncoderParams::identity(k))?;
    let kappa = fv.features().amax().max(fl.features().amax());
    let kf = k as f64;
    let constant_proxy = (kf * kappa + 2.0 * kf * kappa * kappa + 1.0).powi(2);
    Ok(BoundReport {
        dim: k,
        labeling_error: alpha,
        sigma_next,
        dominant_term,
        spectral_gap,
        feature_bound: kappa,
        constant_proxy,
        flags,
    })
}

/// Singular values of `P~_M` for a joint distribution.
pub fn singular_values(p: &JointDistribution) -> Result<Vec<f64>> {
    let norm = normalize_cooccurrence(p)?;
    Ok(decompose(&norm)?.singular_values.iter().copied().collect())
}

/// Visual marginal of a joint distribution restricted to its support, in the
/// order used by [`NormalizedCooccurrence`].
pub fn support_marginal(p: &JointDistribution) -> DVector<f64> {
    let (pv, _) = marginals(p);
    DVector::from_iterator(pv.len(), pv.iter().copied().filter(|&x| x > 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigen_desc;
    use crate::losses::scl_loss;
    use crate::synth::build_hierarchical_matrix;

    fn normalized(rows: &[&[f64]]) -> NormalizedCooccurrence {
        normalize_cooccurrence(&JointDistribution::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn decompose_examples() {
        let d = decompose(&normalized(&[&[0.5, 0.0], &[0.0, 0.5]])).unwrap();
        assert!((d.singular_values[0] - 1.0).abs() < 1e-12 && (d.singular_values[1] - 1.0).abs() < 1e-12);
        // [[a,b],[b,a]] has singular values a+b and |a-b|
        let d = decompose(&normalized(&[&[0.4, 0.1], &[0.1, 0.4]])).unwrap();
        assert!((d.singular_values[0] - 1.0).abs() < 1e-12);
        assert!((d.singular_values[1] - 0.6).abs() < 1e-12);
        let d = decompose(&normalized(&[&[0.06, 0.14], &[0.24, 0.56]])).unwrap();
        assert!(d.singular_values[1] <= 1e-10);
    }

    #[test]
    fn decomposition_invariants() {
        let n = normalized(&[
            &[0.05, 0.1, 0.0, 0.02, 0.03],
            &[0.01, 0.02, 0.2, 0.07, 0.0],
            &[0.1, 0.0, 0.05, 0.05, 0.3],
        ]);
        let d = decompose(&n).unwrap();
        let r = d.rank_bound();
        let i = DMatrix::<f64>::identity(r, r);
        assert!((d.u.transpose() * &d.u - &i).amax() < 1e-9);
        assert!((d.v.transpose() * &d.v - &i).amax() < 1e-9);
        assert!((d.reconstruct() - n.matrix()).norm() < 1e-9);
        assert!(d.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn optimal_encoders_on_diagonal() {
        let p = JointDistribution::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]).unwrap();
        let (fv, fl) = optimal_encoders(&p, &OptimalEncoderParams::identity(2)).unwrap();
        let loss = scl_loss(&fv, &fl, &p).unwrap();
        assert!((loss + 2.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_encoders_any_scaling_rotation_same_loss() {
        let p = JointDistribution::from_rows(&[
            &[0.05, 0.1, 0.0, 0.02, 0.03],
            &[0.01, 0.02, 0.2, 0.07, 0.0],
            &[0.1, 0.0, 0.05, 0.05, 0.3],
        ])
        .unwrap();
        let base = {
            let (fv, fl) = optimal_encoders(&p, &OptimalEncoderParams::identity(2)).unwrap();
            scl_loss(&fv, &fl, &p).unwrap()
        };
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let params = OptimalEncoderParams::new(
            DVector::from_vec(vec![2.5, -0.4]),
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
        )
        .unwrap();
        let (fv, fl) = optimal_encoders(&p, &params).unwrap();
        assert!((scl_loss(&fv, &fl, &p).unwrap() - base).abs() < 1e-12);
        let sv = singular_values(&p).unwrap();
        assert!((base + sv[0] * sv[0] + sv[1] * sv[1]).abs() < 1e-10);
    }

    #[test]
    fn params_validate() {
        assert!(OptimalEncoderParams::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).is_err());
        assert!(OptimalEncoderParams::new(DVector::from_vec(vec![1.0, 1.0]), DMatrix::from_element(2, 2, 1.0)).is_err());
    }

    #[test]
    fn hierarchical_eigenvalue_examples() {
        let spec = HierarchicalGraphSpec::new(2, 2, 0.025, 0.1).unwrap();
        let closed = hierarchical_eigenvalues(&spec).unwrap();
        let (numeric, _) = symmetric_eigen_desc(build_hierarchical_matrix(&spec).unwrap().matrix());
        for (a, b) in closed.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((closed[0] - 0.25).abs() < 1e-15 && (closed[1] - 0.15).abs() < 1e-15);

        let flat = HierarchicalGraphSpec::from_separation(3, 2, 0.0).unwrap();
        let e = hierarchical_eigenvalues(&flat).unwrap();
        assert!((e[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!(e[1..].iter().all(|x| x.abs() < 1e-15));

        let s3 = HierarchicalGraphSpec::from_separation(3, 1, 0.5).unwrap();
        let closed = hierarchical_eigenvalues(&s3).unwrap();
        let (numeric, _) = symmetric_eigen_desc(build_hierarchical_matrix(&s3).unwrap().matrix());
        let gap = s3.p_high - s3.p_low;
        assert!((closed[1] - gap).abs() < 1e-15 && (closed[2] - gap).abs() < 1e-15);
        for (a, b) in closed.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_report_aligned_is_zero() {
        let p = JointDistribution::from_rows(&[
            &[0.2, 0.1, 0.0, 0.0],
            &[0.1, 0.1, 0.0, 0.0],
            &[0.0, 0.0, 0.25, 0.05],
            &[0.0, 0.0, 0.05, 0.15],
        ])
        .unwrap();
        let y = LabelAssignment::new(vec![0, 0, 1, 1], vec![0, 0, 1, 1], 2).unwrap();
        let r = bound_report(&p, &y, 2).unwrap();
        assert_eq!(r.labeling_error, 0.0);
        assert_eq!(r.dominant_term, 0.0);
        assert!(r.dominant_term >= r.labeling_error);
    }

    #[test]
    fn bound_report_flags_disconnected() {
        // three disjoint blocks, k = 2 -> sigma_3 = 1
        let p = JointDistribution::from_rows(&[
            &[0.2, 0.0, 0.0, 0.0],
            &[0.0, 0.3, 0.0, 0.0],
            &[0.0, 0.0, 0.2, 0.1],
            &[0.0, 0.0, 0.1, 0.1],
        ])
        .unwrap();
        let y = LabelAssignment::new(vec![0, 1, 2, 2], vec![0, 1, 2, 2], 3).unwrap();
        let r = bound_report(&p, &y, 2).unwrap();
        assert!(r.flags.contains(&SpectralFlag::SpectralGapZero));
        assert!(r.dominant_term.is_infinite());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"+inf\""));
        assert!(json.contains("spectral-gap-zero"));
    }

    #[test]
    fn bound_report_on_hierarchy() {
        // uniform marginals, so the normalized matrix is n * P and its
        // spectrum is n times the closed form
        let spec = HierarchicalGraphSpec::from_separation(2, 2, 0.5).unwrap();
        let m = build_hierarchical_matrix(&spec).unwrap();
        let p = JointDistribution::new(m.matrix().clone()).unwrap();
        let labels = spec.block_labels();
        let y = LabelAssignment::new(labels.clone(), labels.clone(), 2).unwrap();
        let r = bound_report(&p, &y, 1).unwrap();
        // cross-block mass: 2 blocks * 2 * 2 entries * p_l
        let alpha_direct = 8.0 * spec.p_low;
        assert!((r.labeling_error - alpha_direct).abs() < 1e-15);
        let closed = hierarchical_eigenvalues(&spec).unwrap();
        assert!((r.sigma_next - 4.0 * closed[1]).abs() < 1e-12);
        assert!(r.flags.contains(&SpectralFlag::GapIndexUndefined));
        assert!((r.dominant_term - alpha_direct / (1.0 - r.sigma_next.powi(2))).abs() < 1e-15);
    }
}
