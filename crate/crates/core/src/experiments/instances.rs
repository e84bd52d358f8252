//! Random instance builders shared by the experiment kinds.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::{normalize_cooccurrence, normalize_induced, InducedDistribution, JointDistribution, LabelAssignment};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen_desc;
use crate::losses::{EncoderTable, Side};
use crate::rng::{self, Rng};
use crate::spectral::decompose;
use crate::synth::{generate_multimodal, MultiModalGenConfig};

/// Uniform(0, 1) weights with each entry zeroed with probability `sparsity`.
pub fn random_joint(r: &mut Rng, n_visual: usize, n_language: usize, sparsity: f64) -> Result<JointDistribution> {
    for _ in 0..100 {
        let w = DMatrix::from_fn(n_visual, n_language, |_, _| {
            if r.random::<f64>() < sparsity {
                0.0
            } else {
                r.random::<f64>()
            }
        });
        if w.sum() > 0.0 {
            let p = JointDistribution::from_weights(w)?;
            if normalize_cooccurrence(&p).is_ok() {
                return Ok(p);
            }
        }
    }
    Err(Error::InvalidConfig("could not draw a non-degenerate random joint".into()))
}

pub fn random_table(r: &mut Rng, n: usize, k: usize, side: Side) -> EncoderTable {
    let m = DMatrix::from_fn(n, k, |_, _| {
        let z: f64 = StandardNormal.sample(r);
        z
    });
    EncoderTable::new(m, side).expect("gaussian entries are finite")
}

/// Class-structured captioned instance with `sigma_k - sigma_{k+1} >= min_gap`
/// at `k = classes`.
#[derive(Debug, Clone)]
pub struct GappedInstance {
    pub joint: JointDistribution,
    pub labels: LabelAssignment,
    pub dim: usize,
    pub gap: f64,
    pub config: MultiModalGenConfig,
}

pub fn gapped_instance(seed: u64, min_gap: f64) -> Result<GappedInstance> {
    let mut r = rng::seeded(seed);
    for attempt in 0..200u64 {
        let classes = r.random_range(2..=5);
        let config = MultiModalGenConfig {
            classes,
            visual_per_class: r.random_range(2..=5),
            language_per_class: r.random_range(2..=6),
            labeling_error: r.random_range(0.0..0.5),
            concentration: 2.0,
            seed: rng::derive(seed, attempt).random(),
        };
        let (joint, labels) = generate_multimodal(&config)?;
        let dec = decompose(&normalize_cooccurrence(&joint)?)?;
        let k = classes;
        if k >= dec.rank_bound() {
            continue;
        }
        let gap = dec.sigma(k).unwrap() - dec.sigma(k + 1).unwrap();
        if gap >= min_gap {
            return Ok(GappedInstance { joint, labels, dim: k, gap, config });
        }
    }
    Err(Error::InvalidConfig(format!("no instance with gap {min_gap} found for seed {seed}")))
}

/// Top-`k` eigenvector features `u_i / sqrt(p_i)` of a normalized pair
/// distribution, the closed-form uni-modal optimum.
pub fn uni_optimal_features(p: &InducedDistribution, k: usize) -> Result<EncoderTable> {
    let norm = normalize_induced(p)?;
    if k > norm.matrix.nrows() {
        return Err(Error::InvalidConfig(format!("dimension {k} exceeds {} samples", norm.matrix.nrows())));
    }
    let (_, vecs) = symmetric_eigen_desc(&norm.matrix);
    let top = vecs.columns(0, k).into_owned();
    EncoderTable::new(norm.features(&top), Side::Visual)
}
