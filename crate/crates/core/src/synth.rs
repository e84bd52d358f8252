//! Seeded generators: hierarchical random graphs, captioned-dataset stand-ins
//! with a controllable labeling error, and leaky augmentation models.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::distributions::{InducedDistribution, InducedKind, JointDistribution, LabelAssignment};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Tolerance on the unit-mass constraint of a hierarchical spec.
pub const HIERARCHY_TOLERANCE: f64 = 1e-12;

/// Three-layer hierarchical random graph over `s_l * s_h` leaves.
///
/// Leaves are grouped into `s_l` first-layer blocks of `s_h` leaves. Two
/// leaves in the same block are connected with mass `p_h`, leaves in
/// different blocks with `p_l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalGraphSpec {
    pub top_branches: usize,
    pub inner_branches: usize,
    pub p_low: f64,
    pub p_high: f64,
}

impl HierarchicalGraphSpec {
    pub fn new(top_branches: usize, inner_branches: usize, p_low: f64, p_high: f64) -> Result<Self> {
        let spec = Self { top_branches, inner_branches, p_low, p_high };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_separation(top_branches: usize, inner_branches: usize, separation: f64) -> Result<Self> {
        let (p_low, p_high) = hierarchical_probabilities(top_branches, inner_branches, separation)?;
        Self::new(top_branches, inner_branches, p_low, p_high)
    }

    pub fn validate(&self) -> Result<()> {
        let (sl, sh) = (self.top_branches, self.inner_branches);
        if sl == 0 || sh == 0 {
            return Err(Error::InvalidSpec("branch counts must be positive".into()));
        }
        if !(self.p_low >= 0.0 && self.p_high >= self.p_low) {
            return Err(Error::InvalidSpec(format!(
                "need p_high >= p_low >= 0, got p_low={} p_high={}",
                self.p_low, self.p_high
            )));
        }
        let (slf, shf) = (sl as f64, sh as f64);
        let row = shf * self.p_high + (slf - 1.0) * shf * self.p_low;
        let target = 1.0 / (slf * shf);
        if (row - target).abs() > HIERARCHY_TOLERANCE {
            return Err(Error::InvalidSpec(format!(
                "row mass {row} differs from 1/(s_l s_h) = {target}"
            )));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.top_branches * self.inner_branches
    }

    /// First-layer block of each leaf.
    pub fn block_labels(&self) -> Vec<usize> {
        (0..self.size()).map(|i| i / self.inner_branches).collect()
    }
}

/// `(p_l, p_h)` at a given separation in `[0, 1]`.
///
/// Linear interpolation between the uniform graph (`separation = 0`,
/// `p_h = p_l`) and the disconnected one (`separation = 1`, `p_l = 0`), with
/// the unit-mass constraint holding along the whole path.
pub fn hierarchical_probabilities(
    top_branches: usize,
    inner_branches: usize,
    separation: f64,
) -> Result<(f64, f64)> {
    if top_branches < 2 || inner_branches < 1 {
        return Err(Error::InvalidSpec(format!(
            "need s_l >= 2 and s_h >= 1, got s_l={top_branches} s_h={inner_branches}"
        )));
    }
    if !(0.0..=1.0).contains(&separation) {
        return Err(Error::InvalidSpec(format!("separation {separation} outside [0, 1]")));
    }
    let (sl, sh) = (top_branches as f64, inner_branches as f64);
    let n = sl * sh;
    let uniform = 1.0 / (n * n);
    let p_low = (1.0 - separation) * uniform;
    // p_h - p_l = d / (s_l s_h^2) keeps the ordering exact at d = 0
    let p_high = p_low + separation / (sl * sh * sh);
    Ok((p_low, p_high))
}

pub fn build_hierarchical_matrix(spec: &HierarchicalGraphSpec) -> Result<InducedDistribution> {
    spec.validate()?;
    let b = spec.block_labels();
    let m = DMatrix::from_fn(spec.size(), spec.size(), |r, c| {
        if b[r] == b[c] {
            spec.p_high
        } else {
            spec.p_low
        }
    });
    InducedDistribution::new(m, InducedKind::Hierarchical)
}

fn default_concentration() -> f64 {
    8.0
}

/// Synthetic captioned dataset.
///
/// Schema (TOML): `classes`, `visual_per_class`, `language_per_class`,
/// `labeling_error`, `concentration` (default 8; `inf` gives uniform
/// in-class mass), `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalGenConfig {
    pub classes: usize,
    pub visual_per_class: usize,
    pub language_per_class: usize,
    pub labeling_error: f64,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MultiModalGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.visual_per_class == 0 || self.language_per_class == 0 {
            return Err(Error::InvalidConfig("sample counts must be positive".into()));
        }
        if !(self.labeling_error >= 0.0 && self.labeling_error < 1.0) {
            return Err(Error::InvalidConfig("labeling_error must lie in [0, 1)".into()));
        }
        let r = self.classes as f64;
        if self.classes >= 2 && self.labeling_error >= (r - 1.0) / r {
            return Err(Error::InvalidConfig(format!(
                "labeling_error must be below (r-1)/r = {}",
                (r - 1.0) / r
            )));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::InvalidConfig("concentration must be positive".into()));
        }
        Ok(())
    }
}

/// Gamma(shape, 1/shape) sampler with unit mean; an infinite shape yields 1.
fn gamma_or_one(shape: f64) -> Result<impl Fn(&mut Rng) -> f64> {
    let dist = if shape.is_finite() {
        Some(Gamma::new(shape, 1.0 / shape).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    Ok(move |r: &mut Rng| match &dist {
        Some(g) => g.sample(r),
        None => 1.0,
    })
}

/// Joint distribution whose labeling error equals `labeling_error`.
///
/// In-class pairs get Gamma(concentration) weights, cross-class pairs get
/// Exp(1) weights; the two parts are rescaled to carry mass `1 - alpha` and
/// `alpha` respectively, so the cross-class mass is exactly the target.
pub fn generate_multimodal(cfg: &MultiModalGenConfig) -> Result<(JointDistribution, LabelAssignment)> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let nv = cfg.classes * cfg.visual_per_class;
    let nl = cfg.classes * cfg.language_per_class;
    let yv: Vec<usize> = (0..nv).map(|i| i / cfg.visual_per_class).collect();
    let yl: Vec<usize> = (0..nl).map(|j| j / cfg.language_per_class).collect();
    let in_class = gamma_or_one(cfg.concentration)?;
    let cross = Gamma::new(1.0, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut within = DMatrix::zeros(nv, nl);
    let mut across = DMatrix::zeros(nv, nl);
    for v in 0..nv {
        for l in 0..nl {
            if yv[v] == yl[l] {
                within[(v, l)] = in_class(&mut rng);
            } else {
                across[(v, l)] = cross.sample(&mut rng);
            }
        }
    }
    let alpha = if cfg.classes >= 2 { cfg.labeling_error } else { 0.0 };
    let mut mass = within.clone() * ((1.0 - alpha) / within.sum());
    if alpha > 0.0 {
        mass += across.clone() * (alpha / across.sum());
    }
    let p = JointDistribution::from_weights(mass)?;
    let labels = LabelAssignment::new(yv, yl, cfg.classes)?;
    Ok((p, labels))
}

/// Classes whose internal structure is a hierarchical random graph, joined
/// by random cross-class mass `labeling_error`.
///
/// Each class is an `s_l x s_h` hierarchy at the given separation with
/// entries jittered by Gamma(`jitter_concentration`) factors; visual and
/// language sides both index the leaves, so the matrix is symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalClassConfig {
    pub classes: usize,
    pub top_branches: usize,
    pub inner_branches: usize,
    pub separation: f64,
    pub labeling_error: f64,
    pub jitter_concentration: f64,
    pub seed: u64,
}

pub fn generate_hierarchical_classes(
    cfg: &HierarchicalClassConfig,
) -> Result<(JointDistribution, LabelAssignment)> {
    if cfg.classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    let spec = HierarchicalGraphSpec::from_separation(cfg.top_branches, cfg.inner_branches, cfg.separation)?;
    let block = build_hierarchical_matrix(&spec)?;
    let leaves = spec.size();
    let n = cfg.classes * leaves;
    let mut rng = rng::seeded(cfg.seed);
    let jitter = gamma_or_one(cfg.jitter_concentration)?;
    let cross = Gamma::new(1.0, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let labels: Vec<usize> = (0..n).map(|i| i / leaves).collect();

    let mut within = DMatrix::zeros(n, n);
    let mut across = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in r..n {
            if labels[r] == labels[c] {
                let w = block.matrix()[(r % leaves, c % leaves)] * jitter(&mut rng);
                within[(r, c)] = w;
                within[(c, r)] = w;
            } else {
                let w = cross.sample(&mut rng);
                across[(r, c)] = w;
                across[(c, r)] = w;
            }
        }
    }
    let alpha = cfg.labeling_error;
    let mass = within.clone() * ((1.0 - alpha) / within.sum()) + across.clone() * (alpha / across.sum());
    let p = JointDistribution::from_weights(mass)?;
    let labels = LabelAssignment::new(labels.clone(), labels, cfg.classes)?;
    Ok((p, labels))
}

/// Conditional augmentation matrix `A(a|v)`, one column per natural sample.
///
/// Augmented sample `a` is a view of natural sample `a / augs_per_sample`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationModel {
    conditional: DMatrix<f64>,
    augs_per_sample: usize,
}

impl AugmentationModel {
    pub fn new(conditional: DMatrix<f64>, augs_per_sample: usize) -> Result<Self> {
        if augs_per_sample == 0 || conditional.nrows() != conditional.ncols() * augs_per_sample {
            return Err(Error::InvalidConfig(format!(
                "{} augmented rows do not match {} natural samples x {augs_per_sample}",
                conditional.nrows(),
                conditional.ncols()
            )));
        }
        if conditional.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig("augmentation weights must be finite and non-negative".into()));
        }
        for (v, col) in conditional.column_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!("column {v} sums to {s}")));
            }
        }
        Ok(Self { conditional, augs_per_sample })
    }

    pub fn conditional(&self) -> &DMatrix<f64> {
        &self.conditional
    }

    pub fn augs_per_sample(&self) -> usize {
        self.augs_per_sample
    }

    pub fn n_augmented(&self) -> usize {
        self.conditional.nrows()
    }

    pub fn natural_of(&self, augmented: usize) -> usize {
        augmented / self.augs_per_sample
    }

    /// Each augmented view inherits the label of its natural sample.
    pub fn augmented_labels(&self, natural: &[usize]) -> Vec<usize> {
        (0..self.n_augmented()).map(|a| natural[self.natural_of(a)]).collect()
    }
}

/// Leaky augmentation model.
///
/// Natural sample `v` sends mass `1 - leak` to its own views with random
/// Gamma(2) proportions and `leak` uniformly over every augmented sample, so
/// `leak = 0` keeps views private and `leak = 1` makes all conditionals
/// uniform. Returns the model and the labels of the augmented samples.
pub fn generate_augmentation_model(
    n_visual: usize,
    augs_per_sample: usize,
    leak: f64,
    labels: &[usize],
    seed: u64,
) -> Result<(AugmentationModel, Vec<usize>)> {
    if augs_per_sample == 0 || n_visual == 0 {
        return Err(Error::InvalidConfig("need at least one natural sample and one view".into()));
    }
    if !(0.0..=1.0).contains(&leak) {
        return Err(Error::InvalidConfig(format!("leak {leak} outside [0, 1]")));
    }
    if labels.len() != n_visual {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n_visual} natural samples",
            labels.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let own = Gamma::new(2.0, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let na = n_visual * augs_per_sample;
    let mut a = DMatrix::from_element(na, n_visual, leak / na as f64);
    for v in 0..n_visual {
        let w: Vec<f64> = (0..augs_per_sample).map(|_| own.sample(&mut rng)).collect();
        let total: f64 = w.iter().sum();
        for (j, wj) in w.iter().enumerate() {
            a[(v * augs_per_sample + j, v)] += (1.0 - leak) * wj / total;
        }
    }
    // exact column renormalization
    for mut col in a.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    let model = AugmentationModel::new(a, augs_per_sample)?;
    let aug_labels = model.augmented_labels(labels);
    Ok((model, aug_labels))
}

/// Uniform random permutation.
pub fn random_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
