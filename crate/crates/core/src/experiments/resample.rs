//! Teacher-guided resampling on a leaky augmentation graph, each strategy
//! compared with the seed-paired baseline.

use serde::{Deserialize, Serialize};

use super::{cell, map_items, Check, ExperimentKind, ExperimentOutput, RunSettings, Table};
use crate::distributions::{augmentation_joint, InducedDistribution};
use crate::error::Result;
use crate::eval::fit_and_score;
use crate::losses::{EncoderTable, Side};
use crate::rng;
use crate::synth::generate_augmentation_model;
use crate::train::{train_sscl, BatchMode, ResampleConfig, Strategy, TrainConfig};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleParams {
    pub classes: usize,
    pub natural_per_class: usize,
    pub augs_per_sample: usize,
    pub leak: f64,
    pub dim: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub mix_weight: f64,
    pub add_ratio: f64,
    pub drop_false_positive: f64,
    pub drop_false_negative: f64,
    pub drop_easy_negative: f64,
    /// Smallest acceptable mean paired accuracy difference.
    pub tolerance: f64,
}

impl Default for ResampleParams {
    fn default() -> Self {
        Self {
            classes: 4,
            natural_per_class: 6,
            augs_per_sample: 2,
            leak: 0.3,
            dim: 4,
            batch_size: 30,
            steps: 10_000,
            learning_rate: 0.0005,
            mix_weight: 1.0,
            add_ratio: Strategy::AddNewPositive.default_ratio(),
            drop_false_positive: Strategy::DropFalsePositive.default_ratio(),
            drop_false_negative: Strategy::DropFalseNegative.default_ratio(),
            drop_easy_negative: Strategy::DropEasyNegative.default_ratio(),
            tolerance: -0.005,
        }
    }
}

impl ResampleParams {
    pub fn config(&self, strategy: Strategy) -> ResampleConfig {
        let ratio = match strategy {
            Strategy::AddNewPositive => self.add_ratio,
            Strategy::DropFalsePositive => self.drop_false_positive,
            Strategy::DropFalseNegative => self.drop_false_negative,
            Strategy::DropEasyNegative => self.drop_easy_negative,
        };
        ResampleConfig { strategy, ratio, mix_weight: self.mix_weight }
    }
}

/// Leaky augmentation graph over labelled natural samples with uniform mass.
pub struct AugmentedInstance {
    pub graph: InducedDistribution,
    pub marginal: DVector<f64>,
    pub labels: Vec<usize>,
    pub natural_labels: Vec<usize>,
}

pub fn augmented_instance(
    classes: usize,
    natural_per_class: usize,
    augs: usize,
    leak: f64,
    seed: u64,
) -> Result<AugmentedInstance> {
    let n = classes * natural_per_class;
    let natural_labels: Vec<usize> = (0..n).map(|i| i / natural_per_class).collect();
    let (model, labels) = generate_augmentation_model(n, augs, leak, &natural_labels, seed)?;
    let pv = DVector::from_element(n, 1.0 / n as f64);
    let graph = augmentation_joint(&model, &pv)?;
    let marginal = graph.marginal();
    Ok(AugmentedInstance { graph, marginal, labels, natural_labels })
}

pub fn one_hot_teacher(labels: &[usize], classes: usize) -> EncoderTable {
    let m = DMatrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
    EncoderTable::new(m, Side::Augmented).expect("one-hot entries are finite")
}

/// Accuracy of the baseline followed by each strategy in [`Strategy::ALL`].
fn one(p: &ResampleParams, seed: u64) -> Result<Vec<f64>> {
    let inst = augmented_instance(p.classes, p.natural_per_class, p.augs_per_sample, p.leak, rng::derive_seed(seed, 1))?;
    let teacher = one_hot_teacher(&inst.labels, p.classes);
    let cfg = TrainConfig {
        dim: p.dim,
        learning_rate: p.learning_rate,
        max_steps: p.steps,
        tolerance: 1.0,
        batch: BatchMode::Sampled { batch_size: p.batch_size },
        seed: rng::derive_seed(seed, 2),
    };
    let accuracy = |rc: Option<ResampleConfig>| -> Result<f64> {
        let out = train_sscl(&inst.graph, &inst.marginal, &cfg, rc.as_ref(), Some(&teacher))?;
        let (_, err) = fit_and_score(&out.features, &inst.labels, &inst.marginal)?;
        Ok(1.0 - err)
    };
    let mut acc = vec![accuracy(None)?];
    for s in Strategy::ALL {
        acc.push(accuracy(Some(p.config(s)))?);
    }
    Ok(acc)
}

pub fn run(p: &ResampleParams, settings: &RunSettings) -> Result<ExperimentOutput> {
    let tol = settings.tolerance_or(p.tolerance);
    let runs = map_items(&settings.seeds, settings.parallel, |&s| one(p, s))?;
    let mut out = ExperimentOutput::new(ExperimentKind::ResampleCompare);

    let mut per_seed = Table::new("resample-runs", &["seed", "strategy", "baseline_accuracy", "accuracy", "difference"]);
    for (&s, acc) in settings.seeds.iter().zip(&runs) {
        for (j, strat) in Strategy::ALL.iter().enumerate() {
            per_seed.push(vec![
                s.to_string(),
                strat.name().to_string(),
                cell(acc[0]),
                cell(acc[j + 1]),
                cell(acc[j + 1] - acc[0]),
            ]);
        }
    }
    out.tables.push(per_seed);

    let n = runs.len() as f64;
    let baseline = runs.iter().map(|a| a[0]).sum::<f64>() / n;
    let mut summary =
        Table::new("resample-summary", &["strategy", "mean_baseline_accuracy", "mean_accuracy", "mean_paired_difference"]);
    let mut diffs = Vec::new();
    for (j, strat) in Strategy::ALL.iter().enumerate() {
        let mean = runs.iter().map(|a| a[j + 1]).sum::<f64>() / n;
        let diff = runs.iter().map(|a| a[j + 1] - a[0]).sum::<f64>() / n;
        diffs.push(diff);
        summary.push(vec![strat.name().to_string(), cell(baseline), cell(mean), cell(diff)]);
        out.checks.push(Check::at_least(format!("non-harmful/{}", strat.name()), diff, tol));
        out.metric(&format!("mean_difference/{}", strat.name()), diff);
    }
    out.tables.push(summary);
    out.metric("mean_baseline_accuracy", baseline);

    let add = diffs[0];
    let best_other = diffs[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.checks.push(Check::above("add-new-positive/improves", add, 0.0));
    out.checks.push(Check::above("add-new-positive/largest-margin", add - best_other, 0.0));
    Ok(out)
}
