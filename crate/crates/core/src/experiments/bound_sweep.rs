//! Spectrum monotonicity in the hierarchy separation, and the probe error of
//! the optimal encoder tracking `sigma_{k+1}` across a separation sweep.

use serde::{Deserialize, Serialize};

use super::hrg::{grid, spectrum};
use super::{cell, map_items, Check, ExperimentKind, ExperimentOutput, RunSettings, Table};
use crate::distributions::marginals;
use crate::error::Result;
use crate::eval::fit_and_score;
use crate::linalg::spearman;
use crate::rng;
use crate::spectral::{bound_report, optimal_encoders, OptimalEncoderParams};
use crate::synth::{generate_hierarchical_classes, HierarchicalClassConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSweepParams {
    pub top_branches: [usize; 2],
    pub inner_branches: [usize; 2],
    pub monotone_separations: Vec<f64>,
    pub monotone_tolerance: f64,
    pub classes: usize,
    pub class_top_branches: usize,
    pub class_inner_branches: usize,
    pub labeling_error: f64,
    pub jitter_concentration: f64,
    pub sweep: Vec<f64>,
    pub min_spearman: f64,
}

impl Default for BoundSweepParams {
    fn default() -> Self {
        Self {
            top_branches: [2, 6],
            inner_branches: [1, 6],
            monotone_separations: (0..=10).map(|i| i as f64 / 10.0).collect(),
            monotone_tolerance: 1e-12,
            classes: 4,
            class_top_branches: 3,
            class_inner_branches: 2,
            labeling_error: 0.3,
            jitter_concentration: 4.0,
            sweep: (0..10).map(|i| 0.1 + 0.1 * i as f64).collect(),
            min_spearman: 0.8,
        }
    }
}

struct SweepPoint {
    separation: f64,
    sigma_next: f64,
    dominant: f64,
    alpha: f64,
    probe_error: f64,
}

fn sweep_point(p: &BoundSweepParams, seed: u64, separation: f64) -> Result<SweepPoint> {
    let cfg = HierarchicalClassConfig {
        classes: p.classes,
        top_branches: p.class_top_branches,
        inner_branches: p.class_inner_branches,
        separation,
        labeling_error: p.labeling_error,
        jitter_concentration: p.jitter_concentration,
        seed,
    };
    let (joint, labels) = generate_hierarchical_classes(&cfg)?;
    let k = p.classes;
    let report = bound_report(&joint, &labels, k)?;
    let (fv, _) = optimal_encoders(&joint, &OptimalEncoderParams::identity(k))?;
    let (pv, _) = marginals(&joint);
    let (_, err) = fit_and_score(&fv, labels.visual(), &pv)?;
    Ok(SweepPoint {
        separation,
        sigma_next: report.sigma_next,
        dominant: report.dominant_term,
        alpha: report.labeling_error,
        probe_error: err,
    })
}

pub fn run(p: &BoundSweepParams, settings: &RunSettings) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::new(ExperimentKind::BoundSweep);

    // monotonicity of every eigenvalue in the separation
    let pairs = grid(p.top_branches, p.inner_branches);
    let spectra = map_items(&pairs, settings.parallel, |&(a, b)| {
        p.monotone_separations.iter().map(|&d| spectrum(a, b, d)).collect::<Result<Vec<_>>>()
    })?;
    let mut worst = f64::NEG_INFINITY;
    for (&(a, b), rows) in pairs.iter().zip(&spectra) {
        let mut violation = f64::NEG_INFINITY;
        for x in rows {
            for y in rows {
                if x.separation <= y.separation {
                    for (s, t) in x.numeric.iter().zip(&y.numeric) {
                        violation = violation.max(s - t);
                    }
                }
            }
        }
        worst = worst.max(violation);
        out.checks.push(Check::at_most(format!("monotone/sl-{a}/sh-{b}"), violation, p.monotone_tolerance));
    }
    out.metric("max_monotonicity_violation", worst);

    // probe error against sigma_{k+1} at fixed labeling error
    let jobs: Vec<(u64, f64)> = settings
        .seeds
        .iter()
        .flat_map(|&s| p.sweep.iter().map(move |&d| (s, d)))
        .collect();
    let points = map_items(&jobs, settings.parallel, |&(s, d)| {
        sweep_point(p, rng::derive_seed(s, 0x5357), d)
    })?;
    let mut table = Table::new(
        "bound-sweep",
        &["seed", "separation", "labeling_error", "sigma_next", "dominant_term", "probe_error"],
    );
    for (&(s, _), pt) in jobs.iter().zip(&points) {
        table.push(vec![
            s.to_string(),
            cell(pt.separation),
            cell(pt.alpha),
            cell(pt.sigma_next),
            cell(pt.dominant),
            cell(pt.probe_error),
        ]);
    }
    out.tables.push(table);

    let n = p.sweep.len();
    let seeds = settings.seeds.len() as f64;
    let mut mean_sigma = vec![0.0; n];
    let mut mean_err = vec![0.0; n];
    for (i, pt) in points.iter().enumerate() {
        mean_sigma[i % n] += pt.sigma_next / seeds;
        mean_err[i % n] += pt.probe_error / seeds;
    }
    let mut summary = Table::new("bound-sweep-summary", &["separation", "sigma_next", "probe_error"]);
    for i in 0..n {
        summary.push(vec![cell(p.sweep[i]), cell(mean_sigma[i]), cell(mean_err[i])]);
    }
    out.tables.push(summary);
    let rho = spearman(&mean_sigma, &mean_err);
    out.checks.push(Check::at_least("probe-error-vs-sigma/spearman", rho, p.min_spearman));
    out.checks.push(Check::at_least("probe-error-vs-sigma/sweep-points", n as f64, 8.0));
    out.metric("spearman", rho);
    Ok(out)
}
