//! Factorization loss minus spectral loss equals `||P~||^2` on random
//! instances and random encoders.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::instances::{random_joint, random_table};
use super::{cell, map_items, Check, ExperimentKind, ExperimentOutput, RunSettings, Table};
use crate::distributions::normalize_cooccurrence;
use crate::error::Result;
use crate::losses::{amf_loss_of_encoders, equivalence_constant, scl_loss, Side};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceParams {
    pub instances: usize,
    pub max_visual: usize,
    pub max_language: usize,
    pub max_dim: usize,
    /// Probability that an entry of the random joint is zero.
    pub sparsity: f64,
    pub tolerance: f64,
}

impl Default for EquivalenceParams {
    fn default() -> Self {
        Self { instances: 50, max_visual: 40, max_language: 60, max_dim: 8, sparsity: 0.2, tolerance: 1e-9 }
    }
}

struct Row {
    seed: u64,
    index: usize,
    shape: (usize, usize, usize),
    scl: f64,
    amf: f64,
    constant: f64,
    residual: f64,
}

fn one(seed: u64, index: usize, p: &EquivalenceParams) -> Result<Row> {
    let mut r = rng::derive(seed, index as u64);
    let nv = r.random_range(2..=p.max_visual.max(2));
    let nl = r.random_range(2..=p.max_language.max(2));
    let k = r.random_range(1..=p.max_dim.max(1));
    let joint = random_joint(&mut r, nv, nl, p.sparsity)?;
    let fv = random_table(&mut r, nv, k, Side::Visual);
    let fl = random_table(&mut r, nl, k, Side::Language);
    let norm = normalize_cooccurrence(&joint)?;
    let scl = scl_loss(&fv, &fl, &joint)?;
    let amf = amf_loss_of_encoders(&fv, &fl, &norm)?;
    let constant = equivalence_constant(&norm);
    let residual = (amf - scl - constant).abs() / (1.0 + scl.abs());
    Ok(Row { seed, index, shape: (nv, nl, k), scl, amf, constant, residual })
}

pub fn run(p: &EquivalenceParams, settings: &RunSettings) -> Result<ExperimentOutput> {
    let tol = settings.tolerance_or(p.tolerance);
    let jobs: Vec<(u64, usize)> =
        settings.seeds.iter().flat_map(|&s| (0..p.instances).map(move |i| (s, i))).collect();
    let rows = map_items(&jobs, settings.parallel, |&(s, i)| one(s, i, p))?;

    let mut out = ExperimentOutput::new(ExperimentKind::VerifyEquivalence);
    let mut table = Table::new(
        "equivalence",
        &["seed", "instance", "n_visual", "n_language", "dim", "scl", "amf", "constant", "residual"],
    );
    let mut worst = 0.0f64;
    for row in &rows {
        out.checks.push(Check::at_most(format!("identity/seed-{}/instance-{}", row.seed, row.index), row.residual, tol));
        worst = worst.max(row.residual);
        table.push(vec![
            row.seed.to_string(),
            row.index.to_string(),
            row.shape.0.to_string(),
            row.shape.1.to_string(),
            row.shape.2.to_string(),
            cell(row.scl),
            cell(row.amf),
            cell(row.constant),
            cell(row.residual),
        ]);
    }
    out.tables.push(table);
    out.metric("max_relative_residual", worst);
    Ok(out)
}
