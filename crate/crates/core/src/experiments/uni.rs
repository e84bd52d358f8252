//! Multi-modal optimal visual features against uni-modal optimal features of
//! the text-induced graph, plus the symmetric factorization identity.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::instances::{gapped_instance, random_joint, random_table, uni_optimal_features};
use super::{cell, map_items, Check, ExperimentKind, ExperimentOutput, RunSettings, Table};
use crate::distributions::{marginals, normalize_cooccurrence, normalize_induced, text_induced};
use crate::error::Result;
use crate::eval::fit_probe;
use crate::linalg::{frobenius_sq, max_principal_angle, symmetric_eigen_desc};
use crate::losses::{uni_scl_loss, Side};
use crate::rng;
use crate::spectral::{decompose, optimal_encoders, OptimalEncoderParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniParams {
    pub instances: usize,
    pub min_gap: f64,
    pub angle_tolerance: f64,
    pub identity_instances: usize,
    pub identity_tolerance: f64,
}

impl Default for UniParams {
    fn default() -> Self {
        Self { instances: 10, min_gap: 1e-2, angle_tolerance: 1e-8, identity_instances: 10, identity_tolerance: 1e-9 }
    }
}

struct Row {
    seed: u64,
    index: usize,
    dim: usize,
    gap: f64,
    angle: f64,
    mismatches: usize,
}

fn one(seed: u64, index: usize, p: &UniParams) -> Result<Row> {
    let inst = gapped_instance(rng::derive(seed, 0x756e_6900 + index as u64).random(), p.min_gap)?;
    let k = inst.dim;
    let norm = normalize_cooccurrence(&inst.joint)?;
    let dec = decompose(&norm)?;
    let gram = norm.matrix() * norm.matrix().transpose();
    let (_, vecs) = symmetric_eigen_desc(&gram);
    let angle = max_principal_angle(&dec.u.columns(0, k).into_owned(), &vecs.columns(0, k).into_owned());

    let (multi, _) = optimal_encoders(&inst.joint, &OptimalEncoderParams::identity(k))?;
    let uni = uni_optimal_features(&text_induced(&inst.joint)?, k)?;
    let (pv, _) = marginals(&inst.joint);
    let y = inst.labels.visual();
    let a = fit_probe(&multi, y, &pv)?.predict(&multi)?;
    let b = fit_probe(&uni, y, &pv)?.predict(&uni)?;
    let mismatches = a.iter().zip(&b).filter(|(x, z)| x != z).count();
    Ok(Row { seed, index, dim: k, gap: inst.gap, angle, mismatches })
}

/// `uni_scl(f) + ||P~_T||^2 - ||P~_T - F F^T||^2`, relative to `1 + |uni_scl|`.
fn identity_residual(seed: u64, index: usize) -> Result<f64> {
    let mut r = rng::derive(seed ^ 0x6964, index as u64);
    let nv = r.random_range(2..=20);
    let nl = r.random_range(2..=30);
    let k = r.random_range(1..=6);
    let joint = random_joint(&mut r, nv, nl, 0.2)?;
    let pt = text_induced(&joint)?;
    let f = random_table(&mut r, nv, k, Side::Visual);
    let loss = uni_scl_loss(&f, &pt, &pt.marginal())?;
    let norm = normalize_induced(&pt)?;
    let factor = norm.factor(f.features())?;
    let residual = frobenius_sq(&(&norm.matrix - &factor * factor.transpose()));
    let constant = frobenius_sq(&norm.matrix);
    Ok((loss + constant - residual).abs() / (1.0 + loss.abs()))
}

pub fn run(p: &UniParams, settings: &RunSettings) -> Result<ExperimentOutput> {
    let tol = settings.tolerance_or(p.angle_tolerance);
    let mut out = ExperimentOutput::new(ExperimentKind::UniEquivalence);
    let jobs: Vec<(u64, usize)> = settings.seeds.iter().flat_map(|&s| (0..p.instances).map(move |i| (s, i))).collect();
    let rows = map_items(&jobs, settings.parallel, |&(s, i)| one(s, i, p))?;
    let mut table = Table::new("uni-equivalence", &["seed", "instance", "dim", "gap", "max_angle", "probe_mismatches"]);
    let mut worst = 0.0f64;
    for r in &rows {
        let tag = format!("seed-{}/instance-{}", r.seed, r.index);
        out.checks.push(Check::at_most(format!("subspace-angle/{tag}"), r.angle, tol));
        out.checks.push(Check::at_most(format!("probe-agreement/{tag}"), r.mismatches as f64, 0.0));
        worst = worst.max(r.angle);
        table.push(vec![
            r.seed.to_string(),
            r.index.to_string(),
            r.dim.to_string(),
            cell(r.gap),
            cell(r.angle),
            r.mismatches.to_string(),
        ]);
    }
    out.tables.push(table);
    out.metric("max_angle", worst);

    let jobs: Vec<(u64, usize)> =
        settings.seeds.iter().flat_map(|&s| (0..p.identity_instances).map(move |i| (s, i))).collect();
    let residuals = map_items(&jobs, settings.parallel, |&(s, i)| identity_residual(s, i))?;
    let mut worst = 0.0f64;
    for (&(s, i), r) in jobs.iter().zip(&residuals) {
        out.checks.push(Check::at_most(format!("factorization-identity/seed-{s}/instance-{i}"), *r, p.identity_tolerance));
        worst = worst.max(*r);
    }
    out.metric("max_identity_residual", worst);
    Ok(out)
}
