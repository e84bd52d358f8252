//! Gradient training reaches the truncated-SVD optimum, and the analytic
//! spectral-loss gradients agree with central finite differences.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::instances::{gapped_instance, random_joint, random_table};
use super::{cell, map_items, Check, ExperimentKind, ExperimentOutput, RunSettings, Table};
use crate::distributions::{marginals, normalize_cooccurrence, text_induced};
use crate::error::Result;
use crate::eval::fit_probe;
use crate::losses::{amf_gradient, amf_loss, scl_gradient, scl_loss, uni_scl_gradient, uni_scl_loss, EncoderTable, Side};
use crate::rng;
use crate::spectral::{decompose, optimal_encoders, OptimalEncoderParams};
use crate::train::{train_mmcl, BatchMode, TrainConfig, TrainStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimumParams {
    pub instances: usize,
    pub min_gap: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub train_tolerance: f64,
    /// Allowed distance of the trained loss from the optimum.
    pub tolerance: f64,
    pub gradient_instances: usize,
    pub gradient_tolerance: f64,
    pub step: f64,
}

impl Default for OptimumParams {
    fn default() -> Self {
        Self {
            instances: 10,
            min_gap: 1e-2,
            learning_rate: 0.2,
            max_steps: 200_000,
            train_tolerance: 1e-15,
            tolerance: 1e-4,
            gradient_instances: 10,
            gradient_tolerance: 1e-6,
            step: 1e-5,
        }
    }
}

struct TrainRow {
    seed: u64,
    index: usize,
    dim: usize,
    gap: f64,
    optimum: f64,
    trained: f64,
    steps: usize,
    converged: bool,
    mismatches: usize,
}

fn train_one(seed: u64, index: usize, p: &OptimumParams) -> Result<TrainRow> {
    let inst = gapped_instance(rng::derive(seed, index as u64).random(), p.min_gap)?;
    let dec = decompose(&normalize_cooccurrence(&inst.joint)?)?;
    let optimum = -dec.head_energy(inst.dim);
    let cfg = TrainConfig {
        dim: inst.dim,
        learning_rate: p.learning_rate,
        max_steps: p.max_steps,
        tolerance: p.train_tolerance,
        batch: BatchMode::Population,
        seed: seed ^ index as u64,
    };
    let out = train_mmcl(&inst.joint, &cfg)?;
    let trained = scl_loss(&out.visual, &out.language, &inst.joint)?;
    let (closed, _) = optimal_encoders(&inst.joint, &OptimalEncoderParams::identity(inst.dim))?;
    let (pv, _) = marginals(&inst.joint);
    let y = inst.labels.visual();
    let a = fit_probe(&out.visual, y, &pv)?.predict(&out.visual)?;
    let b = fit_probe(&closed, y, &pv)?.predict(&closed)?;
    let mismatches = a.iter().zip(&b).filter(|(x, z)| x != z).count();
    Ok(TrainRow {
        seed,
        index,
        dim: inst.dim,
        gap: inst.gap,
        optimum,
        trained,
        steps: out.history.len() - 1,
        converged: out.status == TrainStatus::Converged,
        mismatches,
    })
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference(x: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut up = x.clone();
            up[(i, j)] += h;
            let mut dn = x.clone();
            dn[(i, j)] -= h;
            g[(i, j)] = (f(&up) - f(&dn)) / (2.0 * h);
        }
    }
    g
}

fn relative(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1e-12)
}

struct GradRow {
    seed: u64,
    index: usize,
    scl: f64,
    uni: f64,
    amf: f64,
}

fn gradient_one(seed: u64, index: usize, p: &OptimumParams) -> Result<GradRow> {
    let mut r = rng::derive(seed ^ 0x6772_6164, index as u64);
    let nv = r.random_range(2..=6);
    let nl = r.random_range(2..=6);
    let k = r.random_range(1..=3);
    let joint = random_joint(&mut r, nv, nl, 0.0)?;
    let fv = random_table(&mut r, nv, k, Side::Visual);
    let fl = random_table(&mut r, nl, k, Side::Language);
    let h = p.step;

    let (gv, gl) = scl_gradient(&fv, &fl, &joint)?;
    let fd_v = finite_difference(fv.features(), h, |x| {
        scl_loss(&EncoderTable::new(x.clone(), Side::Visual).unwrap(), &fl, &joint).unwrap()
    });
    let fd_l = finite_difference(fl.features(), h, |x| {
        scl_loss(&fv, &EncoderTable::new(x.clone(), Side::Language).unwrap(), &joint).unwrap()
    });
    let scl = relative(&gv, &fd_v).max(relative(&gl, &fd_l));

    let pt = text_induced(&joint)?;
    let m = pt.marginal();
    let g = uni_scl_gradient(&fv, &pt, &m)?;
    let fd = finite_difference(fv.features(), h, |x| {
        uni_scl_loss(&EncoderTable::new(x.clone(), Side::Visual).unwrap(), &pt, &m).unwrap()
    });
    let uni = relative(&g, &fd);

    let target = normalize_cooccurrence(&joint)?.matrix().clone();
    let a = fv.features().rows(0, target.nrows()).into_owned();
    let b = fl.features().rows(0, target.ncols()).into_owned();
    let (ga, gb) = amf_gradient(&a, &b, &target)?;
    let fd_a = finite_difference(&a, h, |x| amf_loss(x, &b, &target).unwrap());
    let fd_b = finite_difference(&b, h, |x| amf_loss(&a, x, &target).unwrap());
    let amf = relative(&ga, &fd_a).max(relative(&gb, &fd_b));
    Ok(GradRow { seed, index, scl, uni, amf })
}

pub fn run(p: &OptimumParams, settings: &RunSettings) -> Result<ExperimentOutput> {
    let tol = settings.tolerance_or(p.tolerance);
    let mut out = ExperimentOutput::new(ExperimentKind::VerifyOptimum);

    let jobs: Vec<(u64, usize)> = settings.seeds.iter().flat_map(|&s| (0..p.instances).map(move |i| (s, i))).collect();
    let rows = map_items(&jobs, settings.parallel, |&(s, i)| train_one(s, i, p))?;
    let mut table = Table::new(
        "optimum",
        &["seed", "instance", "dim", "gap", "optimum", "trained", "steps", "converged", "probe_mismatches"],
    );
    let mut worst = 0.0f64;
    for r in &rows {
        let tag = format!("seed-{}/instance-{}", r.seed, r.index);
        let dist = (r.trained - r.optimum).abs();
        worst = worst.max(dist);
        out.checks.push(Check::at_most(format!("optimum/{tag}"), dist, tol));
        out.checks.push(Check::at_most(format!("probe-agreement/{tag}"), r.mismatches as f64, 0.0));
        table.push(vec![
            r.seed.to_string(),
            r.index.to_string(),
            r.dim.to_string(),
            cell(r.gap),
            cell(r.optimum),
            cell(r.trained),
            r.steps.to_string(),
            r.converged.to_string(),
            r.mismatches.to_string(),
        ]);
    }
    out.tables.push(table);
    out.metric("max_optimum_distance", worst);

    let jobs: Vec<(u64, usize)> =
        settings.seeds.iter().flat_map(|&s| (0..p.gradient_instances).map(move |i| (s, i))).collect();
    let grads = map_items(&jobs, settings.parallel, |&(s, i)| gradient_one(s, i, p))?;
    let mut table = Table::new("gradients", &["seed", "instance", "scl", "uni_scl", "amf"]);
    let mut worst = 0.0f64;
    for g in &grads {
        let tag = format!("seed-{}/instance-{}", g.seed, g.index);
        for (name, v) in [("scl", g.scl), ("uni-scl", g.uni), ("amf", g.amf)] {
            out.checks.push(Check::at_most(format!("gradient-{name}/{tag}"), v, p.gradient_tolerance));
            worst = worst.max(v);
        }
        table.push(vec![g.seed.to_string(), g.index.to_string(), cell(g.scl), cell(g.uni), cell(g.amf)]);
    }
    out.tables.push(table);
    out.metric("max_gradient_relative_error", worst);
    Ok(out)
}
