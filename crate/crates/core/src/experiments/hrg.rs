//! Closed-form hierarchical-random-graph eigenvalues against a numeric
//! eigendecomposition.

use serde::{Deserialize, Serialize};

use super::{cell, map_items, Check, ExperimentKind, ExperimentOutput, RunSettings, Table};
use crate::error::Result;
use crate::linalg::symmetric_eigen_desc;
use crate::spectral::hierarchical_eigenvalues;
use crate::synth::{build_hierarchical_matrix, HierarchicalGraphSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HrgParams {
    /// Inclusive range of `s_l`.
    pub top_branches: [usize; 2],
    /// Inclusive range of `s_h`.
    pub inner_branches: [usize; 2],
    pub separations: Vec<f64>,
    pub tolerance: f64,
}

impl Default for HrgParams {
    fn default() -> Self {
        Self {
            top_branches: [2, 6],
            inner_branches: [1, 6],
            separations: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            tolerance: 1e-10,
        }
    }
}

/// Numeric and closed-form spectra at one separation.
pub struct SpectrumRow {
    pub separation: f64,
    pub numeric: Vec<f64>,
    pub closed: Vec<f64>,
}

pub fn spectrum(top: usize, inner: usize, separation: f64) -> Result<SpectrumRow> {
    let spec = HierarchicalGraphSpec::from_separation(top, inner, separation)?;
    let (numeric, _) = symmetric_eigen_desc(build_hierarchical_matrix(&spec)?.matrix());
    let closed = hierarchical_eigenvalues(&spec)?;
    Ok(SpectrumRow { separation, numeric, closed })
}

pub fn grid(top: [usize; 2], inner: [usize; 2]) -> Vec<(usize, usize)> {
    (top[0]..=top[1]).flat_map(|a| (inner[0]..=inner[1]).map(move |b| (a, b))).collect()
}

pub fn run(p: &HrgParams, settings: &RunSettings) -> Result<ExperimentOutput> {
    let tol = settings.tolerance_or(p.tolerance);
    let pairs = grid(p.top_branches, p.inner_branches);
    let spectra = map_items(&pairs, settings.parallel, |&(a, b)| {
        p.separations.iter().map(|&d| spectrum(a, b, d)).collect::<Result<Vec<_>>>()
    })?;
    let mut out = ExperimentOutput::new(ExperimentKind::HrgSpectrum);
    let mut worst = 0.0f64;
    for (&(a, b), rows) in pairs.iter().zip(&spectra) {
        let n = a * b;
        let mut cols = vec!["separation".to_string()];
        cols.extend((1..=n).map(|t| format!("sigma_{t}")));
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut table = Table::new(format!("hrg-sl{a}-sh{b}"), &cols);
        let mut err = 0.0f64;
        for row in rows {
            for (x, y) in row.numeric.iter().zip(&row.closed) {
                err = err.max((x - y).abs());
            }
            let mut cells = vec![cell(row.separation)];
            cells.extend(row.numeric.iter().map(|&x| cell(x)));
            table.push(cells);
        }
        worst = worst.max(err);
        out.checks.push(Check::at_most(format!("closed-form/sl-{a}/sh-{b}"), err, tol));
        out.tables.push(table);
    }
    out.metric("max_abs_error", worst);
    Ok(out)
}
