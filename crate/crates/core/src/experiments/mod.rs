//! Verification suites and sweeps. Each kind produces pass/fail checks plus
//! CSV-ready tables; the CLI only adds configuration and file output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod bound_sweep;
pub mod equivalence;
pub mod estimators;
pub mod hrg;
pub mod instances;
pub mod optimum;
pub mod resample;
pub mod uni;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    VerifyEquivalence,
    VerifyOptimum,
    HrgSpectrum,
    BoundSweep,
    UniEquivalence,
    ResampleCompare,
    Estimators,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::VerifyEquivalence,
        ExperimentKind::VerifyOptimum,
        ExperimentKind::HrgSpectrum,
        ExperimentKind::BoundSweep,
        ExperimentKind::UniEquivalence,
        ExperimentKind::ResampleCompare,
        ExperimentKind::Estimators,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::VerifyEquivalence => "verify-equivalence",
            ExperimentKind::VerifyOptimum => "verify-optimum",
            ExperimentKind::HrgSpectrum => "hrg-spectrum",
            ExperimentKind::BoundSweep => "bound-sweep",
            ExperimentKind::UniEquivalence => "uni-equivalence",
            ExperimentKind::ResampleCompare => "resample-compare",
            ExperimentKind::Estimators => "estimators",
        }
    }

    /// Seeds used when a run names none; instance-level suites draw their
    /// own instances from a single seed.
    pub fn default_seeds(self) -> Vec<u64> {
        match self {
            ExperimentKind::BoundSweep => (0..5).collect(),
            ExperimentKind::ResampleCompare | ExperimentKind::Estimators => (0..10).collect(),
            _ => vec![0],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    AtMost,
    AtLeast,
    Below,
    Above,
}

impl Comparison {
    fn holds(self, measured: f64, threshold: f64) -> bool {
        match self {
            Comparison::AtMost => measured <= threshold,
            Comparison::AtLeast => measured >= threshold,
            Comparison::Below => measured < threshold,
            Comparison::Above => measured > threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
            Comparison::Below => "<",
            Comparison::Above => ">",
        }
    }
}

/// One verified claim; NaN measurements always fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, comparison: Comparison, threshold: f64) -> Self {
        let passed = !measured.is_nan() && comparison.holds(measured, threshold);
        Self { name: name.into(), measured, threshold, comparison, passed }
    }

    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self::new(name, measured, Comparison::AtMost, threshold)
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self::new(name, measured, Comparison::AtLeast, threshold)
    }

    pub fn above(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self::new(name, measured, Comparison::Above, threshold)
    }
}

/// A CSV table of preformatted cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Aggregated tables carry a `-summary` suffix and feed run summaries.
    pub fn is_summary(&self) -> bool {
        self.name.ends_with("-summary")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Shortest round-tripping form of a float, in exponent form when tiny or huge.
pub fn cell(x: f64) -> String {
    if x != 0.0 && x.is_finite() && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    /// Headline numbers for summaries.
    pub metrics: BTreeMap<String, f64>,
}

impl ExperimentOutput {
    pub fn new(kind: ExperimentKind) -> Self {
        Self { kind, checks: Vec::new(), tables: Vec::new(), metrics: BTreeMap::new() }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub seeds: Vec<u64>,
    /// Replaces the experiment's primary tolerance when set.
    pub tolerance: Option<f64>,
    pub parallel: bool,
}

impl RunSettings {
    pub fn new(seeds: Vec<u64>) -> Self {
        Self { seeds, tolerance: None, parallel: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                return Err(Error::InvalidConfig(format!("tolerance {t} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn tolerance_or(&self, default: f64) -> f64 {
        self.tolerance.unwrap_or(default)
    }
}

/// Evaluate `f` for every item, in parallel when asked; results keep input
/// order either way.
pub fn map_items<T, U, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if parallel {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Parameters of any kind, tagged by kind name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentParams {
    VerifyEquivalence(equivalence::EquivalenceParams),
    VerifyOptimum(optimum::OptimumParams),
    HrgSpectrum(hrg::HrgParams),
    BoundSweep(bound_sweep::BoundSweepParams),
    UniEquivalence(uni::UniParams),
    ResampleCompare(resample::ResampleParams),
    Estimators(estimators::EstimatorParams),
}

impl ExperimentParams {
    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::VerifyEquivalence => Self::VerifyEquivalence(Default::default()),
            ExperimentKind::VerifyOptimum => Self::VerifyOptimum(Default::default()),
            ExperimentKind::HrgSpectrum => Self::HrgSpectrum(Default::default()),
            ExperimentKind::BoundSweep => Self::BoundSweep(Default::default()),
            ExperimentKind::UniEquivalence => Self::UniEquivalence(Default::default()),
            ExperimentKind::ResampleCompare => Self::ResampleCompare(Default::default()),
            ExperimentKind::Estimators => Self::Estimators(Default::default()),
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        match self {
            Self::VerifyEquivalence(_) => ExperimentKind::VerifyEquivalence,
            Self::VerifyOptimum(_) => ExperimentKind::VerifyOptimum,
            Self::HrgSpectrum(_) => ExperimentKind::HrgSpectrum,
            Self::BoundSweep(_) => ExperimentKind::BoundSweep,
            Self::UniEquivalence(_) => ExperimentKind::UniEquivalence,
            Self::ResampleCompare(_) => ExperimentKind::ResampleCompare,
            Self::Estimators(_) => ExperimentKind::Estimators,
        }
    }
}

pub fn run_experiment(params: &ExperimentParams, settings: &RunSettings) -> Result<ExperimentOutput> {
    settings.validate()?;
    match params {
        ExperimentParams::VerifyEquivalence(p) => equivalence::run(p, settings),
        ExperimentParams::VerifyOptimum(p) => optimum::run(p, settings),
        ExperimentParams::HrgSpectrum(p) => hrg::run(p, settings),
        ExperimentParams::BoundSweep(p) => bound_sweep::run(p, settings),
        ExperimentParams::UniEquivalence(p) => uni::run(p, settings),
        ExperimentParams::ResampleCompare(p) => resample::run(p, settings),
        ExperimentParams::Estimators(p) => estimators::run(p, settings),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_names() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("nope".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn nan_checks_fail() {
        assert!(!Check::at_least("x", f64::NAN, 0.0).passed);
        assert!(Check::at_most("x", 1.0, 1.0).passed);
        assert!(!Check::above("x", 0.0, 0.0).passed);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..64).collect();
        let a = map_items(&items, true, |x| Ok(x * x)).unwrap();
        let b = map_items(&items, false, |x| Ok(x * x)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_csv() {
        let mut t = Table::new("t", &["a", "b"]);
        t.push(vec![cell(0.1), cell(-2.0)]);
        assert_eq!(t.to_csv().unwrap(), "a,b\n0.1,-2\n");
    }
}
