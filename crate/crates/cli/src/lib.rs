//! Experiment harness around [`mmcl_core::experiments`]: TOML configs in,
//! CSV tables and JSON reports out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmcl_core::experiments::{run_experiment, Check, ExperimentKind, ExperimentParams, RunSettings, Table};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    ConfigParse(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{kind} failed: {source}")]
    Experiment {
        kind: ExperimentKind,
        #[source]
        source: mmcl_core::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// A fully resolved experiment: every default is filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub params: ExperimentParams,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub tolerance: Option<f64>,
    pub parallel: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: Option<String>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    tolerance: Option<f64>,
    parallel: Option<bool>,
    params: Option<toml::Table>,
}

/// Command-line values that replace config file entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub kind: Option<ExperimentKind>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub tolerance: Option<f64>,
    pub parallel: bool,
}

fn parse_kind(s: &str) -> Result<ExperimentKind> {
    s.parse().map_err(|_| HarnessError::ConfigParse(format!("unknown experiment kind {s:?}")))
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        Self {
            params: ExperimentParams::default_for(kind),
            seeds: kind.default_seeds(),
            out: PathBuf::from("runs").join(kind.name()),
            tolerance: None,
            parallel: false,
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        self.params.kind()
    }

    /// Parse a TOML config; a kind given in `overrides` must agree with the file.
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| HarnessError::ConfigParse(e.to_string()))?;
        let kind = match (&raw.kind, overrides.kind) {
            (Some(k), Some(o)) => {
                let k = parse_kind(k)?;
                if k != o {
                    return Err(HarnessError::ConfigParse(format!("config is for {k}, command is {o}")));
                }
                k
            }
            (Some(k), None) => parse_kind(k)?,
            (None, Some(o)) => o,
            (None, None) => return Err(HarnessError::ConfigParse("no experiment kind given".into())),
        };
        let mut table = raw.params.unwrap_or_default();
        table.insert("kind".into(), toml::Value::String(kind.name().into()));
        let params: ExperimentParams = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::ConfigParse(format!("params for {kind}: {e}")))?;
        let mut cfg = Self::defaults(kind);
        cfg.params = params;
        if let Some(s) = raw.seeds {
            cfg.seeds = s;
        }
        if let Some(o) = raw.out {
            cfg.out = o;
        }
        cfg.tolerance = raw.tolerance;
        cfg.parallel = raw.parallel.unwrap_or(false);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, overrides)
    }

    /// Defaults for `kind` with command-line overrides applied.
    pub fn from_overrides(kind: ExperimentKind, overrides: &Overrides) -> Result<Self> {
        let mut cfg = Self::defaults(kind);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if o.tolerance.is_some() {
            self.tolerance = o.tolerance;
        }
        self.parallel |= o.parallel;
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings { seeds: self.seeds.clone(), tolerance: self.tolerance, parallel: self.parallel }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate().map_err(|e| HarnessError::ConfigParse(e.to_string()))
    }

    /// The part of the config that determines results; output location and
    /// parallelism are excluded.
    pub fn resolved(&self) -> ResolvedConfig {
        ResolvedConfig { params: self.params.clone(), seeds: self.seeds.clone(), tolerance: self.tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub params: ExperimentParams,
    pub seeds: Vec<u64>,
    pub tolerance: Option<f64>,
}

impl ResolvedConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Everything a run measured, as written to `results.json`; stable for a
/// given config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub config: ResolvedConfig,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, f64>,
    pub summaries: Vec<Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub results: Results,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.results.passed
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::ConfigParse(format!("{}: {e}", path.display())))
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const RESULTS_FILE: &str = "results.json";

fn write(path: PathBuf, contents: &[u8], artifacts: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(io_err(&path))?;
    artifacts.push(path);
    Ok(())
}

/// Run the experiment, then write one CSV per table, `results.json` and
/// `report.json` into the output directory. Nothing is written when the
/// experiment itself errors.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let kind = config.kind();
    let start = Instant::now();
    let out = run_experiment(&config.params, &config.settings())
        .map_err(|source| HarnessError::Experiment { kind, source })?;
    let wall_clock_seconds = start.elapsed().as_secs_f64();

    fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
    let mut artifacts = Vec::new();
    for t in &out.tables {
        let csv = t.to_csv().map_err(|source| HarnessError::Experiment { kind, source })?;
        write(config.out.join(format!("{}.csv", t.name)), csv.as_bytes(), &mut artifacts)?;
    }
    let resolved = config.resolved();
    let results = Results {
        kind,
        config_hash: resolved.hash(),
        config: resolved,
        passed: out.passed(),
        summaries: out.tables.iter().filter(|t| t.is_summary()).cloned().collect(),
        checks: out.checks,
        metrics: out.metrics,
    };
    let json = serde_json::to_vec_pretty(&results).expect("results serialize");
    write(config.out.join(RESULTS_FILE), &json, &mut artifacts)?;
    artifacts.push(config.out.join(REPORT_FILE));
    let report = RunReport { results, wall_clock_seconds, artifacts };
    let path = config.out.join(REPORT_FILE);
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(report)
}

/// One row per report, failing runs first, then by kind and config hash; each
/// row lists pass counts and headline metrics, followed by summary tables.
pub fn report_summary(reports: &[RunReport]) -> String {
    let mut order: Vec<&RunReport> = reports.iter().collect();
    order.sort_by(|a, b| {
        (a.passed(), a.results.kind.name(), &a.results.config_hash).cmp(&(
            b.passed(),
            b.results.kind.name(),
            &b.results.config_hash,
        ))
    });
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {:<20} {:>9} {:>10}  {:<12}  metrics", "status", "experiment", "checks", "seconds", "config");
    for r in &order {
        let res = &r.results;
        let passed = res.checks.iter().filter(|c| c.passed).count();
        let metrics: Vec<String> = res.metrics.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
        let _ = writeln!(
            s,
            "{:<6} {:<20} {:>9} {:>10.3}  {:<12}  {}",
            if r.passed() { "PASS" } else { "FAIL" },
            res.kind.name(),
            format!("{passed}/{}", res.checks.len()),
            r.wall_clock_seconds,
            &res.config_hash[..12.min(res.config_hash.len())],
            metrics.join(" ")
        );
    }
    for r in &order {
        for c in r.results.checks.iter().filter(|c| !c.passed) {
            let _ = writeln!(
                s,
                "  failed {} {}: measured {} {} {}",
                r.results.kind.name(),
                c.name,
                c.measured,
                c.comparison.symbol(),
                c.threshold
            );
        }
    }
    for r in &order {
        for t in &r.results.summaries {
            let _ = write!(s, "\n{} [{}]\n{}", t.name, r.results.kind.name(), t.to_csv().unwrap_or_default());
        }
    }
    s
}

/// Report files named directly or found as `report.json` inside directories.
pub fn collect_reports(paths: &[PathBuf]) -> Result<Vec<RunReport>> {
    let mut out = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
        out.push(RunReport::load(&file)?);
    }
    Ok(out)
}
