use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use mmcl_cli::{collect_reports, report_summary, run, ExperimentConfig, Overrides};
use mmcl_core::experiments::ExperimentKind;

#[derive(Parser)]
#[command(name = "mmcl", version, about = "Spectral contrastive learning experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Loss equivalence on random instances.
    VerifyEquivalence(RunArgs),
    /// Trained encoders against the closed-form optimum, plus gradient checks.
    VerifyOptimum(RunArgs),
    /// Closed-form hierarchical graph spectra.
    HrgSpectrum(RunArgs),
    /// Spectrum monotonicity and probe error across a separation sweep.
    BoundSweep(RunArgs),
    /// Multi-modal against uni-modal optimal features.
    UniEquivalence(RunArgs),
    /// Teacher-guided resampling strategies against the baseline.
    ResampleCompare(RunArgs),
    /// Labeling error inequality, batch loss unbiasedness, graph estimators.
    Estimators(RunArgs),
    /// Summarize saved reports (files or run directories).
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds, comma separated or repeated.
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Primary tolerance override.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Fan seeds and instances across threads.
    #[arg(long)]
    parallel: bool,
}

fn execute(kind: ExperimentKind, args: RunArgs) -> anyhow::Result<bool> {
    let overrides = Overrides {
        kind: Some(kind),
        seeds: (!args.seeds.is_empty()).then_some(args.seeds),
        out: args.out,
        tolerance: args.tolerance,
        parallel: args.parallel,
    };
    let config = match &args.config {
        Some(p) => ExperimentConfig::load(p, &overrides)?,
        None => ExperimentConfig::from_overrides(kind, &overrides)?,
    };
    let report = run(&config).with_context(|| format!("running {kind}"))?;
    print!("{}", report_summary(std::slice::from_ref(&report)));
    println!("artifacts in {}", config.out.display());
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let kind = match &cli.command {
        Command::VerifyEquivalence(_) => Some(ExperimentKind::VerifyEquivalence),
        Command::VerifyOptimum(_) => Some(ExperimentKind::VerifyOptimum),
        Command::HrgSpectrum(_) => Some(ExperimentKind::HrgSpectrum),
        Command::BoundSweep(_) => Some(ExperimentKind::BoundSweep),
        Command::UniEquivalence(_) => Some(ExperimentKind::UniEquivalence),
        Command::ResampleCompare(_) => Some(ExperimentKind::ResampleCompare),
        Command::Estimators(_) => Some(ExperimentKind::Estimators),
        Command::Report { .. } => None,
    };
    let outcome = match cli.command {
        Command::Report { paths } => collect_reports(&paths).map_err(anyhow::Error::from).map(|reports| {
            print!("{}", report_summary(&reports));
            reports.iter().all(|r| r.passed())
        }),
        Command::VerifyEquivalence(a)
        | Command::VerifyOptimum(a)
        | Command::HrgSpectrum(a)
        | Command::BoundSweep(a)
        | Command::UniEquivalence(a)
        | Command::ResampleCompare(a)
        | Command::Estimators(a) => execute(kind.expect("run command has a kind"), a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
