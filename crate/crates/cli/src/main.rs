//! Batch command-line front end.
//!
//! Exit status: 0 success, 1 input error, 2 fit failure or non-convergence,
//! 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rydfit::lineshape::{fit_line, LineFitSettings};
use rydfit::pipeline::formats::{
    parse_budget_str, parse_frequency_series_str, parse_levels_str, parse_scan_str, read_text, write_levels,
    write_scan, write_text,
};
use rydfit::pipeline::report::{
    defect_table, AllanReport, BudgetReport, FailureKind, ItemFailure, LineReport, PlotData, SeriesReport,
};
use rydfit::pipeline::{run_analysis, AnalysisReport, Constants};
use rydfit::ritz::{fit_series, SeriesMethod, SeriesOptions};
use rydfit::stability::{allan_deviation, AllanEstimator};
use rydfit::synth::{synth_scan, synth_series, ScanSynthSpec, SeriesSynthSpec};
use rydfit::Error;

#[derive(Debug, Parser)]
#[command(name = "rydfit", version, about = "Rydberg line, defect and series analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Constants file (TOML); the shipped values when absent.
    #[arg(long, global = true)]
    constants: Option<PathBuf>,

    /// Output directory for analyses, output file for synthetic data.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Printed output style.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Aligned columns.
    Text,
    /// JSON.
    Machine,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a Lorentzian to a scan trace.
    FitLine { scan: PathBuf },
    /// Quantum defect of every level against a given ionization energy.
    Defects {
        levels: PathBuf,
        /// Ionization energy, MHz.
        #[arg(long, allow_hyphen_values = true)]
        ei: f64,
    },
    /// Fit the level series.
    FitSeries {
        levels: PathBuf,
        /// 1: extended Ritz, 2: frozen ionization energy, 3: modified Ritz.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
        method: u8,
        /// Weight residuals by the level uncertainties.
        #[arg(long)]
        weighted: bool,
        /// Number of defect expansion terms.
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        terms: u8,
    },
    /// Allan deviation of a frequency record.
    Allan {
        series: PathBuf,
        /// Seconds; falls back to the file's sample_period_s entry.
        #[arg(long)]
        sample_period: Option<f64>,
        /// Averaging factors (comma separated); powers of two by default.
        #[arg(long, value_delimiter = ',')]
        multiples: Option<Vec<usize>>,
        #[arg(long)]
        non_overlapping: bool,
    },
    /// Quadrature total of a systematic error budget.
    Budget { budget: PathBuf },
    /// Write a synthetic level file from a TOML spec.
    SynthSeries { spec: PathBuf },
    /// Write a synthetic scan trace from a TOML spec.
    SynthScan { spec: PathBuf },
    /// Run a batch configuration.
    Report { config: PathBuf },
}

/// How a command ended, short of an error.
enum Outcome {
    Report(Box<AnalysisReport>),
    Data(String),
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        1
    } else if e.is_fit_failure() {
        2
    } else {
        3
    }
}

fn report_code(report: &AnalysisReport) -> u8 {
    if report.failures.iter().any(|f| f.kind != FailureKind::Input) {
        2
    } else if !report.is_success() {
        1
    } else {
        0
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

fn read_input(report: &mut AnalysisReport, path: &Path) -> rydfit::Result<String> {
    let text = read_text(path)?;
    report.provenance.record(path, text.as_bytes());
    Ok(text)
}

fn not_converged(item: String) -> ItemFailure {
    ItemFailure { item, kind: FailureKind::NotConverged, message: "fit did not converge".into() }
}

fn run(cli: &Cli) -> rydfit::Result<Outcome> {
    let constants = match &cli.global.constants {
        Some(p) => Constants::load(p)?,
        None => Constants::default(),
    };
    let rydberg = constants.rydberg_frequency();
    let mut report = AnalysisReport::new(&constants);
    match &cli.command {
        Command::FitLine { scan } => {
            let trace = parse_scan_str(&read_input(&mut report, scan)?).map_err(|e| e.with_path(scan))?;
            let settings = LineFitSettings { dark_floor: constants.dark_rate_floor, ..Default::default() };
            let fit = fit_line(&trace, &settings)?;
            let source = stem(scan);
            if !fit.converged {
                report.failures.push(not_converged(format!("scan {}", scan.display())));
            }
            report.plots.push(PlotData::line(&source, &trace, &fit.params));
            report.lines.push(LineReport::new(source, &fit));
        }
        Command::Defects { levels, ei } => {
            let levels = resolve_levels(&mut report, levels, &constants)?;
            let rows = defect_table(&levels, *ei, rydberg)?;
            report.plots.push(PlotData::defects(&rows));
            report.defects = rows;
            report.defect_ionization = Some(*ei);
        }
        Command::FitSeries { levels, method, weighted, terms } => {
            let levels = resolve_levels(&mut report, levels, &constants)?;
            let method = SeriesMethod::try_from(*method)?;
            let options = SeriesOptions { weighted: *weighted, term_count: usize::from(*terms), ..Default::default() };
            let fit = fit_series(&levels, method, rydberg, &options)?;
            let s = SeriesReport::new(&fit);
            if !s.converged {
                report.failures.push(not_converged(format!("series {method}")));
            }
            report.plots.push(PlotData::residuals(&s));
            report.series.push(s);
        }
        Command::Allan { series, sample_period, multiples, non_overlapping } => {
            let text = read_input(&mut report, series)?;
            let record = parse_frequency_series_str(&text, *sample_period).map_err(|e| e.with_path(series))?;
            let multiples = multiples.clone().unwrap_or_else(|| record.default_multiples());
            let estimator = if *non_overlapping { AllanEstimator::NonOverlapping } else { AllanEstimator::Overlapping };
            let curve = allan_deviation(&record, &multiples, estimator)?;
            report.plots.push(PlotData::allan(&curve));
            report.allan = Some(AllanReport { source: stem(series), sample_period: record.sample_period(), curve });
        }
        Command::Budget { budget } => {
            let b = parse_budget_str(&read_input(&mut report, budget)?).map_err(|e| e.with_path(budget))?;
            report.budget = Some(BudgetReport::new(stem(budget), b));
        }
        Command::SynthSeries { spec } => {
            let spec = SeriesSynthSpec::from_toml_str(&read_text(spec)?).map_err(|e| in_file(e, spec))?;
            return Ok(Outcome::Data(write_levels(&synth_series(&spec, rydberg)?)));
        }
        Command::SynthScan { spec } => {
            let spec = ScanSynthSpec::from_toml_str(&read_text(spec)?).map_err(|e| in_file(e, spec))?;
            return Ok(Outcome::Data(write_scan(&synth_scan(&spec)?)));
        }
        Command::Report { config } => {
            let given = cli.global.constants.as_ref().map(|_| &constants);
            return Ok(Outcome::Report(Box::new(run_analysis(config, given, cli.global.out.as_deref())?)));
        }
    }
    if let Some(dir) = &cli.global.out {
        report.write(dir)?;
    }
    Ok(Outcome::Report(Box::new(report)))
}

fn resolve_levels(
    report: &mut AnalysisReport,
    path: &Path,
    constants: &Constants,
) -> rydfit::Result<Vec<rydfit::ritz::LevelRecord>> {
    let rows = parse_levels_str(&read_input(report, path)?).map_err(|e| e.with_path(path))?;
    rows.iter().map(|r| r.resolve(constants)).collect()
}

fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are input errors; help and version are not errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = std::panic::catch_unwind(|| run(&cli));
    let code = match result {
        Err(_) => 3,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Ok(Ok(Outcome::Data(text))) => match &cli.global.out {
            Some(path) => match write_text(path, &text) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&e)
                }
            },
            None => {
                print!("{text}");
                0
            }
        },
        Ok(Ok(Outcome::Report(report))) => {
            match cli.global.format {
                Format::Text => print!("{}", report.to_text()),
                Format::Machine => println!("{}", report.to_json()),
            }
            for f in &report.failures {
                eprintln!("failed: {}: {}", f.item, f.message);
            }
            report_code(&report)
        }
    };
    ExitCode::from(code)
}
