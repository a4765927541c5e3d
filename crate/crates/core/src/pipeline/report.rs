//! Batch analysis driven by a TOML configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::formats::{
    parse_budget_str, parse_frequency_series_str, parse_levels_str, parse_scan_str, read_text, write_text,
};
use super::{reference_cross_check, total_systematic, Constants, ErrorBudget, ReferenceCheck};
use crate::error::{Error, Result};
use crate::lineshape::{fit_line, lorentzian_model, LineFitResult, LineFitSettings, LorentzianParams, ScanTrace};
use crate::optim::FitOptions;
use crate::ritz::{
    defect_from_energy, fit_series, t_parameter, LevelRecord, SeriesFit, SeriesMethod, SeriesOptions, MAX_TERMS,
};
use crate::stability::{allan_deviation, AllanCurve, AllanEstimator};

fn default_methods() -> Vec<SeriesMethod> {
    SeriesMethod::ALL.to_vec()
}

fn default_term_count() -> usize {
    MAX_TERMS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllanConfig {
    pub path: PathBuf,
    /// Seconds; falls back to the file's `sample_period_s` entry.
    #[serde(default)]
    pub sample_period: Option<f64>,
    /// Averaging factors; powers of two up to a quarter of the record by default.
    #[serde(default)]
    pub multiples: Option<Vec<usize>>,
    #[serde(default)]
    pub estimator: AllanEstimator,
}

/// What a batch run reads and does. Relative paths are taken from the
/// directory holding the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Where report and plot files go.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Constants file; the shipped one when absent.
    #[serde(default)]
    pub constants: Option<PathBuf>,
    #[serde(default)]
    pub scans: Vec<PathBuf>,
    #[serde(default)]
    pub levels: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<SeriesMethod>,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default = "default_term_count")]
    pub term_count: usize,
    /// Ionization energy for the per-level defect table, MHz; the first
    /// successful series fit supplies it when absent.
    #[serde(default)]
    pub defect_ionization: Option<f64>,
    #[serde(default)]
    pub budget: Option<PathBuf>,
    #[serde(default)]
    pub allan: Option<AllanConfig>,
}

impl AnalysisConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: AnalysisConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a configuration and anchors its relative paths at its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config =
            Self::from_toml_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.output_dir.as_mut().map(anchor);
        config.constants.as_mut().map(anchor);
        config.levels.as_mut().map(anchor);
        config.budget.as_mut().map(anchor);
        config.scans.iter_mut().for_each(anchor);
        if let Some(a) = config.allan.as_mut() {
            anchor(&mut a.path);
        }
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.scans.is_empty() && self.levels.is_none() && self.budget.is_none() && self.allan.is_none() {
            return Err(Error::Config("nothing to analyse: give scans, levels, budget or allan".into()));
        }
        if self.levels.is_some() && self.methods.is_empty() {
            return Err(Error::Config("levels given but no fit methods".into()));
        }
        if !(1..=MAX_TERMS).contains(&self.term_count) {
            return Err(Error::Config(format!("term_count must be 1 to {MAX_TERMS}")));
        }
        Ok(())
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        v.extend(self.constants.iter().cloned());
        v.extend(self.scans.iter().cloned());
        v.extend(self.levels.iter().cloned());
        v.extend(self.budget.iter().cloned());
        v.extend(self.allan.iter().map(|a| a.path.clone()));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub constants: Constants,
    pub config: Option<PathBuf>,
    pub inputs: Vec<InputDigest>,
}

impl Provenance {
    pub fn new(constants: &Constants) -> Self {
        Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            constants: constants.clone(),
            config: None,
            inputs: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path, content: &[u8]) {
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(content)),
            bytes: content.len(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Input,
    Fit,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item: String,
    pub kind: FailureKind,
    pub message: String,
}

impl ItemFailure {
    fn from_error(item: impl Into<String>, e: &Error) -> Self {
        let kind = if e.is_fit_failure() { FailureKind::Fit } else { FailureKind::Input };
        ItemFailure { item: item.into(), kind, message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineReport {
    pub source: String,
    pub params: LorentzianParams,
    pub errors: LorentzianParams,
    pub signal_to_noise: f64,
    pub noise: f64,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub edge_of_scan: bool,
}

impl LineReport {
    pub fn new(source: impl Into<String>, fit: &LineFitResult) -> Self {
        LineReport {
            source: source.into(),
            params: fit.params,
            errors: fit.errors,
            signal_to_noise: fit.signal_to_noise,
            noise: fit.noise,
            residual_norm: fit.residual_norm,
            converged: fit.converged,
            iterations: fit.iterations,
            edge_of_scan: fit.edge_of_scan,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectRow {
    pub n: u32,
    pub energy: f64,
    pub sigma: f64,
    pub defect: f64,
    /// `(E_i - E_n) / R`
    pub t: f64,
}

/// Per-level defects and expansion parameters against a given limit.
pub fn defect_table(levels: &[LevelRecord], ionization: f64, rydberg: f64) -> Result<Vec<DefectRow>> {
    levels
        .iter()
        .map(|l| {
            Ok(DefectRow {
                n: l.n,
                energy: l.energy,
                sigma: l.sigma,
                defect: defect_from_energy(l.n, l.energy, ionization, rydberg)?,
                t: t_parameter(l.energy, ionization, rydberg)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub n: u32,
    pub measured: f64,
    pub predicted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub method: SeriesMethod,
    pub weighted: bool,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub rydberg: f64,
    pub converged: bool,
    pub iterations: usize,
    pub rms_residual: f64,
    pub residuals: Vec<ResidualRow>,
}

impl SeriesReport {
    pub fn new(fit: &SeriesFit) -> Self {
        let k = fit.covariance.nrows();
        SeriesReport {
            method: fit.method,
            weighted: fit.weighted,
            names: fit.parameter_names().iter().map(|s| s.to_string()).collect(),
            values: fit.parameters(),
            errors: fit.errors.clone(),
            covariance: (0..k).map(|i| (0..k).map(|j| fit.covariance[(i, j)]).collect()).collect(),
            rydberg: fit.rydberg,
            converged: fit.converged,
            iterations: fit.iterations,
            rms_residual: fit.rms_residual(),
            residuals: fit
                .residuals
                .iter()
                .map(|r| ResidualRow { n: r.n, measured: r.measured, predicted: r.predicted, residual: r.residual })
                .collect(),
        }
    }

    pub fn ionization_energy(&self) -> f64 {
        self.values[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanReport {
    pub source: String,
    pub sample_period: f64,
    pub curve: AllanCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub source: String,
    pub contributions: ErrorBudget,
    pub total: f64,
}

impl BudgetReport {
    pub fn new(source: impl Into<String>, budget: ErrorBudget) -> Self {
        let total = total_systematic(&budget);
        BudgetReport { source: source.into(), contributions: budget, total }
    }
}

/// Two-or-more-column numeric table for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotData {
    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.columns.join(" "));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
        out
    }

    pub fn line(source: &str, trace: &ScanTrace, params: &LorentzianParams) -> Self {
        PlotData {
            name: format!("line_{source}.dat"),
            columns: vec!["frequency_mhz".into(), "rate_hz".into(), "model_hz".into()],
            rows: trace
                .frequencies()
                .iter()
                .zip(trace.rates())
                .map(|(f, r)| vec![*f, *r, lorentzian_model(params, *f)])
                .collect(),
        }
    }

    pub fn defects(rows: &[DefectRow]) -> Self {
        PlotData {
            name: "defects.dat".into(),
            columns: vec!["n".into(), "defect".into()],
            rows: rows.iter().map(|r| vec![r.n as f64, r.defect]).collect(),
        }
    }

    pub fn residuals(series: &SeriesReport) -> Self {
        PlotData {
            name: format!("residuals_method{}.dat", series.method.number()),
            columns: vec!["n".into(), "residual_mhz".into()],
            rows: series.residuals.iter().map(|r| vec![r.n as f64, r.residual]).collect(),
        }
    }

    pub fn allan(curve: &AllanCurve) -> Self {
        PlotData {
            name: "allan.dat".into(),
            columns: vec!["tau_s".into(), "deviation_mhz".into()],
            rows: curve.points.iter().map(|p| vec![p.tau, p.deviation]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub reference_check: ReferenceCheck,
    pub lines: Vec<LineReport>,
    pub defect_ionization: Option<f64>,
    pub defects: Vec<DefectRow>,
    pub series: Vec<SeriesReport>,
    pub allan: Option<AllanReport>,
    pub budget: Option<BudgetReport>,
    pub failures: Vec<ItemFailure>,
    #[serde(skip)]
    pub plots: Vec<PlotData>,
}

impl AnalysisReport {
    pub fn new(constants: &Constants) -> Self {
        AnalysisReport {
            provenance: Provenance::new(constants),
            reference_check: reference_cross_check(constants),
            lines: Vec::new(),
            defect_ionization: None,
            defects: Vec::new(),
            series: Vec::new(),
            allan: None,
            budget: None,
            failures: Vec::new(),
            plots: Vec::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.failures.is_empty() && self.reference_check.passed
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        render_text(self)
    }

    /// Writes `report.txt`, `report.json` and the plot files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        let mut written = Vec::new();
        let mut put = |name: &str, text: &str| -> Result<()> {
            let p = dir.join(name);
            write_text(&p, text)?;
            written.push(p);
            Ok(())
        };
        put("report.txt", &self.to_text())?;
        put("report.json", &self.to_json())?;
        for plot in &self.plots {
            put(&plot.name, &plot.to_text())?;
        }
        Ok(written)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

/// Human-readable report with aligned columns.
pub fn render_text(report: &AnalysisReport) -> String {
    let mut out = String::new();
    let p = &report.provenance;
    writeln!(out, "{} {} analysis report", p.tool, p.version).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "Provenance").unwrap();
    if let Some(c) = &p.config {
        writeln!(out, "  config      {}", c.display()).unwrap();
    }
    for input in &p.inputs {
        writeln!(out, "  input       {}  sha256 {}  ({} bytes)", input.path.display(), input.sha256, input.bytes)
            .unwrap();
    }
    let c = &p.constants;
    writeln!(out, "  constants   version {}", c.version).unwrap();
    writeln!(out, "    rydberg_wavenumber      {} m^-1 ({} MHz)", c.rydberg_wavenumber, c.rydberg_frequency()).unwrap();
    writeln!(out, "    reference_two_photon    {} MHz", c.reference_two_photon).unwrap();
    writeln!(out, "    centroid_offset         {} MHz", c.centroid_offset).unwrap();
    writeln!(out, "    independent_two_photon  {} MHz", c.independent_two_photon).unwrap();
    writeln!(out, "    default_level_sigma     {} MHz", c.default_level_sigma).unwrap();
    writeln!(out, "    dark_rate_floor         {} counts/s", c.dark_rate_floor).unwrap();
    let r = &report.reference_check;
    writeln!(
        out,
        "  reference check: {} - {} = {:.3} MHz, {} (limit {} MHz)",
        r.reference,
        r.independent,
        r.difference,
        if r.passed { "pass" } else { "FAIL" },
        r.tolerance
    )
    .unwrap();

    if !report.lines.is_empty() {
        writeln!(out, "\nLine fits").unwrap();
        writeln!(
            out,
            "  {:<20} {:>18} {:>10} {:>10} {:>10} {:>10} {:>9} {:>5}",
            "source", "center_mhz", "err", "fwhm_mhz", "amplitude", "baseline", "S/N", "edge"
        )
        .unwrap();
        for l in &report.lines {
            writeln!(
                out,
                "  {:<20} {:>18.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.1} {:>5}",
                l.source,
                l.params.center,
                l.errors.center,
                l.params.fwhm,
                l.params.amplitude,
                l.params.baseline,
                l.signal_to_noise,
                if l.edge_of_scan { "yes" } else { "no" }
            )
            .unwrap();
        }
    }

    for s in &report.series {
        writeln!(
            out,
            "\nSeries fit, {}{} ({} iterations, {}converged, rms residual {:.3} MHz)",
            s.method,
            if s.weighted { ", weighted" } else { "" },
            s.iterations,
            if s.converged { "" } else { "NOT " },
            s.rms_residual
        )
        .unwrap();
        for ((name, v), e) in s.names.iter().zip(&s.values).zip(&s.errors) {
            writeln!(out, "  {name:<8} {v:>22.9} +/- {e:.3e}").unwrap();
        }
    }

    if !report.defects.is_empty() {
        writeln!(
            out,
            "\nQuantum defects (E_i = {} MHz)",
            report.defect_ionization.map(|e| e.to_string()).unwrap_or_default()
        )
        .unwrap();
        writeln!(out, "  {:>4} {:>16} {:>10} {:>12}", "n", "energy_mhz", "defect", "t").unwrap();
        for d in &report.defects {
            writeln!(out, "  {:>4} {:>16.1} {:>10.6} {:>12.6e}", d.n, d.energy, d.defect, d.t).unwrap();
        }
    }

    if let Some(a) = &report.allan {
        writeln!(out, "\nAllan deviation ({}, {:?})", a.source, a.curve.estimator).unwrap();
        writeln!(out, "  {:>12} {:>16} {:>8}", "tau_s", "deviation", "pairs").unwrap();
        for p in &a.curve.points {
            writeln!(out, "  {:>12} {:>16.6e} {:>8}", p.tau, p.deviation, p.pairs).unwrap();
        }
    }

    if let Some(b) = &report.budget {
        writeln!(out, "\nSystematic error budget ({})", b.source).unwrap();
        for (label, sigma) in b.contributions.contributions() {
            writeln!(out, "  {label:<20} {sigma:>10} MHz").unwrap();
        }
        writeln!(out, "  {:<20} {:>10.2} MHz", "total (quadrature)", b.total).unwrap();
    }

    if !report.failures.is_empty() {
        writeln!(out, "\nFailures").unwrap();
        for f in &report.failures {
            writeln!(out, "  {} [{:?}]: {}", f.item, f.kind, f.message).unwrap();
        }
    }
    out
}

/// Runs every item of a configuration.
///
/// The configuration and all inputs are read before any work; a missing
/// input aborts the run without writing anything. Failures of individual
/// items are collected in the report. Files are written to `out`, or to the
/// configuration's `output_dir`, when either is given.
pub fn run_analysis(config_path: &Path, constants: Option<&Constants>, out: Option<&Path>) -> Result<AnalysisReport> {
    let config = AnalysisConfig::load(config_path)?;
    let mut texts = Vec::new();
    for path in config.inputs() {
        let text = read_text(&path)?;
        texts.push((path, text));
    }
    let text_of = |p: &Path| texts.iter().find(|(q, _)| q == p).map(|(_, t)| t.as_str()).expect("read above");

    let constants = match (constants, &config.constants) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => {
            Constants::from_toml_str(text_of(p)).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        (None, None) => Constants::default(),
    };
    let rydberg = constants.rydberg_frequency();
    let mut report = AnalysisReport::new(&constants);
    report.provenance.config = Some(config_path.to_path_buf());
    for (path, text) in &texts {
        report.provenance.record(path, text.as_bytes());
    }

    let line_settings = LineFitSettings { dark_floor: constants.dark_rate_floor, ..Default::default() };
    for path in &config.scans {
        let source = stem(path);
        let result = parse_scan_str(text_of(path))
            .map_err(|e| e.with_path(path))
            .and_then(|trace| fit_line(&trace, &line_settings).map(|fit| (trace, fit)));
        match result {
            Ok((trace, fit)) => {
                if !fit.converged {
                    report.failures.push(ItemFailure {
                        item: format!("scan {}", path.display()),
                        kind: FailureKind::NotConverged,
                        message: "line fit did not converge".into(),
                    });
                }
                report.plots.push(PlotData::line(&source, &trace, &fit.params));
                report.lines.push(LineReport::new(source, &fit));
            }
            Err(e) => report.failures.push(ItemFailure::from_error(format!("scan {}", path.display()), &e)),
        }
    }

    if let Some(path) = &config.levels {
        let levels = parse_levels_str(text_of(path))
            .map_err(|e| e.with_path(path))
            .and_then(|rows| rows.iter().map(|r| r.resolve(&constants)).collect::<Result<Vec<_>>>());
        match levels {
            Ok(levels) => {
                let options = SeriesOptions {
                    fit: FitOptions::default(),
                    weighted: config.weighted,
                    term_count: config.term_count,
                };
                for &method in &config.methods {
                    match fit_series(&levels, method, rydberg, &options) {
                        Ok(fit) => {
                            let s = SeriesReport::new(&fit);
                            if !s.converged {
                                report.failures.push(ItemFailure {
                                    item: format!("series {method}"),
                                    kind: FailureKind::NotConverged,
                                    message: "series fit did not converge".into(),
                                });
                            }
                            report.plots.push(PlotData::residuals(&s));
                            report.series.push(s);
                        }
                        Err(e) => report.failures.push(ItemFailure::from_error(format!("series {method}"), &e)),
                    }
                }
                let ionization =
                    config.defect_ionization.or_else(|| report.series.first().map(SeriesReport::ionization_energy));
                if let Some(ei) = ionization {
                    match defect_table(&levels, ei, rydberg) {
                        Ok(rows) => {
                            report.plots.push(PlotData::defects(&rows));
                            report.defects = rows;
                            report.defect_ionization = Some(ei);
                        }
                        Err(e) => report.failures.push(ItemFailure::from_error("defects", &e)),
                    }
                }
            }
            Err(e) => report.failures.push(ItemFailure::from_error(format!("levels {}", path.display()), &e)),
        }
    }

    if let Some(allan) = &config.allan {
        let result = parse_frequency_series_str(text_of(&allan.path), allan.sample_period)
            .map_err(|e| e.with_path(&allan.path))
            .and_then(|series| {
                let multiples = allan.multiples.clone().unwrap_or_else(|| series.default_multiples());
                allan_deviation(&series, &multiples, allan.estimator).map(|c| (series.sample_period(), c))
            });
        match result {
            Ok((sample_period, curve)) => {
                report.plots.push(PlotData::allan(&curve));
                report.allan = Some(AllanReport { source: stem(&allan.path), sample_period, curve });
            }
            Err(e) => report.failures.push(ItemFailure::from_error(format!("allan {}", allan.path.display()), &e)),
        }
    }

    if let Some(path) = &config.budget {
        match parse_budget_str(text_of(path)).map_err(|e| e.with_path(path)) {
            Ok(b) => report.budget = Some(BudgetReport::new(stem(path), b)),
            Err(e) => report.failures.push(ItemFailure::from_error(format!("budget {}", path.display()), &e)),
        }
    }

    if let Some(dir) = out.map(Path::to_path_buf).or(config.output_dir.clone()) {
        report.write(&dir)?;
    }
    Ok(report)
}
