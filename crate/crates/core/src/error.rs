use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("residual function is not finite at the initial point (residual {index})")]
    InvalidStart { index: usize },

    #[error("residual function is not finite when probing parameter {index}")]
    Evaluation { index: usize },

    #[error("degenerate problem: normal equations are singular along direction {direction:?}")]
    Degenerate { direction: Vec<f64> },

    #[error("invalid effective quantum number: n = {n}, defect = {defect}")]
    InvalidEffectiveQuantumNumber { n: u32, defect: f64 },

    #[error("level{} at {energy} MHz is not bound below the ionization energy {ionization} MHz", level_label(.n))]
    UnboundLevel { n: Option<u32>, energy: f64, ionization: f64 },

    #[error("implicit defect series for n = {n} did not converge in {iterations} iterations")]
    DivergentSeries { n: u32, iterations: usize },

    #[error("insufficient data: {available} points available, {required} required")]
    InsufficientData { available: usize, required: usize },

    #[error("nonphysical fit: ionization energy {ionization} MHz is not above the highest level {highest} MHz")]
    NonphysicalFit { ionization: f64, highest: f64 },

    #[error("no line found in scan")]
    NoLineFound,

    #[error("averaging factor {multiple} needs {required} samples, series has {available}")]
    InsufficientSpan { multiple: usize, required: usize, available: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}line {line}: {message}", source_prefix(.path))]
    Malformed { path: Option<PathBuf>, line: usize, message: String },

    #[error("{}line {line}: frequency {frequency} is not above the previous row", source_prefix(.path))]
    NonMonotoneFrequency { path: Option<PathBuf>, line: usize, frequency: f64 },

    #[error("{}line {line}: duplicate principal quantum number n = {n}", source_prefix(.path))]
    DuplicateLevel { path: Option<PathBuf>, line: usize, n: u32 },

    #[error("{}no data rows", source_prefix(.path))]
    EmptyFile { path: Option<PathBuf> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn level_label(n: &Option<u32>) -> String {
    n.map(|n| format!(" n = {n}")).unwrap_or_default()
}

fn source_prefix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!("{}: ", p.display()),
        None => String::new(),
    }
}

impl Error {
    /// Attach a file path to parse errors produced from in-memory text.
    pub fn with_path(self, p: &std::path::Path) -> Self {
        let path = Some(p.to_path_buf());
        match self {
            Error::Malformed { line, message, .. } => Error::Malformed { path, line, message },
            Error::NonMonotoneFrequency { line, frequency, .. } => {
                Error::NonMonotoneFrequency { path, line, frequency }
            }
            Error::DuplicateLevel { line, n, .. } => Error::DuplicateLevel { path, line, n },
            Error::EmptyFile { .. } => Error::EmptyFile { path },
            other => other,
        }
    }

    /// True for failures of the fitting machinery itself, as opposed to bad input.
    pub fn is_fit_failure(&self) -> bool {
        matches!(
            self,
            Error::Degenerate { .. }
                | Error::DivergentSeries { .. }
                | Error::NonphysicalFit { .. }
                | Error::Evaluation { .. }
                | Error::InvalidStart { .. }
        )
    }

    /// True for problems with the caller's data, files, or configuration.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Malformed { .. }
                | Error::NonMonotoneFrequency { .. }
                | Error::DuplicateLevel { .. }
                | Error::EmptyFile { .. }
                | Error::Config(_)
                | Error::Io { .. }
                | Error::InsufficientData { .. }
                | Error::InsufficientSpan { .. }
                | Error::NoLineFound
                | Error::UnboundLevel { .. }
                | Error::InvalidEffectiveQuantumNumber { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
