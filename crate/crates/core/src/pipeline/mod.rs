//! Files, energy assembly, error budgets and batch analyses.

pub mod formats;
pub mod report;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ritz::rydberg_frequency_constant;

pub use formats::{parse_budget, parse_frequency_series, parse_level_rows, parse_levels, parse_scan, LevelRow};
pub use report::{run_analysis, AnalysisConfig, AnalysisReport};

/// Text of the constants file shipped with the crate.
pub const DEFAULT_CONSTANTS: &str = include_str!("../../data/constants.toml");

/// Physical constants and defaults, loaded from one versioned TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub version: String,
    /// m^-1
    pub rydberg_wavenumber: f64,
    /// MHz
    pub reference_two_photon: f64,
    /// MHz
    pub centroid_offset: f64,
    /// MHz
    pub independent_two_photon: f64,
    /// MHz
    pub default_level_sigma: f64,
    /// counts/s
    pub dark_rate_floor: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants::from_toml_str(DEFAULT_CONSTANTS).expect("shipped constants parse")
    }
}

impl Constants {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Constants = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&formats::read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rydberg_wavenumber,
            self.reference_two_photon,
            self.centroid_offset,
            self.independent_two_photon,
            self.default_level_sigma,
            self.dark_rate_floor,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("constants must be finite".into()));
        }
        if !(self.rydberg_wavenumber > 0.0 && self.default_level_sigma > 0.0 && self.dark_rate_floor >= 0.0) {
            return Err(Error::Config(
                "Rydberg constant and default sigma must be positive, dark floor non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Rydberg constant in MHz.
    pub fn rydberg_frequency(&self) -> f64 {
        rydberg_frequency_constant(self.rydberg_wavenumber).expect("validated")
    }
}

/// Pieces of a level energy: the measured third step plus the reference
/// two-photon transition plus the hyperfine-centroid offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyAssembly {
    pub third_step: f64,
    pub reference_two_photon: f64,
    pub centroid_offset: f64,
}

impl EnergyAssembly {
    pub fn new(third_step: f64, constants: &Constants) -> Self {
        EnergyAssembly {
            third_step,
            reference_two_photon: constants.reference_two_photon,
            centroid_offset: constants.centroid_offset,
        }
    }

    pub fn assemble(&self) -> f64 {
        assemble_energy(self)
    }
}

/// `third_step + reference_two_photon + centroid_offset`; exact for
/// integral MHz inputs below 2^53.
pub fn assemble_energy(a: &EnergyAssembly) -> f64 {
    a.third_step + a.reference_two_photon + a.centroid_offset
}

/// Independent 1-sigma systematic contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, f64)>", into = "Vec<(String, f64)>")]
pub struct ErrorBudget {
    contributions: Vec<(String, f64)>,
}

impl ErrorBudget {
    pub fn new(contributions: Vec<(String, f64)>) -> Result<Self> {
        let mut labels = HashSet::new();
        for (label, sigma) in &contributions {
            if !(sigma.is_finite() && *sigma >= 0.0) {
                return Err(Error::InvalidInput(format!("contribution {label:?} has sigma {sigma}")));
            }
            if !labels.insert(label.as_str()) {
                return Err(Error::InvalidInput(format!("contribution {label:?} listed twice")));
            }
        }
        Ok(ErrorBudget { contributions })
    }

    pub fn contributions(&self) -> &[(String, f64)] {
        &self.contributions
    }
}

impl TryFrom<Vec<(String, f64)>> for ErrorBudget {
    type Error = Error;

    fn try_from(v: Vec<(String, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ErrorBudget> for Vec<(String, f64)> {
    fn from(b: ErrorBudget) -> Self {
        b.contributions
    }
}

/// Quadrature sum of the contributions.
///
/// Squares are added smallest first, so the result does not depend on the
/// order of the budget.
pub fn total_systematic(budget: &ErrorBudget) -> f64 {
    let mut squares: Vec<f64> = budget.contributions.iter().map(|(_, s)| s * s).collect();
    squares.sort_by(f64::total_cmp);
    squares.iter().sum::<f64>().sqrt()
}

/// Comparison of the reference transition with its independent measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub reference: f64,
    pub independent: f64,
    pub difference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// The reference must agree with the independent value to within 1 MHz.
pub fn reference_cross_check(constants: &Constants) -> ReferenceCheck {
    let difference = constants.reference_two_photon - constants.independent_two_photon;
    let tolerance = 1.0;
    ReferenceCheck {
        reference: constants.reference_two_photon,
        independent: constants.independent_two_photon,
        difference,
        tolerance,
        passed: difference.abs() < tolerance,
    }
}
