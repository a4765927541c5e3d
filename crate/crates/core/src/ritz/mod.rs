//! Rydberg-Ritz series mathematics.
//!
//! All energies are frequency equivalents in MHz. A level of principal
//! quantum number `n` with quantum defect `delta` lies at
//!
//! ```text
//! E_n = E_i - R / (n - delta)^2
//! ```
//!
//! below the ionization energy `E_i`. The defect itself varies slowly with
//! `n` and is expanded in even inverse powers of an effective quantum number.
//! Two conventions are supported:
//!
//! * [`SeriesConvention::Explicit`]: `delta0` in every denominator,
//!   `delta(n) = delta0 + a/(n - delta0)^2 + b/(n - delta0)^4 + c/(n - delta0)^6`.
//! * [`SeriesConvention::Implicit`]: the self-consistent form
//!   `delta = delta0 + d2/(n - delta)^2 + d4/(n - delta)^4 + d6/(n - delta)^6`,
//!   solved by fixed-point iteration. Since `1/(n - delta)^2 = (E_i - E_n)/R`
//!   this is a polynomial in `t_n = (E_i - E_n)/R`.

mod series;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use series::{fit_series, predict_level, LevelResidual, SeriesFit, SeriesMethod, SeriesOptions};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default convergence threshold of the implicit defect iteration.
pub const IMPLICIT_TOLERANCE: f64 = 1e-12;

/// Iteration cap of the implicit defect solver.
pub const IMPLICIT_MAX_ITERATIONS: usize = 100;

/// Largest number of defect coefficients (`delta0` through `delta6`).
pub const MAX_TERMS: usize = 4;

/// Mass-adjusted Rydberg constant in wavenumber and frequency units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RydbergConstant {
    /// m^-1
    pub wavenumber: f64,
    /// MHz
    pub frequency: f64,
}

impl RydbergConstant {
    pub fn from_wavenumber(wavenumber: f64) -> Result<Self> {
        Ok(RydbergConstant { wavenumber, frequency: rydberg_frequency_constant(wavenumber)? })
    }
}

/// Converts a Rydberg constant in m^-1 to its frequency equivalent in MHz.
pub fn rydberg_frequency_constant(wavenumber: f64) -> Result<f64> {
    if !(wavenumber.is_finite() && wavenumber > 0.0) {
        return Err(Error::InvalidInput(format!("Rydberg wavenumber must be positive, got {wavenumber}")));
    }
    Ok(wavenumber * SPEED_OF_LIGHT * 1e-6)
}

/// One measured Rydberg level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub n: u32,
    /// Measured frequency of the final excitation step, MHz, when known.
    pub third_step: Option<f64>,
    /// Level energy above the ground-state centroid, MHz.
    pub energy: f64,
    /// 1-sigma uncertainty of `energy`, MHz.
    pub sigma: f64,
}

impl LevelRecord {
    pub fn new(n: u32, energy: f64, sigma: f64) -> Result<Self> {
        let record = LevelRecord { n, third_step: None, energy, sigma };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidInput("principal quantum number must be at least 1".into()));
        }
        if !self.energy.is_finite() {
            return Err(Error::InvalidInput(format!("level n = {} has non-finite energy", self.n)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "level n = {} has uncertainty {}, must be positive",
                self.n, self.sigma
            )));
        }
        Ok(())
    }
}

/// Which defect expansion a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeriesConvention {
    /// `delta0` in every denominator.
    Explicit,
    /// The self-consistent `delta(n)` in every denominator.
    #[default]
    Implicit,
}

/// Defect expansion coefficients `delta0, delta2, delta4, delta6`.
///
/// In the explicit convention the higher coefficients are usually called
/// `a, b, c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RitzCoefficients {
    values: [f64; MAX_TERMS],
    term_count: usize,
}

impl RitzCoefficients {
    /// Coefficients from `delta0` upward; between one and four entries.
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() > MAX_TERMS {
            return Err(Error::InvalidInput(format!(
                "a defect series has 1 to {MAX_TERMS} coefficients, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("defect coefficient {v} is not finite")));
        }
        let mut all = [0.0; MAX_TERMS];
        all[..values.len()].copy_from_slice(values);
        Ok(RitzCoefficients { values: all, term_count: values.len() })
    }

    /// A constant defect.
    pub fn constant(delta0: f64) -> Result<Self> {
        Self::new(&[delta0])
    }

    pub fn delta0(&self) -> f64 {
        self.values[0]
    }

    pub fn term_count(&self) -> usize {
        self.term_count
    }

    /// The populated coefficients, `delta0` first.
    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.term_count]
    }

    /// Coefficient `k` (0 for `delta0`); zero beyond `term_count`.
    pub fn get(&self, k: usize) -> f64 {
        if k < self.term_count {
            self.values[k]
        } else {
            0.0
        }
    }

    pub fn convention_value(&self, convention: SeriesConvention, n: u32) -> Result<f64> {
        match convention {
            SeriesConvention::Explicit => eval_defect_extended(self, n),
            SeriesConvention::Implicit => eval_defect_implicit(self, n, IMPLICIT_TOLERANCE).map(|s| s.defect),
        }
    }
}

impl TryFrom<Vec<f64>> for RitzCoefficients {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<RitzCoefficients> for Vec<f64> {
    fn from(c: RitzCoefficients) -> Self {
        c.as_slice().to_vec()
    }
}

/// `E_n = E_i - R / (n - delta)^2`.
pub fn level_energy(n: u32, delta: f64, ionization: f64, rydberg: f64) -> Result<f64> {
    let effective = n as f64 - delta;
    if !(effective > 0.0) {
        return Err(Error::InvalidEffectiveQuantumNumber { n, defect: delta });
    }
    Ok(ionization - rydberg / (effective * effective))
}

fn check_bound(n: Option<u32>, energy: f64, ionization: f64) -> Result<f64> {
    let binding = ionization - energy;
    if !(binding > 0.0) {
        return Err(Error::UnboundLevel { n, energy, ionization });
    }
    Ok(binding)
}

/// Quantum defect of a level: `delta = n - sqrt(R / (E_i - E_n))`.
pub fn defect_from_energy(n: u32, energy: f64, ionization: f64, rydberg: f64) -> Result<f64> {
    let binding = check_bound(Some(n), energy, ionization)?;
    Ok(n as f64 - (rydberg / binding).sqrt())
}

/// Expansion parameter `t_n = (E_i - E_n) / R`, equal to `1 / (n - delta)^2`.
pub fn t_parameter(energy: f64, ionization: f64, rydberg: f64) -> Result<f64> {
    let binding = check_bound(None, energy, ionization)?;
    Ok(binding / rydberg)
}

/// Explicit expansion `delta0 + sum_k d_k / (n - delta0)^(2k)`.
pub fn eval_defect_extended(coeffs: &RitzCoefficients, n: u32) -> Result<f64> {
    let delta0 = coeffs.delta0();
    let effective = n as f64 - delta0;
    if !(effective > 0.0) {
        return Err(Error::InvalidEffectiveQuantumNumber { n, defect: delta0 });
    }
    Ok(series_sum(coeffs.as_slice(), effective))
}

/// `d0 + d1 x^-2 + d2 x^-4 + ...`, by Horner's rule in `x^-2`.
fn series_sum(coeffs: &[f64], effective: f64) -> f64 {
    let inv2 = 1.0 / (effective * effective);
    let tail = coeffs[1..].iter().rev().fold(0.0, |acc, c| (acc + c) * inv2);
    coeffs[0] + tail
}

/// Result of the implicit defect iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitDefect {
    pub defect: f64,
    pub iterations: usize,
}

/// Fixed-point solution of `delta = delta0 + sum_k d_k / (n - delta)^(2k)`.
///
/// Iterates from `delta0` until successive iterates differ by less than
/// `tolerance`. Requires `n > delta0 + 1`.
pub fn eval_defect_implicit(coeffs: &RitzCoefficients, n: u32, tolerance: f64) -> Result<ImplicitDefect> {
    let delta0 = coeffs.delta0();
    let nf = n as f64;
    if !(nf > delta0 + 1.0) {
        return Err(Error::InvalidEffectiveQuantumNumber { n, defect: delta0 });
    }
    if !(tolerance > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance {tolerance} must be positive")));
    }
    let c = coeffs.as_slice();
    let mut delta = delta0;
    for iteration in 1..=IMPLICIT_MAX_ITERATIONS {
        let effective = nf - delta;
        if !(effective > 0.0) {
            return Err(Error::DivergentSeries { n, iterations: iteration });
        }
        let next = series_sum(c, effective);
        if !next.is_finite() {
            return Err(Error::DivergentSeries { n, iterations: iteration });
        }
        let change = (next - delta).abs();
        delta = next;
        if change < tolerance {
            return Ok(ImplicitDefect { defect: delta, iterations: iteration });
        }
    }
    Err(Error::DivergentSeries { n, iterations: IMPLICIT_MAX_ITERATIONS })
}

/// Defect and its gradient with respect to the coefficients.
pub(crate) fn defect_with_gradient(coeffs: &[f64], n: u32, convention: SeriesConvention) -> Result<(f64, Vec<f64>)> {
    let c = RitzCoefficients::new(coeffs)?;
    let nf = n as f64;
    match convention {
        SeriesConvention::Explicit => {
            let delta = eval_defect_extended(&c, n)?;
            let x = nf - c.delta0();
            let mut grad = vec![0.0; coeffs.len()];
            // d/d delta0 picks up the denominators' dependence
            grad[0] = 1.0
                + coeffs[1..]
                    .iter()
                    .enumerate()
                    .map(|(j, d)| 2.0 * (j + 1) as f64 * d * x.powi(-(2 * j as i32 + 3)))
                    .sum::<f64>();
            for (j, g) in grad.iter_mut().enumerate().skip(1) {
                *g = x.powi(-2 * j as i32);
            }
            Ok((delta, grad))
        }
        SeriesConvention::Implicit => {
            let delta = eval_defect_implicit(&c, n, IMPLICIT_TOLERANCE)?.defect;
            let x = nf - delta;
            // implicit function theorem on delta = F(delta, coeffs)
            let dfd_delta: f64 = coeffs[1..]
                .iter()
                .enumerate()
                .map(|(j, d)| 2.0 * (j + 1) as f64 * d * x.powi(-(2 * j as i32 + 3)))
                .sum();
            let denom = 1.0 - dfd_delta;
            let grad = (0..coeffs.len()).map(|j| x.powi(-2 * j as i32) / denom).collect();
            Ok((delta, grad))
        }
    }
}
