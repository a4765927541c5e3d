//! Fits of the Rydberg-Ritz series to measured level energies.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{defect_from_energy, defect_with_gradient, LevelRecord, RitzCoefficients, SeriesConvention, MAX_TERMS};
use crate::error::{Error, Result};
use crate::optim::{minimize_least_squares, FitOptions, FitProblem, FitResult};

/// The three fitting procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SeriesMethod {
    /// One energy fit with `delta0` in all denominators.
    Extended = 1,
    /// Ionization energy from the extended fit, then a fit of the per-level
    /// defects with that energy frozen.
    FrozenIonization = 2,
    /// One energy fit with the self-consistent (implicit) defect.
    Modified = 3,
}

impl SeriesMethod {
    pub const ALL: [SeriesMethod; 3] = [SeriesMethod::Extended, SeriesMethod::FrozenIonization, SeriesMethod::Modified];

    pub fn number(self) -> u8 {
        self as u8
    }

    /// Defect convention used when this method's coefficients are evaluated.
    pub fn convention(self) -> SeriesConvention {
        match self {
            SeriesMethod::Extended | SeriesMethod::FrozenIonization => SeriesConvention::Explicit,
            SeriesMethod::Modified => SeriesConvention::Implicit,
        }
    }
}

impl TryFrom<u8> for SeriesMethod {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(SeriesMethod::Extended),
            2 => Ok(SeriesMethod::FrozenIonization),
            3 => Ok(SeriesMethod::Modified),
            _ => Err(Error::InvalidInput(format!("fit method must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl From<SeriesMethod> for u8 {
    fn from(m: SeriesMethod) -> u8 {
        m.number()
    }
}

impl fmt::Display for SeriesMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "method {}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesOptions {
    pub fit: FitOptions,
    /// Weight each level by `1/sigma`.
    pub weighted: bool,
    /// Number of defect coefficients, `delta0` included (1 to 4).
    pub term_count: usize,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions { fit: FitOptions::default(), weighted: false, term_count: MAX_TERMS }
    }
}

/// Per-level comparison of measurement and fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelResidual {
    pub n: u32,
    pub measured: f64,
    pub predicted: f64,
    /// `predicted - measured`, MHz.
    pub residual: f64,
    /// Defect of the measured level relative to the fitted ionization energy.
    pub defect: f64,
}

/// Outcome of a series fit.
///
/// Parameters are ordered `[E_i, delta0, delta2, ...]`. For
/// [`SeriesMethod::FrozenIonization`] the ionization energy and its error
/// come from the first stage and the covariance is block diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFit {
    pub method: SeriesMethod,
    pub ionization_energy: f64,
    pub coefficients: RitzCoefficients,
    /// 1-sigma errors, same order as the parameters.
    pub errors: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub rydberg: f64,
    pub residuals: Vec<LevelResidual>,
    pub converged: bool,
    pub iterations: usize,
    pub weighted: bool,
}

impl SeriesFit {
    pub fn ionization_error(&self) -> f64 {
        self.errors[0]
    }

    pub fn parameter_names(&self) -> Vec<&'static str> {
        let names: &[&'static str] = match self.method.convention() {
            SeriesConvention::Explicit => &["E_i", "delta0", "a", "b", "c"],
            SeriesConvention::Implicit => &["E_i", "delta0", "delta2", "delta4", "delta6"],
        };
        names[..1 + self.coefficients.term_count()].to_vec()
    }

    pub fn parameters(&self) -> Vec<f64> {
        std::iter::once(self.ionization_energy).chain(self.coefficients.as_slice().iter().copied()).collect()
    }

    /// Root-mean-square energy residual, MHz.
    pub fn rms_residual(&self) -> f64 {
        let n = self.residuals.len().max(1) as f64;
        (self.residuals.iter().map(|r| r.residual * r.residual).sum::<f64>() / n).sqrt()
    }

    pub fn predict(&self, n: u32) -> Result<(f64, f64)> {
        predict_level(self, n)
    }
}

/// Model energy and its gradient with respect to `[E_i, coefficients...]`.
fn energy_with_gradient(params: &[f64], n: u32, rydberg: f64, convention: SeriesConvention) -> Result<(f64, Vec<f64>)> {
    let (delta, dgrad) = defect_with_gradient(&params[1..], n, convention)?;
    let effective = n as f64 - delta;
    if !(effective > 0.0) {
        return Err(Error::InvalidEffectiveQuantumNumber { n, defect: delta });
    }
    let binding = rydberg / (effective * effective);
    let de_ddelta = -2.0 * binding / effective;
    let mut grad = Vec::with_capacity(params.len());
    grad.push(1.0);
    grad.extend(dgrad.iter().map(|g| de_ddelta * g));
    Ok((params[0] - binding, grad))
}

/// Binding energy `R/(n - delta)^2` predicted by the coefficients.
fn model_binding(coeffs: &[f64], n: u32, rydberg: f64, convention: SeriesConvention) -> Option<f64> {
    let c = RitzCoefficients::new(coeffs).ok()?;
    let delta = c.convention_value(convention, n).ok()?;
    let effective = n as f64 - delta;
    (effective > 0.0).then(|| rydberg / (effective * effective))
}

/// Least-squares fit of measured energies over `[E_i, coefficients...]`.
fn fit_energies(
    levels: &[LevelRecord],
    rydberg: f64,
    convention: SeriesConvention,
    initial: &[f64],
    options: &SeriesOptions,
) -> Result<FitResult> {
    let k = initial.len();
    let residuals = move |p: &[f64]| -> Vec<f64> {
        levels
            .iter()
            .map(|l| match model_binding(&p[1..], l.n, rydberg, convention) {
                // (E_i - E_n) first keeps the 1e9 MHz offsets out of the rounding
                Some(binding) => (p[0] - l.energy) - binding,
                None => f64::NAN,
            })
            .collect()
    };
    let jacobian = move |p: &[f64]| -> DMatrix<f64> {
        let mut j = DMatrix::from_element(levels.len(), k, f64::NAN);
        for (i, l) in levels.iter().enumerate() {
            if let Ok((_, g)) = energy_with_gradient(p, l.n, rydberg, convention) {
                for (c, v) in g.into_iter().enumerate() {
                    j[(i, c)] = v;
                }
            }
        }
        j
    };
    let mut problem = FitProblem::new(k, levels.len(), residuals)?.with_jacobian(jacobian);
    if options.weighted {
        problem = problem.with_weights(levels.iter().map(|l| 1.0 / l.sigma).collect())?;
    }
    minimize_least_squares(&problem, initial, &options.fit)
}

/// Least-squares fit of per-level defects to the explicit series.
fn fit_defects(
    ns: &[u32],
    defects: &[f64],
    sigmas: &[f64],
    initial: &[f64],
    options: &SeriesOptions,
) -> Result<FitResult> {
    let k = initial.len();
    let residuals = move |p: &[f64]| -> Vec<f64> {
        ns.iter()
            .zip(defects)
            .map(|(&n, d)| {
                RitzCoefficients::new(p)
                    .and_then(|c| super::eval_defect_extended(&c, n))
                    .map(|model| model - d)
                    .unwrap_or(f64::NAN)
            })
            .collect()
    };
    let jacobian = move |p: &[f64]| -> DMatrix<f64> {
        let mut j = DMatrix::from_element(ns.len(), k, f64::NAN);
        for (i, &n) in ns.iter().enumerate() {
            if let Ok((_, g)) = defect_with_gradient(p, n, SeriesConvention::Explicit) {
                for (c, v) in g.into_iter().enumerate() {
                    j[(i, c)] = v;
                }
            }
        }
        j
    };
    let mut problem = FitProblem::new(k, ns.len(), residuals)?.with_jacobian(jacobian);
    if options.weighted {
        problem = problem.with_weights(sigmas.iter().map(|s| 1.0 / s).collect())?;
    }
    minimize_least_squares(&problem, initial, &options.fit)
}

/// Starting point: a constant defect and ionization energy that reproduce
/// the lowest and highest levels exactly.
fn initial_guess(levels: &[LevelRecord], rydberg: f64, term_count: usize) -> Result<Vec<f64>> {
    let lo = levels.iter().min_by_key(|l| l.n).expect("non-empty");
    let hi = levels.iter().max_by_key(|l| l.n).expect("non-empty");
    let gap = hi.energy - lo.energy;
    if !(gap > 0.0) {
        return Err(Error::InvalidInput(format!("level n = {} is not above level n = {}", hi.n, lo.n)));
    }
    let (na, nb) = (lo.n as f64, hi.n as f64);
    // R [1/(na - d)^2 - 1/(nb - d)^2] grows monotonically as d -> na
    let mismatch = |d: f64| rydberg * ((na - d).powi(-2) - (nb - d).powi(-2)) - gap;
    let (mut a, mut b) = (-na, na - 1e-6 * na.max(1.0));
    let delta0 = if mismatch(a) < 0.0 && mismatch(b) > 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mismatch(mid) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    } else {
        0.0
    };
    let ionization = hi.energy + rydberg / (nb - delta0).powi(2);
    let mut start = vec![ionization, delta0];
    start.resize(1 + term_count, 0.0);
    Ok(start)
}

fn check_levels(levels: &[LevelRecord], free: usize) -> Result<()> {
    let required = free + 3;
    if levels.len() < required {
        return Err(Error::InsufficientData { available: levels.len(), required });
    }
    let mut seen = std::collections::BTreeSet::new();
    for l in levels {
        l.validate()?;
        if !seen.insert(l.n) {
            return Err(Error::InvalidInput(format!("level n = {} appears twice", l.n)));
        }
    }
    Ok(())
}

/// Fits a Rydberg-Ritz series to measured levels with one of the three methods.
pub fn fit_series(
    levels: &[LevelRecord],
    method: SeriesMethod,
    rydberg: f64,
    options: &SeriesOptions,
) -> Result<SeriesFit> {
    if !(1..=MAX_TERMS).contains(&options.term_count) {
        return Err(Error::InvalidInput(format!("term count must be 1 to {MAX_TERMS}, got {}", options.term_count)));
    }
    if !(rydberg.is_finite() && rydberg > 0.0) {
        return Err(Error::InvalidInput(format!("Rydberg constant {rydberg} must be positive")));
    }
    let k = 1 + options.term_count;
    check_levels(levels, k)?;
    let start = initial_guess(levels, rydberg, options.term_count)?;

    let energy_fit = fit_energies(levels, rydberg, method.convention(), &start, options)?;
    let (parameters, covariance, converged, iterations) = match method {
        SeriesMethod::Extended | SeriesMethod::Modified => {
            (energy_fit.parameters.clone(), energy_fit.covariance.clone(), energy_fit.converged, energy_fit.iterations)
        }
        SeriesMethod::FrozenIonization => {
            let ionization = energy_fit.parameters[0];
            check_physical(levels, ionization)?;
            let ns: Vec<u32> = levels.iter().map(|l| l.n).collect();
            let defects = levels
                .iter()
                .map(|l| defect_from_energy(l.n, l.energy, ionization, rydberg))
                .collect::<Result<Vec<_>>>()?;
            // d(delta)/dE = (n - delta)^3 / (2R)
            let sigmas: Vec<f64> = levels
                .iter()
                .zip(&defects)
                .map(|(l, d)| l.sigma * (l.n as f64 - d).powi(3) / (2.0 * rydberg))
                .collect();
            let defect_fit = fit_defects(&ns, &defects, &sigmas, &energy_fit.parameters[1..], options)?;
            let mut covariance = DMatrix::zeros(k, k);
            covariance[(0, 0)] = energy_fit.covariance[(0, 0)];
            covariance.view_mut((1, 1), (k - 1, k - 1)).copy_from(&defect_fit.covariance);
            let mut parameters = vec![ionization];
            parameters.extend_from_slice(&defect_fit.parameters);
            (
                parameters,
                covariance,
                energy_fit.converged && defect_fit.converged,
                energy_fit.iterations + defect_fit.iterations,
            )
        }
    };

    let ionization = parameters[0];
    check_physical(levels, ionization)?;
    let coefficients = RitzCoefficients::new(&parameters[1..])?;
    let errors = covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut fit = SeriesFit {
        method,
        ionization_energy: ionization,
        coefficients,
        errors,
        covariance,
        rydberg,
        residuals: Vec::new(),
        converged,
        iterations,
        weighted: options.weighted,
    };
    fit.residuals = levels
        .iter()
        .map(|l| {
            let predicted = model_energy(&fit, l.n)?;
            Ok(LevelResidual {
                n: l.n,
                measured: l.energy,
                predicted,
                residual: predicted - l.energy,
                defect: defect_from_energy(l.n, l.energy, ionization, rydberg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fit)
}

fn check_physical(levels: &[LevelRecord], ionization: f64) -> Result<()> {
    let highest = levels.iter().map(|l| l.energy).fold(f64::NEG_INFINITY, f64::max);
    if !(ionization > highest) {
        return Err(Error::NonphysicalFit { ionization, highest });
    }
    Ok(())
}

fn model_energy(fit: &SeriesFit, n: u32) -> Result<f64> {
    Ok(energy_with_gradient(&fit.parameters(), n, fit.rydberg, fit.method.convention())?.0)
}

/// Energy of level `n` under the fit's own convention, with a 1-sigma
/// uncertainty propagated to first order through the covariance.
pub fn predict_level(fit: &SeriesFit, n: u32) -> Result<(f64, f64)> {
    let delta0 = fit.coefficients.delta0();
    if !(n as f64 > delta0 + 1.0) {
        return Err(Error::InvalidEffectiveQuantumNumber { n, defect: delta0 });
    }
    let (energy, grad) = energy_with_gradient(&fit.parameters(), n, fit.rydberg, fit.method.convention())?;
    let g = DVector::from_vec(grad);
    let variance = (g.transpose() * &fit.covariance * &g)[(0, 0)];
    Ok((energy, variance.max(0.0).sqrt()))
}
