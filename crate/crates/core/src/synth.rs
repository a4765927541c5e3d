//! Seeded synthetic data and brute-force oracles.
//!
//! Randomness comes from ChaCha8 seeded with a `u64`, so the same spec
//! produces the same bytes on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineshape::{lorentzian_model, LorentzianParams, ScanTrace};
use crate::ritz::{level_energy, LevelRecord, RitzCoefficients, SeriesConvention};

/// Recorded uncertainty of noiseless synthetic levels, MHz.
pub const DEFAULT_LEVEL_SIGMA: f64 = 4.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn default_repeats() -> usize {
    1
}

/// Parameters of a synthetic level series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSynthSpec {
    /// MHz
    pub ionization_energy: f64,
    pub coefficients: RitzCoefficients,
    #[serde(default)]
    pub convention: SeriesConvention,
    pub n_min: u32,
    pub n_max: u32,
    /// Standard deviation of the Gaussian noise added to each energy, MHz.
    #[serde(default)]
    pub noise: f64,
    /// Uncertainty written into each record; defaults to `noise`, or
    /// [`DEFAULT_LEVEL_SIGMA`] for noiseless data.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Records generated per principal quantum number.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Parses a spec from TOML and validates it.
fn spec_from_toml<T: serde::de::DeserializeOwned>(text: &str, check: impl Fn(&T) -> Result<()>) -> Result<T> {
    let spec: T = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    check(&spec)?;
    Ok(spec)
}

impl SeriesSynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        spec_from_toml(text, Self::validate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 || self.n_max < self.n_min {
            return Err(Error::InvalidInput(format!("bad n range {}..={}", self.n_min, self.n_max)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidInput(format!("noise {} must be non-negative", self.noise)));
        }
        if !self.ionization_energy.is_finite() {
            return Err(Error::InvalidInput("ionization energy is not finite".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidInput("repeats must be at least 1".into()));
        }
        Ok(())
    }

    fn recorded_sigma(&self) -> f64 {
        self.sigma.unwrap_or(if self.noise > 0.0 { self.noise } else { DEFAULT_LEVEL_SIGMA })
    }
}

/// Levels from the series model plus Gaussian noise.
pub fn synth_series(spec: &SeriesSynthSpec, rydberg: f64) -> Result<Vec<LevelRecord>> {
    spec.validate()?;
    let mut rng = rng(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;
    let sigma = spec.recorded_sigma();
    let mut out = Vec::with_capacity((spec.n_max - spec.n_min + 1) as usize * spec.repeats);
    for n in spec.n_min..=spec.n_max {
        let delta = spec.coefficients.convention_value(spec.convention, n)?;
        let exact = level_energy(n, delta, spec.ionization_energy, rydberg)?;
        for _ in 0..spec.repeats {
            let mut record = LevelRecord::new(n, exact + noise.sample(&mut rng), sigma)?;
            record.third_step = None;
            out.push(record);
        }
    }
    Ok(out)
}

/// Parameters of a synthetic scan over one line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSynthSpec {
    pub line: LorentzianParams,
    /// First scan frequency, MHz.
    pub start: f64,
    /// Last scan frequency (inclusive when on the grid), MHz.
    pub stop: f64,
    pub step: f64,
    /// Counting time per point, s.
    pub dwell: f64,
    /// Detector dark rate added to the line, counts/s.
    #[serde(default)]
    pub dark_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Emit expected rates instead of Poisson draws.
    #[serde(default)]
    pub expectation: bool,
}

impl ScanSynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        spec_from_toml(text, Self::validate)
    }

    pub fn validate(&self) -> Result<()> {
        self.line.validate()?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.step) || !positive(self.dwell) {
            return Err(Error::InvalidInput("scan step and dwell must be positive".into()));
        }
        if !(self.start.is_finite() && self.stop > self.start) {
            return Err(Error::InvalidInput("scan stop must exceed start".into()));
        }
        if !(self.dark_rate.is_finite() && self.dark_rate >= 0.0) {
            return Err(Error::InvalidInput("dark rate must be non-negative".into()));
        }
        Ok(())
    }

    /// Scan frequencies `start + i*step` up to `stop`.
    pub fn frequencies(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.start + i as f64 * self.step).collect()
    }

    /// Noiseless rate at `f`, counts/s.
    pub fn expected_rate(&self, f: f64) -> f64 {
        lorentzian_model(&self.line, f) + self.dark_rate
    }

    /// Peak height over the dark-rate floor.
    pub fn configured_signal_to_noise(&self) -> f64 {
        self.line.amplitude / self.dark_rate
    }
}

/// Counts per point drawn from a Poisson law around the model.
pub fn synth_scan(spec: &ScanSynthSpec) -> Result<ScanTrace> {
    spec.validate()?;
    let mut rng = rng(spec.seed);
    let f = spec.frequencies();
    let rates = f
        .iter()
        .map(|&f| {
            let rate = spec.expected_rate(f);
            if spec.expectation {
                return Ok(rate);
            }
            let mean = rate * spec.dwell;
            if mean == 0.0 {
                return Ok(0.0);
            }
            let counts = Poisson::new(mean)
                .map_err(|e| Error::InvalidInput(format!("count distribution: {e}")))?
                .sample(&mut rng);
            Ok(counts / spec.dwell)
        })
        .collect::<Result<Vec<_>>>()?;
    ScanTrace::new(f, rates, None)
}

/// White frequency noise of standard deviation `sigma` around `reference`.
pub fn synth_frequency_record(count: usize, reference: f64, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    let normal = Normal::new(reference, sigma).map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;
    let mut rng = rng(seed);
    Ok((0..count).map(|_| normal.sample(&mut rng)).collect())
}

/// Quantum defect by bisection on `[0, n)`, without the closed-form root.
pub fn oracle_defect(n: u32, energy: f64, ionization: f64, rydberg: f64) -> Result<f64> {
    let binding = ionization - energy;
    if !(binding > 0.0) {
        return Err(Error::UnboundLevel { n: Some(n), energy, ionization });
    }
    let nf = n as f64;
    // increasing in delta on [0, n)
    let excess = |d: f64| rydberg / ((nf - d) * (nf - d)) - binding;
    if excess(0.0) > 1e-12 * binding {
        return Err(Error::InvalidInput(format!("level n = {n} is above the hydrogenic energy")));
    }
    let (mut lo, mut hi) = (0.0, nf);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
